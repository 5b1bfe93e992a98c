#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/rng.hpp"

namespace stmae {

// T x H x W x C block of pixels in [0, 1], frame-major, channel-last.
struct VideoClip {
  std::size_t t = 0, h = 0, w = 0, c = 0;
  std::vector<float> pixels;
  std::string source_id;
  std::size_t frame_stride = 1;

  static VideoClip zeros(std::size_t t, std::size_t h, std::size_t w, std::size_t c) {
    if (t == 0 || h == 0 || w == 0 || c == 0) {
      throw DimensionError("clip extents must be >= 1");
    }
    VideoClip v;
    v.t = t;
    v.h = h;
    v.w = w;
    v.c = c;
    v.pixels.assign(t * h * w * c, 0.0f);
    return v;
  }

  std::size_t frame_size() const { return h * w * c; }
  std::size_t offset(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) const {
    return ((ti * h + y) * w + x) * c + ch;
  }
  float& at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) {
    return pixels[offset(ti, y, x, ch)];
  }
  float at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[offset(ti, y, x, ch)];
  }

  bool same_shape(const VideoClip& o) const { return t == o.t && h == o.h && w == o.w && c == o.c; }

  // Throws unless extents are positive and every value is finite in [0, 1].
  void validate() const {
    if (t == 0 || h == 0 || w == 0 || c == 0) throw DimensionError("clip extents must be >= 1");
    if (pixels.size() != t * h * w * c) throw DimensionError("clip payload size mismatch");
    for (float v : pixels) {
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
        throw ContractError("clip '" + source_id + "' has a value outside [0,1]");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Clip file: "VMAE", u32 version, u32 T,H,W,C, then f32 payload; all
// little-endian.

inline constexpr std::uint32_t kClipFileVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n, std::string what)
      : p_(p), n_(n), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw FormatError(what_ + ": truncated file");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_clip(const VideoClip& clip) {
  std::vector<std::uint8_t> out;
  out.reserve(24 + clip.pixels.size() * 4);
  for (char ch : std::string_view("VMAE")) out.push_back(static_cast<std::uint8_t>(ch));
  detail::put_u32(out, kClipFileVersion);
  for (std::size_t e : {clip.t, clip.h, clip.w, clip.c}) detail::put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : clip.pixels) detail::put_f32(out, v);
  return out;
}

inline VideoClip decode_clip(const std::vector<std::uint8_t>& bytes, std::string source_id = {}) {
  detail::ByteReader r(bytes.data(), bytes.size(), "clip file " + source_id);
  if (r.bytes(4) != "VMAE") throw FormatError("clip file " + source_id + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kClipFileVersion) {
    throw FormatError("clip file " + source_id + ": unsupported version " + std::to_string(version));
  }
  const std::size_t t = r.u32(), h = r.u32(), w = r.u32(), c = r.u32();
  VideoClip clip = VideoClip::zeros(t, h, w, c);
  for (float& v : clip.pixels) v = r.f32();
  if (!r.done()) throw FormatError("clip file " + source_id + ": trailing bytes");
  clip.source_id = std::move(source_id);
  return clip;
}

inline void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  detail::write_file(path, encode_clip(clip));
}

inline VideoClip read_clip(const std::filesystem::path& path) {
  return decode_clip(detail::read_file(path), path.filename().string());
}

// ---------------------------------------------------------------------------
// Temporal sampling.

// num_frames frames at `stride` starting from `start`; indices past the end
// repeat the last frame.
inline VideoClip sample_clip_at(const VideoClip& video, std::size_t num_frames, std::size_t stride,
                                std::size_t start) {
  if (num_frames < 1 || stride < 1) throw ConfigError("num_frames and stride must be >= 1");
  if (video.t < 1) throw ContractError("sample_clip: empty video");
  VideoClip out = VideoClip::zeros(num_frames, video.h, video.w, video.c);
  const std::size_t fs = video.frame_size();
  for (std::size_t i = 0; i < num_frames; ++i) {
    const std::size_t src = std::min(start + i * stride, video.t - 1);
    std::copy_n(video.pixels.begin() + static_cast<std::ptrdiff_t>(src * fs), fs,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(i * fs));
  }
  out.source_id = video.source_id;
  out.frame_stride = video.frame_stride * stride;
  return out;
}

// Largest start index for which the sampled window fits inside the video.
inline std::size_t max_clip_start(std::size_t video_frames, std::size_t num_frames,
                                  std::size_t stride) {
  const std::size_t span = (num_frames - 1) * stride + 1;
  return video_frames > span ? video_frames - span : 0;
}

inline VideoClip sample_clip(const VideoClip& video, std::size_t num_frames, std::size_t stride,
                             Rng& rng) {
  if (num_frames < 1 || stride < 1) throw ConfigError("num_frames and stride must be >= 1");
  const std::size_t start = rng.uniform_int(max_clip_start(video.t, num_frames, stride) + 1);
  return sample_clip_at(video, num_frames, stride, start);
}

// ---------------------------------------------------------------------------
// Spatial augmentation: random resized crop + horizontal flip, drawn once per
// clip and applied to every frame.

struct AugmentOptions {
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  double scale_lo = 0.5;
  double scale_hi = 1.0;
  double hflip_prob = 0.5;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
};

struct CropParams {
  std::size_t y0 = 0, x0 = 0, h = 1, w = 1;
  bool flip = false;
  friend bool operator==(const CropParams&, const CropParams&) = default;
};

inline CropParams draw_crop(std::size_t height, std::size_t width, const AugmentOptions& opt,
                            Rng& rng) {
  if (!(opt.scale_lo > 0.0 && opt.scale_lo <= opt.scale_hi && opt.scale_hi <= 1.0)) {
    throw ConfigError("crop scale range must satisfy 0 < lo <= hi <= 1");
  }
  CropParams p;
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(opt.aspect_lo), log_hi = std::log(opt.aspect_hi);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(opt.scale_lo, opt.scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = std::max<long long>(1, std::llround(std::sqrt(target * aspect)));
    const auto h = std::max<long long>(1, std::llround(std::sqrt(target / aspect)));
    if (static_cast<std::size_t>(w) <= width && static_cast<std::size_t>(h) <= height) {
      p.h = static_cast<std::size_t>(h);
      p.w = static_cast<std::size_t>(w);
      p.y0 = rng.uniform_int(height - p.h + 1);
      p.x0 = rng.uniform_int(width - p.w + 1);
      found = true;
    }
  }
  if (!found) {
    // Whole-frame center crop with the aspect ratio clamped into range.
    const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
    if (in_ratio < opt.aspect_lo) {
      p.w = width;
      p.h = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(static_cast<double>(width) / opt.aspect_lo)), 1, height);
    } else if (in_ratio > opt.aspect_hi) {
      p.h = height;
      p.w = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(static_cast<double>(height) * opt.aspect_hi)), 1, width);
    } else {
      p.h = height;
      p.w = width;
    }
    p.y0 = (height - p.h) / 2;
    p.x0 = (width - p.w) / 2;
  }
  p.flip = rng.bernoulli(opt.hflip_prob);
  return p;
}

// Bilinear resize of the crop window to out_h x out_w, then optional mirror.
inline VideoClip apply_crop(const VideoClip& clip, const CropParams& p, std::size_t out_h,
                            std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ConfigError("augment output size must be >= 1");
  VideoClip out = VideoClip::zeros(clip.t, out_h, out_w, clip.c);
  out.source_id = clip.source_id;
  out.frame_stride = clip.frame_stride;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t origin, std::size_t extent, std::size_t out_extent) {
    std::vector<Tap> v(out_extent);
    const double s = static_cast<double>(extent) / static_cast<double>(out_extent);
    for (std::size_t o = 0; o < out_extent; ++o) {
      double src = (static_cast<double>(o) + 0.5) * s - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, extent - 1);
      v[o] = {origin + i0, origin + i1, src - static_cast<double>(i0)};
    }
    return v;
  };
  const auto ty = taps(p.y0, p.h, out_h);
  const auto tx = taps(p.x0, p.w, out_w);
  for (std::size_t t = 0; t < clip.t; ++t) {
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        const Tap& a = ty[y];
        const Tap& b = tx[p.flip ? out_w - 1 - x : x];
        for (std::size_t ch = 0; ch < clip.c; ++ch) {
          const double v00 = clip.at(t, a.i0, b.i0, ch), v01 = clip.at(t, a.i0, b.i1, ch);
          const double v10 = clip.at(t, a.i1, b.i0, ch), v11 = clip.at(t, a.i1, b.i1, ch);
          const double top = v00 + (v01 - v00) * b.f;
          const double bot = v10 + (v11 - v10) * b.f;
          out.at(t, y, x, ch) = static_cast<float>(std::clamp(top + (bot - top) * a.f, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

inline VideoClip augment(const VideoClip& clip, const AugmentOptions& opt, Rng& rng,
                         CropParams* drawn = nullptr) {
  const CropParams p = draw_crop(clip.h, clip.w, opt, rng);
  if (drawn) *drawn = p;
  return apply_crop(clip, p, opt.out_h, opt.out_w);
}

// ---------------------------------------------------------------------------
// Synthetic motion clips. The label is one of eight compass directions:
// 0=E, 1=SE, 2=S, 3=SW, 4=W, 5=NW, 6=N, 7=NE (image y grows downward).

enum class SyntheticKind { moving_square, moving_gradient, two_object };

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "moving_square") return SyntheticKind::moving_square;
  if (s == "moving_gradient") return SyntheticKind::moving_gradient;
  if (s == "two_object") return SyntheticKind::two_object;
  throw ConfigError("unknown synthetic kind '" + std::string(s) +
                    "' (expected moving_square, moving_gradient or two_object)");
}

inline constexpr int kNumDirections = 8;

inline std::array<int, 2> direction_vector(int label) {
  static constexpr std::array<std::array<int, 2>, 8> dirs{
      {{1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0}, {-1, -1}, {0, -1}, {1, -1}}};
  return dirs.at(static_cast<std::size_t>(label));
}

struct SyntheticClip {
  VideoClip clip;
  int label = 0;
};

struct SyntheticOptions {
  int speed = 1;  // pixels per frame along each nonzero axis
  // Background ramp orientation in radians (pi/2: dark top, bright bottom,
  // unchanged by horizontal flips). nullopt draws a random orientation.
  std::optional<double> ramp_angle = M_PI / 2;
};

namespace detail {

// Static linear ramp in [0.1, 0.45]. One angle is always drawn so the rng
// stream does not depend on `angle`.
inline void fill_ramp(VideoClip& v, Rng& rng, std::optional<double> angle) {
  const double drawn = rng.uniform(0.0, 2.0 * M_PI);
  const double theta = angle ? *angle : drawn;
  const double cx = std::cos(theta), cy = std::sin(theta);
  for (std::size_t y = 0; y < v.h; ++y) {
    for (std::size_t x = 0; x < v.w; ++x) {
      const double u = cx * (static_cast<double>(x) / static_cast<double>(v.w - 1) - 0.5) +
                       cy * (static_cast<double>(y) / static_cast<double>(v.h - 1) - 0.5);
      const float val = static_cast<float>(0.275 + 0.25 * u);
      for (std::size_t t = 0; t < v.t; ++t)
        for (std::size_t ch = 0; ch < v.c; ++ch) v.at(t, y, x, ch) = val;
    }
  }
}

// Start coordinate keeping an object of `size` inside [0, extent) for all
// frames when possible; positions wrap otherwise.
inline long long object_start(std::size_t extent, std::size_t size, long long travel, Rng& rng) {
  const long long lo = std::max<long long>(0, -travel);
  const long long hi = static_cast<long long>(extent) - static_cast<long long>(size) -
                       std::max<long long>(0, travel);
  if (hi >= lo) return rng.uniform_int(lo, hi);
  return rng.uniform_int(std::int64_t{0}, static_cast<std::int64_t>(extent) - 1);
}

inline void draw_square(VideoClip& v, std::size_t side, int label, int speed, float intensity,
                        Rng& rng) {
  const auto [dx, dy] = direction_vector(label);
  const long long travel_x = static_cast<long long>(dx) * speed * static_cast<long long>(v.t - 1);
  const long long travel_y = static_cast<long long>(dy) * speed * static_cast<long long>(v.t - 1);
  const long long x0 = object_start(v.w, side, travel_x, rng);
  const long long y0 = object_start(v.h, side, travel_y, rng);
  const auto wrap = [](long long p, std::size_t n) {
    const auto m = static_cast<long long>(n);
    return static_cast<std::size_t>(((p % m) + m) % m);
  };
  for (std::size_t t = 0; t < v.t; ++t) {
    const long long ox = x0 + static_cast<long long>(dx) * speed * static_cast<long long>(t);
    const long long oy = y0 + static_cast<long long>(dy) * speed * static_cast<long long>(t);
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j) {
        const std::size_t y = wrap(oy + static_cast<long long>(i), v.h);
        const std::size_t x = wrap(ox + static_cast<long long>(j), v.w);
        for (std::size_t ch = 0; ch < v.c; ++ch) v.at(t, y, x, ch) = intensity;
      }
  }
}

}  // namespace detail

inline SyntheticClip generate_synthetic(SyntheticKind kind, std::size_t t, std::size_t h,
                                        std::size_t w, std::size_t c, Rng& rng,
                                        const SyntheticOptions& opt = {}) {
  if (t < 1 || h < 8 || w < 8 || c < 1) {
    throw ConfigError("synthetic clips need H, W >= 8 and T, C >= 1");
  }
  SyntheticClip out;
  out.label = static_cast<int>(rng.uniform_int(kNumDirections));
  VideoClip& v = out.clip;
  v = VideoClip::zeros(t, h, w, c);
  switch (kind) {
    case SyntheticKind::moving_square: {
      detail::fill_ramp(v, rng, opt.ramp_angle);
      detail::draw_square(v, std::max<std::size_t>(2, std::min(h, w) / 4), out.label, opt.speed,
                          0.9f, rng);
      break;
    }
    case SyntheticKind::two_object: {
      detail::fill_ramp(v, rng, opt.ramp_angle);
      const int distractor = static_cast<int>(rng.uniform_int(kNumDirections));
      detail::draw_square(v, std::max<std::size_t>(2, std::min(h, w) / 6), distractor, opt.speed,
                          0.6f, rng);
      detail::draw_square(v, std::max<std::size_t>(2, std::min(h, w) / 4), out.label, opt.speed,
                          0.9f, rng);
      break;
    }
    case SyntheticKind::moving_gradient: {
      const auto [dx, dy] = direction_vector(out.label);
      const double lx = rng.uniform(0.5, 1.0) * static_cast<double>(w);
      const double ly = rng.uniform(0.5, 1.0) * static_cast<double>(h);
      const double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI);
      for (std::size_t f = 0; f < t; ++f)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double sx = static_cast<double>(x) - dx * opt.speed * static_cast<double>(f);
            const double sy = static_cast<double>(y) - dy * opt.speed * static_cast<double>(f);
            const auto val = static_cast<float>(0.5 + 0.2 * std::sin(2.0 * M_PI * sx / lx + px) +
                                                0.2 * std::sin(2.0 * M_PI * sy / ly + py));
            for (std::size_t ch = 0; ch < c; ++ch) v.at(f, y, x, ch) = val;
          }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets: in memory, or a flat directory of .vmae files with an optional
// labels.tsv (filename TAB integer).

class ClipDataset {
 public:
  static ClipDataset in_memory(std::vector<VideoClip> clips, std::vector<int> labels = {}) {
    if (!labels.empty() && labels.size() != clips.size()) {
      throw ContractError("dataset: label count does not match clip count");
    }
    ClipDataset d;
    d.clips_ = std::move(clips);
    d.labels_ = std::move(labels);
    return d;
  }

  static ClipDataset open_directory(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw FormatError("dataset directory not found: " + dir.string());
    ClipDataset d;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".vmae") d.paths_.push_back(entry.path());
    }
    std::sort(d.paths_.begin(), d.paths_.end());
    const fs::path label_file = dir / "labels.tsv";
    if (fs::exists(label_file)) {
      std::map<std::string, int> by_name;
      std::ifstream in(label_file);
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
          throw FormatError("labels.tsv:" + std::to_string(lineno) + ": expected 'filename<TAB>label'");
        }
        try {
          by_name[line.substr(0, tab)] = std::stoi(line.substr(tab + 1));
        } catch (const std::exception&) {
          throw FormatError("labels.tsv:" + std::to_string(lineno) + ": bad label");
        }
      }
      for (const auto& p : d.paths_) {
        auto it = by_name.find(p.filename().string());
        if (it == by_name.end()) throw FormatError("labels.tsv has no entry for " + p.filename().string());
        d.labels_.push_back(it->second);
      }
    }
    return d;
  }

  std::size_t size() const { return paths_.empty() ? clips_.size() : paths_.size(); }
  bool empty() const { return size() == 0; }
  bool has_labels() const { return !labels_.empty(); }
  int label(std::size_t i) const { return labels_.at(i); }
  const std::vector<int>& labels() const { return labels_; }

  VideoClip load(std::size_t i) const {
    if (!paths_.empty()) return read_clip(paths_.at(i));
    return clips_.at(i);
  }

  // Subset of the in-memory or on-disk items, in the given order.
  ClipDataset subset(const std::vector<std::size_t>& idx) const {
    ClipDataset d;
    for (std::size_t i : idx) {
      if (!paths_.empty()) d.paths_.push_back(paths_.at(i));
      else d.clips_.push_back(clips_.at(i));
      if (has_labels()) d.labels_.push_back(labels_.at(i));
    }
    return d;
  }

 private:
  std::vector<VideoClip> clips_;
  std::vector<std::filesystem::path> paths_;
  std::vector<int> labels_;
};

// Writes clip_00000.vmae ... plus labels.tsv (when labels are given).
inline void write_dataset(const std::filesystem::path& dir, const std::vector<VideoClip>& clips,
                          const std::vector<int>& labels) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw FormatError("cannot create dataset directory " + dir.string());
  std::ostringstream tsv;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05zu.vmae", i);
    write_clip(dir / name, clips[i]);
    if (!labels.empty()) tsv << name << '\t' << labels.at(i) << '\n';
  }
  if (!labels.empty()) {
    std::ofstream out(dir / "labels.tsv", std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write labels.tsv in " + dir.string());
    out << tsv.str();
  }
}

// ---------------------------------------------------------------------------
// Loading with repeated sampling.

struct SampleOptions {
  std::size_t num_frames = 16;
  std::size_t stride = 4;
  AugmentOptions augment;
  bool random_augment = true;  // false: first frames, no crop or flip
};

struct SampleBatch {
  std::vector<VideoClip> clips;
  std::vector<int> labels;             // empty if the dataset is unlabeled
  std::vector<std::uint64_t> seeds;    // one per sample
  std::vector<std::size_t> sources;    // dataset index per sample
  std::size_t decoded = 0;             // distinct source decodes for this batch
};

// One sample: temporal window + spatial augmentation, both from `seed`.
inline VideoClip make_sample(const VideoClip& video, const SampleOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  if (!opt.random_augment) {
    VideoClip v = sample_clip_at(video, opt.num_frames, opt.stride, 0);
    if (v.h == opt.augment.out_h && v.w == opt.augment.out_w) return v;
    return apply_crop(v, CropParams{0, 0, v.h, v.w, false}, opt.augment.out_h, opt.augment.out_w);
  }
  VideoClip v = sample_clip(video, opt.num_frames, opt.stride, rng);
  return augment(v, opt.augment, rng);
}

namespace detail {

inline void check_repeat(std::size_t batch_size, std::size_t repeat_factor) {
  if (repeat_factor < 1) throw ConfigError("repeat_factor must be >= 1");
  if (batch_size < 1 || batch_size % repeat_factor != 0) {
    throw ConfigError("batch_size (" + std::to_string(batch_size) +
                      ") must be a positive multiple of repeat_factor (" +
                      std::to_string(repeat_factor) + ")");
  }
}

// Decodes each source once and draws repeat_factor samples from it, using
// up to `workers` threads. Output order and content do not depend on the
// worker count.
inline SampleBatch build_batch(const ClipDataset& data, const std::vector<std::size_t>& sources,
                               const std::vector<std::uint64_t>& seeds, std::size_t repeat_factor,
                               const SampleOptions& opt, std::size_t workers) {
  SampleBatch batch;
  const std::size_t n = sources.size() * repeat_factor;
  batch.clips.resize(n);
  batch.seeds = seeds;
  batch.decoded = sources.size();
  for (std::size_t s : sources)
    for (std::size_t r = 0; r < repeat_factor; ++r) {
      batch.sources.push_back(s);
      if (data.has_labels()) batch.labels.push_back(data.label(s));
    }
  auto work = [&](std::size_t first_source, std::size_t step) {
    for (std::size_t si = first_source; si < sources.size(); si += step) {
      const VideoClip video = data.load(sources[si]);
      for (std::size_t r = 0; r < repeat_factor; ++r) {
        const std::size_t k = si * repeat_factor + r;
        batch.clips[k] = make_sample(video, opt, seeds[k]);
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, sources.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work, i, workers);
    for (auto& th : pool) th.join();
  }
  return batch;
}

}  // namespace detail

// Stateless batch: batch_size / repeat_factor distinct sources drawn at
// random, each decoded once and sampled repeat_factor times.
inline SampleBatch load_batch(const ClipDataset& data, std::size_t batch_size,
                              std::size_t repeat_factor, Rng& rng, const SampleOptions& opt,
                              std::size_t workers = 1) {
  if (data.empty()) throw ContractError("load_batch: empty dataset");
  detail::check_repeat(batch_size, repeat_factor);
  const std::size_t n_src = batch_size / repeat_factor;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::size_t> sources;
  for (std::size_t k = 0; k < n_src; ++k) {
    const std::size_t pos = k % order.size();
    if (pos == 0) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    sources.push_back(order[pos]);
  }
  std::vector<std::uint64_t> seeds(batch_size);
  for (auto& s : seeds) s = rng.next_u64();
  return detail::build_batch(data, sources, seeds, repeat_factor, opt, workers);
}

// Sequential loader over shuffled passes of the dataset.
//
// Epochs are effective epochs: one effective epoch is dataset.size()
// samples, however they are grouped by repeated sampling. A decode pass
// over every source therefore spans repeat_factor effective epochs.
class ClipLoader {
 public:
  ClipLoader(const ClipDataset& data, SampleOptions opt, std::size_t batch_size,
             std::size_t repeat_factor, std::uint64_t seed, std::size_t workers = 1)
      : data_(data), opt_(std::move(opt)), batch_size_(batch_size), repeat_(repeat_factor),
        seed_(seed), workers_(workers) {
    if (data_.empty()) throw ContractError("loader: empty dataset");
    detail::check_repeat(batch_size, repeat_factor);
  }

  SampleBatch next_batch() {
    std::vector<std::size_t> sources;
    std::vector<std::uint64_t> seeds;
    for (std::size_t k = 0; k < batch_size_ / repeat_; ++k) sources.push_back(next_source());
    for (std::size_t k = 0; k < batch_size_; ++k) {
      const std::size_t n = data_.size();
      seeds.push_back(mix_seed({seed_, samples_ / n, samples_ % n}));
      ++samples_;
    }
    decodes_ += sources.size();
    return detail::build_batch(data_, sources, seeds, repeat_, opt_, workers_);
  }

  std::size_t samples_seen() const { return samples_; }
  std::size_t decodes() const { return decodes_; }
  std::size_t samples_per_epoch() const { return data_.size(); }
  double effective_epoch() const {
    return static_cast<double>(samples_) / static_cast<double>(data_.size());
  }

 private:
  std::size_t next_source() {
    if (cursor_ == order_.size()) {
      order_.resize(data_.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      Rng rng(mix_seed({seed_, 0x5eedULL, pass_++}));
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(i)]);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  const ClipDataset& data_;
  SampleOptions opt_;
  std::size_t batch_size_, repeat_;
  std::uint64_t seed_;
  std::size_t workers_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t pass_ = 0;
  std::size_t samples_ = 0;
  std::size_t decodes_ = 0;
};

}  // namespace stmae
