#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/grid.hpp"
#include "stmae/rng.hpp"

namespace stmae {

enum class Sampler { agnostic, space_only, time_only, block };

inline std::string_view sampler_name(Sampler s) {
  switch (s) {
    case Sampler::agnostic: return "agnostic";
    case Sampler::space_only: return "space_only";
    case Sampler::time_only: return "time_only";
    case Sampler::block: return "block";
  }
  return "?";
}

inline Sampler parse_sampler(std::string_view name) {
  if (name == "agnostic" || name == "random") return Sampler::agnostic;
  if (name == "space_only" || name == "tube") return Sampler::space_only;
  if (name == "time_only" || name == "frame") return Sampler::time_only;
  if (name == "block" || name == "cube") return Sampler::block;
  throw ConfigError("unknown sampler '" + std::string(name) +
                    "' (expected agnostic, space_only, time_only or block)");
}

// One spacetime box drawn by the block sampler.
struct MaskBox {
  std::size_t t0 = 0, h0 = 0, w0 = 0;
  std::size_t dt = 1, dh = 1, dw = 1;
  std::size_t volume() const { return dt * dh * dw; }
};

// Partition of a token grid into visible and masked indices.
struct MaskPlan {
  TokenGrid grid;
  std::vector<std::size_t> visible;  // sorted
  std::vector<std::size_t> masked;   // sorted
  double ratio = 0.0;
  Sampler sampler = Sampler::agnostic;
  std::uint64_t seed = 0;
  std::vector<MaskBox> boxes;  // block sampler only, in draw order

  std::size_t tokens() const { return grid.tokens(); }
  double achieved_ratio() const {
    return static_cast<double>(masked.size()) / static_cast<double>(tokens());
  }

  // `sampler ratio seed grid=T,H,W visible=i1,i2,...`
  std::string to_line() const {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), ratio);
    std::ostringstream os;
    os << sampler_name(sampler) << ' ' << std::string_view(buf, res.ptr - buf) << ' ' << seed
       << " grid=" << grid.str() << " visible=";
    for (std::size_t i = 0; i < visible.size(); ++i) os << (i ? "," : "") << visible[i];
    return os.str();
  }

  static MaskPlan from_line(std::string_view line);
};

namespace detail {

inline void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("masking ratio must be in [0, 1), got " + std::to_string(ratio));
  }
}

// floor(n * (1 - ratio)), tolerant of representation error in the ratio.
inline std::size_t kept_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - ratio) + 1e-9));
}

// k distinct values from [0, n) by partial Fisher-Yates, returned sorted.
inline std::vector<std::size_t> choose_sorted(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline MaskPlan plan_from_flags(const TokenGrid& grid, const std::vector<char>& keep,
                                double ratio, Sampler sampler, std::uint64_t seed) {
  MaskPlan plan;
  plan.grid = grid;
  plan.ratio = ratio;
  plan.sampler = sampler;
  plan.seed = seed;
  for (std::size_t i = 0; i < keep.size(); ++i) (keep[i] ? plan.visible : plan.masked).push_back(i);
  return plan;
}

}  // namespace detail

// Uniform sample without replacement of floor(N(1-ratio)) visible tokens,
// ignoring spacetime structure.
inline MaskPlan sample_agnostic(const TokenGrid& grid, double ratio, std::uint64_t seed) {
  detail::check_ratio(ratio);
  Rng rng(seed);
  const std::size_t n = grid.tokens();
  std::vector<char> keep(n, 0);
  for (std::size_t i : detail::choose_sorted(n, detail::kept_count(n, ratio), rng)) keep[i] = 1;
  return detail::plan_from_flags(grid, keep, ratio, Sampler::agnostic, seed);
}

// Spatial cells sampled once and broadcast over time ("tube" masking).
inline MaskPlan sample_space_only(const TokenGrid& grid, double ratio, std::uint64_t seed) {
  detail::check_ratio(ratio);
  Rng rng(seed);
  const std::size_t s = grid.spatial();
  std::vector<char> cell(s, 0);
  for (std::size_t i : detail::choose_sorted(s, detail::kept_count(s, ratio), rng)) cell[i] = 1;
  std::vector<char> keep(grid.tokens(), 0);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = cell[grid.space_of(i)];
  return detail::plan_from_flags(grid, keep, ratio, Sampler::space_only, seed);
}

// Time steps sampled once and broadcast over space ("frame" masking).
inline MaskPlan sample_time_only(const TokenGrid& grid, double ratio, std::uint64_t seed) {
  detail::check_ratio(ratio);
  Rng rng(seed);
  std::vector<char> step(grid.t, 0);
  for (std::size_t i : detail::choose_sorted(grid.t, detail::kept_count(grid.t, ratio), rng))
    step[i] = 1;
  std::vector<char> keep(grid.tokens(), 0);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = step[grid.time_of(i)];
  return detail::plan_from_flags(grid, keep, ratio, Sampler::time_only, seed);
}

struct BlockSamplerParams {
  double min_spatial_area = 4.0;
  double min_aspect = 0.5;
  double max_aspect = 2.0;
};

// Masks random spacetime boxes until at least ceil(N * ratio) tokens are
// covered ("cube" masking). Spatial area is log-uniform between
// min_spatial_area and H'W', aspect ratio log-uniform, temporal extent
// uniform in [1, T']. Every drawn box is kept in plan.boxes.
inline MaskPlan sample_block(const TokenGrid& grid, double ratio, std::uint64_t seed,
                             const BlockSamplerParams& params = {}) {
  detail::check_ratio(ratio);
  Rng rng(seed);
  const std::size_t n = grid.tokens();
  const auto target = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * ratio - 1e-9));
  std::vector<char> keep(n, 1);
  std::size_t masked = 0;
  std::vector<MaskBox> boxes;
  const double s = static_cast<double>(grid.spatial());
  const double log_min_area = std::log(std::min(params.min_spatial_area, s));
  const double log_max_area = std::log(s);
  const double log_min_aspect = std::log(params.min_aspect);
  const double log_max_aspect = std::log(params.max_aspect);
  while (masked < target) {
    const double area = std::exp(rng.uniform(log_min_area, log_max_area));
    const double aspect = std::exp(rng.uniform(log_min_aspect, log_max_aspect));
    MaskBox box;
    box.dh = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(std::sqrt(area * aspect))), 1, grid.h);
    box.dw = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(std::sqrt(area / aspect))), 1, grid.w);
    box.dt = static_cast<std::size_t>(rng.uniform_int(std::int64_t{1}, std::int64_t(grid.t)));
    box.t0 = static_cast<std::size_t>(rng.uniform_int(grid.t - box.dt + 1));
    box.h0 = static_cast<std::size_t>(rng.uniform_int(grid.h - box.dh + 1));
    box.w0 = static_cast<std::size_t>(rng.uniform_int(grid.w - box.dw + 1));
    for (std::size_t t = box.t0; t < box.t0 + box.dt; ++t)
      for (std::size_t h = box.h0; h < box.h0 + box.dh; ++h)
        for (std::size_t w = box.w0; w < box.w0 + box.dw; ++w) {
          char& k = keep[grid.index(t, h, w)];
          if (k) {
            k = 0;
            ++masked;
          }
        }
    boxes.push_back(box);
  }
  MaskPlan plan = detail::plan_from_flags(grid, keep, ratio, Sampler::block, seed);
  plan.boxes = std::move(boxes);
  return plan;
}

inline MaskPlan sample_mask(Sampler sampler, const TokenGrid& grid, double ratio,
                            std::uint64_t seed) {
  switch (sampler) {
    case Sampler::agnostic: return sample_agnostic(grid, ratio, seed);
    case Sampler::space_only: return sample_space_only(grid, ratio, seed);
    case Sampler::time_only: return sample_time_only(grid, ratio, seed);
    case Sampler::block: return sample_block(grid, ratio, seed);
  }
  throw ConfigError("unknown sampler");
}

inline MaskPlan MaskPlan::from_line(std::string_view line) {
  std::istringstream is{std::string(line)};
  std::string sampler, ratio, seed, grid_field, visible_field;
  if (!(is >> sampler >> ratio >> seed >> grid_field)) {
    throw FormatError("mask plan line: expected 'sampler ratio seed grid=T,H,W visible=...'");
  }
  is >> visible_field;
  if (grid_field.rfind("grid=", 0) != 0 || visible_field.rfind("visible=", 0) != 0) {
    throw FormatError("mask plan line: missing grid= or visible= field");
  }
  auto parse_list = [](std::string_view s) {
    std::vector<std::size_t> out;
    while (!s.empty()) {
      const auto comma = s.find(',');
      const std::string_view tok = s.substr(0, comma);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) {
        throw FormatError("mask plan line: bad integer '" + std::string(tok) + "'");
      }
      out.push_back(v);
      if (comma == std::string_view::npos) break;
      s.remove_prefix(comma + 1);
    }
    return out;
  };
  MaskPlan plan;
  plan.sampler = parse_sampler(sampler);
  plan.ratio = std::stod(ratio);
  plan.seed = std::stoull(seed);
  const auto g = parse_list(std::string_view(grid_field).substr(5));
  if (g.size() != 3) throw FormatError("mask plan line: grid needs three extents");
  plan.grid = {g[0], g[1], g[2]};
  plan.visible = parse_list(std::string_view(visible_field).substr(8));
  std::vector<char> keep(plan.grid.tokens(), 0);
  for (std::size_t v : plan.visible) {
    if (v >= keep.size()) throw FormatError("mask plan line: visible index out of range");
    keep[v] = 1;
  }
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) plan.masked.push_back(i);
  return plan;
}

enum class ScheduleShape { constant, cosine };

// Masking ratio as a function of fine-tuning step.
struct MaskSchedule {
  double start_ratio = 0.0;
  double end_ratio = 0.0;
  std::size_t total_steps = 1;
  ScheduleShape shape = ScheduleShape::constant;
};

inline double ratio_at(const MaskSchedule& schedule, std::size_t step) {
  if (step > schedule.total_steps) {
    throw ContractError("ratio_at: step " + std::to_string(step) + " beyond schedule of " +
                        std::to_string(schedule.total_steps) + " steps");
  }
  if (schedule.shape == ScheduleShape::constant || schedule.total_steps == 0)
    return schedule.start_ratio;
  const double progress = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.end_ratio +
         (schedule.start_ratio - schedule.end_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace stmae
