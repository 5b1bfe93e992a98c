#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/grid.hpp"
#include "stmae/masking.hpp"
#include "stmae/video.hpp"

namespace stmae {

namespace detail {

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

// Binary PPM (P6) of frame `ti` with the panels stacked top to bottom.
// Single-channel clips are written as gray.
inline std::vector<std::uint8_t> encode_ppm(const std::vector<const VideoClip*>& panels, std::size_t ti) {
  if (panels.empty()) throw ContractError("encode_ppm: no panels");
  const VideoClip& first = *panels.front();
  for (const VideoClip* p : panels) {
    if (!p->same_shape(first)) throw DimensionError("encode_ppm: panels differ in shape");
  }
  if (ti >= first.t) throw std::out_of_range("encode_ppm: frame index out of range");
  const std::size_t height = first.h * panels.size();
  const std::string header = "P6\n" + std::to_string(first.w) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + first.w * height * 3);
  for (const VideoClip* p : panels) {
    for (std::size_t y = 0; y < first.h; ++y) {
      for (std::size_t x = 0; x < first.w; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          out.push_back(detail::to_byte(p->at(ti, y, x, p->c == 1 ? 0 : std::min(ch, p->c - 1))));
        }
      }
    }
  }
  return out;
}

// Writes one `{stem}_f{index:03}.ppm` per frame: original on top, masked in
// the middle, reconstruction at the bottom. Returns the written paths.
inline std::vector<std::filesystem::path> write_triptych(const std::filesystem::path& dir, const std::string& stem,
                                                         const VideoClip& original, const VideoClip& masked,
                                                         const VideoClip& reconstructed) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  const std::vector<const VideoClip*> panels{&original, &masked, &reconstructed};
  for (std::size_t ti = 0; ti < original.t; ++ti) {
    char name[256];
    std::snprintf(name, sizeof(name), "%s_f%03zu.ppm", stem.c_str(), ti);
    paths.push_back(dir / name);
    detail::write_file(paths.back(), encode_ppm(panels, ti));
  }
  return paths;
}

// One text block per time slice: `#` masked, `.` visible.
inline std::string mask_grid_text(const MaskPlan& plan) {
  const TokenGrid& g = plan.grid;
  std::vector<char> masked(g.tokens(), 0);
  for (std::size_t m : plan.masked) masked[m] = 1;
  std::string out;
  for (std::size_t t = 0; t < g.t; ++t) {
    out += "t=" + std::to_string(t) + "\n";
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t x = 0; x < g.w; ++x) out += masked[g.index(t, y, x)] ? '#' : '.';
      out += '\n';
    }
  }
  return out;
}

}  // namespace stmae
