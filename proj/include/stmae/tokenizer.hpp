#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/grid.hpp"
#include "stmae/masking.hpp"
#include "stmae/ops.hpp"
#include "stmae/rng.hpp"
#include "stmae/tensor.hpp"
#include "stmae/video.hpp"

namespace stmae {

// Tubelet size: t_patch frames x p x p pixels x in_channels.
struct PatchSpec {
  std::size_t t_patch = 2;
  std::size_t p = 16;
  std::size_t in_channels = 3;

  // Flattened tubelet length.
  std::size_t patch_dim() const { return t_patch * p * p * in_channels; }
  // Flattened single-slice length (the reconstruction target).
  std::size_t slice_dim() const { return p * p * in_channels; }

  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

inline TokenGrid grid_for(std::size_t frames, std::size_t height, std::size_t width,
                          const PatchSpec& spec) {
  if (spec.t_patch == 0 || spec.p == 0) throw ConfigError("patch sizes must be >= 1");
  if (frames % spec.t_patch != 0) {
    throw ConfigError("time axis: " + std::to_string(frames) + " frames not divisible by temporal patch " +
                      std::to_string(spec.t_patch));
  }
  if (height % spec.p != 0) {
    throw ConfigError("height axis: " + std::to_string(height) + " not divisible by patch " +
                      std::to_string(spec.p));
  }
  if (width % spec.p != 0) {
    throw ConfigError("width axis: " + std::to_string(width) + " not divisible by patch " +
                      std::to_string(spec.p));
  }
  return {frames / spec.t_patch, height / spec.p, width / spec.p};
}

inline TokenGrid grid_for(const VideoClip& clip, const PatchSpec& spec) {
  if (clip.c != spec.in_channels) {
    throw ConfigError("channel axis: clip has " + std::to_string(clip.c) + " channels, patch spec expects " +
                      std::to_string(spec.in_channels));
  }
  return grid_for(clip.t, clip.h, clip.w, spec);
}

template <class T>
struct Patches {
  Tensor<T> rows;  // [N, t_patch*p*p*C], one flattened tubelet per row
  TokenGrid grid;
};

namespace detail {

// Calls f(token, offset_in_row, clip_offset) for every pixel of every tubelet.
template <class F>
void for_each_tubelet_pixel(const VideoClip& shape, const TokenGrid& g, const PatchSpec& s, F&& f) {
  const std::size_t c = shape.c;
  for (std::size_t tok = 0; tok < g.tokens(); ++tok) {
    const auto [ti, hi, wi] = g.coords(tok);
    std::size_t k = 0;
    for (std::size_t dt = 0; dt < s.t_patch; ++dt)
      for (std::size_t dy = 0; dy < s.p; ++dy)
        for (std::size_t dx = 0; dx < s.p; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch, ++k)
            f(tok, k, shape.offset(ti * s.t_patch + dt, hi * s.p + dy, wi * s.p + dx, ch));
  }
}

}  // namespace detail

// Splits a clip into non-overlapping tubelets. Row layout is (dt, dy, dx, c).
template <class T>
Patches<T> patchify(const VideoClip& clip, const PatchSpec& spec) {
  const TokenGrid g = grid_for(clip, spec);
  Tensor<T> rows({g.tokens(), spec.patch_dim()});
  const std::size_t d = spec.patch_dim();
  detail::for_each_tubelet_pixel(clip, g, spec, [&](std::size_t tok, std::size_t k, std::size_t off) {
    rows[tok * d + k] = static_cast<T>(clip.pixels[off]);
  });
  return {std::move(rows), g};
}

template <class T>
VideoClip unpatchify(const Tensor<T>& rows, const TokenGrid& g, const PatchSpec& spec) {
  if (rows.rank() != 2 || rows.dim(0) != g.tokens() || rows.dim(1) != spec.patch_dim()) {
    throw DimensionError("unpatchify: rows " + shape_str(rows.shape()) + " do not match grid " + g.str());
  }
  VideoClip clip = VideoClip::zeros(g.t * spec.t_patch, g.h * spec.p, g.w * spec.p, spec.in_channels);
  const std::size_t d = spec.patch_dim();
  detail::for_each_tubelet_pixel(clip, g, spec, [&](std::size_t tok, std::size_t k, std::size_t off) {
    clip.pixels[off] = static_cast<float>(rows[tok * d + k]);
  });
  return clip;
}

// Separable spacetime positions: token (t, s) gets time_table[t] + space_table[s].
// Storage is (T' + H'W') * d rather than T'H'W' * d.
template <class T>
struct PositionalEmbedding {
  Tensor<T> time_table;   // [T', d]
  Tensor<T> space_table;  // [H'W', d]

  static PositionalEmbedding init(const TokenGrid& g, std::size_t d, Rng& rng, double std = 0.02) {
    PositionalEmbedding pe{Tensor<T>({g.t, d}), Tensor<T>({g.spatial(), d})};
    for (auto& v : pe.time_table.data()) v = static_cast<T>(rng.truncated_normal(std));
    for (auto& v : pe.space_table.data()) v = static_cast<T>(rng.truncated_normal(std));
    pe.time_table.set_requires_grad();
    pe.space_table.set_requires_grad();
    return pe;
  }

  std::size_t width() const { return time_table.dim(1); }

  // Embedding rows for the given tokens, differentiable w.r.t. both tables.
  Tensor<T> rows(const TokenGrid& g, std::span<const std::size_t> tokens) const {
    std::vector<std::size_t> ti(tokens.size()), si(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      ti[i] = g.time_of(tokens[i]);
      si[i] = g.space_of(tokens[i]);
    }
    return add(gather_rows(time_table, ti), gather_rows(space_table, si));
  }

  // Full [N, d] table (not tracked).
  Tensor<T> materialize(const TokenGrid& g) const {
    const std::size_t d = width();
    Tensor<T> out({g.tokens(), d});
    for (std::size_t i = 0; i < g.tokens(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        out[i * d + j] = time_table.at(g.time_of(i), j) + space_table.at(g.space_of(i), j);
    return out;
  }
};

inline std::vector<std::size_t> all_tokens(const TokenGrid& g) {
  std::vector<std::size_t> v(g.tokens());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// row i = raw[tokens[i]] . w_embed + time_table[t_i] + space_table[s_i]
template <class T>
Tensor<T> embed(const Patches<T>& patches, const Tensor<T>& w_embed, const PositionalEmbedding<T>& pos,
                std::span<const std::size_t> tokens) {
  if (w_embed.rank() != 2 || w_embed.dim(0) != patches.rows.dim(1) || w_embed.dim(1) != pos.width()) {
    throw DimensionError("embed: projection " + shape_str(w_embed.shape()) + " incompatible with patches " +
                         shape_str(patches.rows.shape()) + " and positional width " +
                         std::to_string(pos.width()));
  }
  const Tensor<T> selected =
      tokens.size() == patches.grid.tokens() && std::is_sorted(tokens.begin(), tokens.end())
          ? patches.rows
          : gather_rows(patches.rows, tokens);
  return add(matmul(selected, w_embed), pos.rows(patches.grid, tokens));
}

template <class T>
Tensor<T> embed(const Patches<T>& patches, const Tensor<T>& w_embed, const PositionalEmbedding<T>& pos) {
  const auto idx = all_tokens(patches.grid);
  return embed(patches, w_embed, pos, std::span<const std::size_t>(idx));
}

// Mean and standard deviation of one tubelet's first temporal slice.
struct SliceStats {
  double mean = 0.0;
  double std = 0.0;
};

template <class T>
std::vector<SliceStats> slice_stats(const Tensor<T>& raw, const PatchSpec& spec) {
  const std::size_t q = spec.slice_dim(), d = raw.dim(1);
  std::vector<SliceStats> out(raw.dim(0));
  for (std::size_t i = 0; i < raw.dim(0); ++i) {
    double mu = 0.0;
    for (std::size_t k = 0; k < q; ++k) mu += static_cast<double>(raw[i * d + k]);
    mu /= static_cast<double>(q);
    double var = 0.0;
    for (std::size_t k = 0; k < q; ++k) {
      const double e = static_cast<double>(raw[i * d + k]) - mu;
      var += e * e;
    }
    out[i] = {mu, std::sqrt(var / static_cast<double>(q))};
  }
  return out;
}

// Reconstruction target: the first temporal slice of each tubelet, optionally
// standardized per patch as (x - mean) / (std + eps).
template <class T>
Tensor<T> build_target(const Tensor<T>& raw, const PatchSpec& spec, bool normalize, double eps = 1e-6) {
  if (raw.rank() != 2 || raw.dim(1) != spec.patch_dim()) {
    throw DimensionError("build_target: rows " + shape_str(raw.shape()) + " do not match patch spec");
  }
  const std::size_t q = spec.slice_dim(), d = raw.dim(1), n = raw.dim(0);
  Tensor<T> out({n, q});
  const auto stats = normalize ? slice_stats(raw, spec) : std::vector<SliceStats>{};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      const T v = raw[i * d + k];
      out[i * q + k] =
          normalize ? static_cast<T>((static_cast<double>(v) - stats[i].mean) / (stats[i].std + eps)) : v;
    }
  }
  return out;
}

// Clip with masked tubelets replaced by a flat fill value.
inline VideoClip mask_video(const VideoClip& original, const MaskPlan& plan, const PatchSpec& spec,
                            float fill = 0.5f) {
  const TokenGrid g = grid_for(original, spec);
  if (!(g == plan.grid)) throw ContractError("mask_video: plan grid does not match clip");
  std::vector<char> masked(g.tokens(), 0);
  for (std::size_t m : plan.masked) masked[m] = 1;
  VideoClip out = original;
  detail::for_each_tubelet_pixel(original, g, spec, [&](std::size_t tok, std::size_t, std::size_t off) {
    if (masked[tok]) out.pixels[off] = fill;
  });
  return out;
}

// Output clip for visualization: original pixels at visible tubelets and
// decoded predictions at masked ones. Each predicted slice is broadcast over
// the tubelet's t_patch frames; normalized predictions are mapped back with the
// original slice's mean and std. Values are clamped to [0, 1].
template <class T>
VideoClip stitch_visualization(const VideoClip& original, const MaskPlan& plan, const Tensor<T>& predictions,
                               const PatchSpec& spec, bool normalized, double eps = 1e-6) {
  const TokenGrid g = grid_for(original, spec);
  if (!(g == plan.grid)) throw ContractError("stitch_visualization: plan grid does not match clip");
  if (plan.masked.empty()) return original;  // nothing to predict
  const std::size_t q = spec.slice_dim();
  if (predictions.rank() != 2 || predictions.dim(0) != plan.masked.size() || predictions.dim(1) != q) {
    throw ContractError("stitch_visualization: expected " + std::to_string(plan.masked.size()) + "x" +
                        std::to_string(q) + " predictions, got " + shape_str(predictions.shape()));
  }
  const Patches<double> raw = patchify<double>(original, spec);
  const auto stats = slice_stats(raw.rows, spec);
  std::vector<std::size_t> row_of(g.tokens(), SIZE_MAX);
  for (std::size_t r = 0; r < plan.masked.size(); ++r) row_of[plan.masked[r]] = r;
  VideoClip out = original;
  detail::for_each_tubelet_pixel(original, g, spec, [&](std::size_t tok, std::size_t k, std::size_t off) {
    const std::size_t r = row_of[tok];
    if (r == SIZE_MAX) return;
    double v = static_cast<double>(predictions[r * q + k % q]);
    if (normalized) v = v * (stats[tok].std + eps) + stats[tok].mean;
    out.pixels[off] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  });
  return out;
}

// Collapses a tubelet projection [t_patch*Q, d] to a single-frame projection
// [Q, d] by summing its temporal sub-blocks.
template <class T>
Tensor<T> deflate_patch_embed(const Tensor<T>& w_embed, const PatchSpec& spec) {
  const std::size_t q = spec.slice_dim();
  if (w_embed.rank() != 2 || w_embed.dim(0) != spec.t_patch * q) {
    throw DimensionError("deflate_patch_embed: projection " + shape_str(w_embed.shape()) +
                         " does not match patch spec");
  }
  const std::size_t d = w_embed.dim(1);
  Tensor<T> out({q, d});
  for (std::size_t dt = 0; dt < spec.t_patch; ++dt)
    for (std::size_t k = 0; k < q; ++k)
      for (std::size_t j = 0; j < d; ++j) out[k * d + j] += w_embed[(dt * q + k) * d + j];
  return out;
}

}  // namespace stmae
