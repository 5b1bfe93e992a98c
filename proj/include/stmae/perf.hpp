#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stmae/masking.hpp"
#include "stmae/model.hpp"
#include "stmae/ops.hpp"
#include "stmae/tokenizer.hpp"
#include "stmae/video.hpp"

// Multiply-accumulate (MAC) accounting for the asymmetric autoencoder. One
// MAC counts as one FLOP; only linear maps and attention products are
// counted (norms, softmax and activations are free).
namespace stmae {

// depth * (4nd^2 + 2n^2 d + 2 r n d^2)
inline std::uint64_t vit_flops(std::uint64_t n_tokens, std::uint64_t d, std::uint64_t depth,
                               std::uint64_t mlp_ratio) {
  const std::uint64_t qkv_out = 4 * n_tokens * d * d;
  const std::uint64_t attn = 2 * n_tokens * n_tokens * d;
  const std::uint64_t mlp = 2 * mlp_ratio * n_tokens * d * d;
  return depth * (qkv_out + attn + mlp);
}

struct FlopsStage {
  std::string name;
  std::uint64_t dense = 0;
  std::uint64_t sparse = 0;
};

struct FlopsReport {
  std::size_t tokens = 0;
  std::size_t visible = 0;
  double ratio = 0.0;
  std::vector<FlopsStage> stages;  // patch_embed, encoder_blocks, enc_to_dec, decoder_blocks, pred_head
  std::uint64_t dense_total = 0;
  std::uint64_t sparse_total = 0;
  double speedup = 1.0;

  std::string csv() const {
    std::ostringstream os;
    os << "stage,dense_macs,sparse_macs\n";
    for (const auto& s : stages) os << s.name << ',' << s.dense << ',' << s.sparse << '\n';
    os << "total," << dense_total << ',' << sparse_total << '\n';
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "tokens %zu, visible %zu (ratio %.3g)\n", tokens, visible, ratio);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-16s %14s %14s\n", "stage", "dense", "sparse");
    os << buf;
    for (const auto& s : stages) {
      std::snprintf(buf, sizeof(buf), "%-16s %12.1f G %12.1f G\n", s.name.c_str(), s.dense / 1e9, s.sparse / 1e9);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-16s %12.1f G %12.1f G\ngain %.2fx\n", "total", dense_total / 1e9,
                  sparse_total / 1e9, speedup);
    os << buf;
    return os.str();
  }
};

// Dense: the encoder runs on all N tokens. Sparse: the encoder runs on the
// floor(N(1-ratio)) visible tokens. The decoder and the prediction head run on
// all N positions either way; the mask-token broadcast costs nothing.
inline FlopsReport mae_flops(const MaeConfig& cfg, double ratio) {
  cfg.validate();
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("masking ratio must be in [0, 1)");
  const TokenGrid g = cfg.grid();
  const std::uint64_t n = g.tokens();
  const std::uint64_t v = detail::kept_count(g.tokens(), ratio);
  const std::uint64_t pd = cfg.patch.patch_dim(), q = cfg.patch.slice_dim();
  const std::uint64_t d = cfg.d_enc, dd = cfg.d_dec;
  FlopsReport r;
  r.tokens = n;
  r.visible = v;
  r.ratio = ratio;
  r.stages = {
      {"patch_embed", n * pd * d, v * pd * d},
      {"encoder_blocks", vit_flops(n, d, cfg.depth_enc, cfg.mlp_ratio), vit_flops(v, d, cfg.depth_enc, cfg.mlp_ratio)},
      {"enc_to_dec", n * d * dd, v * d * dd},
      {"decoder_blocks", vit_flops(n, dd, cfg.depth_dec, cfg.mlp_ratio), vit_flops(n, dd, cfg.depth_dec, cfg.mlp_ratio)},
      {"pred_head", n * dd * q, n * dd * q},
  };
  for (const auto& s : r.stages) {
    r.dense_total += s.dense;
    r.sparse_total += s.sparse;
  }
  r.speedup = r.sparse_total ? static_cast<double>(r.dense_total) / static_cast<double>(r.sparse_total) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Wall-clock harness.

struct BenchRow {
  double rho = 0.0;
  double measured_ms = 0.0;   // median forward+backward step time
  std::uint64_t analytic_macs = 0;
  double speedup = 1.0;       // dense_ms / measured_ms
  double analytic_speedup = 1.0;
  double load_ms = 0.0;       // median decode+augment time per sample, if a dataset was given
};

struct BenchReport {
  double dense_ms = 0.0;
  std::vector<BenchRow> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "rho,measured_ms,analytic_macs,speedup\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%.4g,%.4f,%llu,%.4f\n", r.rho, r.measured_ms,
                    static_cast<unsigned long long>(r.analytic_macs), r.speedup);
      os << buf;
    }
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%6s %12s %12s %10s %10s %14s\n", "rho", "compute_ms", "load+comp_ms",
                  "speedup", "analytic", "macs");
    os << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%6.3g %12.3f %12.3f %9.2fx %9.2fx %14llu\n", r.rho, r.measured_ms,
                    r.measured_ms + r.load_ms, r.speedup, r.analytic_speedup,
                    static_cast<unsigned long long>(r.analytic_macs));
      os << buf;
    }
    return os.str();
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One forward+backward step; dense runs the encoder over every token.
template <class T>
void bench_step(const MaeModel<T>& model, const Patches<T>& patches, const MaskPlan& plan, bool dense) {
  const auto params = model.parameters();
  for (const auto& p : params) {
    p.tensor.drop_grad();
  }
  GradTape<T> tape;
  TapeScope<T> scope(tape);
  Tensor<T> out;
  if (dense) {
    const auto all = all_tokens(patches.grid);
    out = model.run_decoder(model.decoder_input_dense(model.encode_tokens(patches, all), plan));
  } else {
    out = model.decode_all(model.encode(patches, plan), plan);
  }
  const Tensor<T> target = build_target(patches.rows, model.config().patch, model.config().target_normalize);
  Tensor<T> loss;
  if (plan.masked.empty()) {
    const Tensor<T> diff = sub(out, target);
    loss = mean(mul(diff, diff));
  } else {
    loss = MaeModel<T>::masked_mse(gather_rows(out, std::span<const std::size_t>(plan.masked)), target, plan);
  }
  tape.backward(loss);
}

template <class F>
double time_median(std::size_t reps, F&& f) {
  std::vector<double> ms;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return median(std::move(ms));
}

}  // namespace detail

struct BenchOptions {
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  const ClipDataset* dataset = nullptr;  // adds load time when set
  SampleOptions sampling;
};

// Median forward+backward time of the sparse path at each ratio against the
// dense path (all tokens encoded) with identical parameters.
inline BenchReport benchmark_step(const MaeConfig& cfg, const std::vector<double>& ratios,
                                  const BenchOptions& opt = {}) {
  cfg.validate();
  if (opt.repetitions < 1) throw ConfigError("repetitions must be >= 1");
  const MaeModel<float> model(cfg, opt.seed);
  Rng rng(opt.seed);
  VideoClip clip = VideoClip::zeros(cfg.frames, cfg.height, cfg.width, cfg.patch.in_channels);
  for (float& v : clip.pixels) v = static_cast<float>(rng.uniform());
  const Patches<float> patches = patchify<float>(clip, cfg.patch);
  const TokenGrid g = cfg.grid();

  double load_ms = 0.0;
  if (opt.dataset && !opt.dataset->empty()) {
    std::size_t k = 0;
    load_ms = detail::time_median(opt.repetitions, [&] {
      (void)make_sample(opt.dataset->load(k % opt.dataset->size()), opt.sampling, k);
      ++k;
    });
  }

  const double ref_ratio = ratios.empty() ? 0.9 : *std::max_element(ratios.begin(), ratios.end());
  const MaskPlan dense_plan = sample_agnostic(g, ref_ratio, opt.seed);
  for (std::size_t i = 0; i < opt.warmup; ++i) detail::bench_step(model, patches, dense_plan, true);
  BenchReport rep;
  rep.dense_ms = detail::time_median(opt.repetitions, [&] { detail::bench_step(model, patches, dense_plan, true); });

  for (double rho : ratios) {
    const MaskPlan plan = sample_agnostic(g, rho, opt.seed);
    BenchRow row;
    row.rho = rho;
    row.load_ms = load_ms;
    const FlopsReport fl = mae_flops(cfg, rho);
    row.analytic_macs = fl.sparse_total;
    row.analytic_speedup = fl.speedup;
    if (rho == 0.0) {
      row.measured_ms = rep.dense_ms;
    } else {
      for (std::size_t i = 0; i < opt.warmup; ++i) detail::bench_step(model, patches, plan, false);
      row.measured_ms = detail::time_median(opt.repetitions, [&] { detail::bench_step(model, patches, plan, false); });
    }
    row.speedup = rep.dense_ms / row.measured_ms;
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace stmae
