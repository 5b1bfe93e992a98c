#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmae/checkpoint.hpp"
#include "stmae/error.hpp"
#include "stmae/masking.hpp"
#include "stmae/model.hpp"
#include "stmae/ops.hpp"
#include "stmae/rng.hpp"
#include "stmae/tensor.hpp"
#include "stmae/tokenizer.hpp"
#include "stmae/video.hpp"

namespace stmae {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class T>
struct OptimState {
  AdamWConfig hp;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
};

// One AdamW update with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// Parameters with decay == false skip the wd term. Missing gradient buffers
// count as zero.
template <class T>
void adamw_step(const std::vector<NamedParam<T>>& params, OptimState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T{0});
      state.v.emplace_back(p.tensor.size(), T{0});
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.size()) {
      throw DimensionError("adamw_step: moment shape mismatch for " + params[i].name);
    }
    for (T g : params[i].tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("non-finite gradient in parameter '" + params[i].name + "'");
      }
    }
  }
  ++state.step;
  const auto& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    const auto grad = p.grad();
    const double wd = params[i].decay ? hp.weight_decay : 0.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      const double mk = hp.beta1 * static_cast<double>(m[k]) + (1.0 - hp.beta1) * g;
      const double vk = hp.beta2 * static_cast<double>(v[k]) + (1.0 - hp.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + hp.eps) + wd * static_cast<double>(p[k]);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * update);
    }
  }
}

// Global L2 norm of all gradient buffers.
template <class T>
double global_grad_norm(const std::vector<NamedParam<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// Rescales every gradient by max_norm / norm when the global norm exceeds
// max_norm. Returns the norm before clipping.
template <class T>
double clip_gradients(const std::vector<NamedParam<T>>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("gradient clipping threshold must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      Tensor<T> t = p.tensor;
      if (!t.has_grad()) continue;
      for (T& g : t.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

template <class T>
void zero_grads(const std::vector<NamedParam<T>>& params) {
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
}

struct RunConfig {
  std::size_t epochs = 800;
  std::size_t warmup_epochs = 120;
  double base_lr = 1.6e-3;
  std::size_t batch_size = 512;
  std::size_t repeat_factor = 4;
  double grad_clip = 0.02;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 0;  // checkpoint every N epochs; 0 = final only
  AdamWConfig adamw;
  bool deterministic = true;  // timing columns of metrics.csv written as 0
  std::size_t workers = 1;

  void validate() const {
    if (epochs == 0 || batch_size == 0 || repeat_factor == 0) {
      throw ConfigError("epochs, batch_size and repeat_factor must be positive");
    }
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
    if (batch_size % repeat_factor != 0) throw ConfigError("batch_size must be a multiple of repeat_factor");
    if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be positive");
    if (!(grad_clip > 0.0)) throw ConfigError("gradient clipping threshold must be positive");
  }
};

struct LrSchedule {
  double base_lr = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

inline std::size_t total_steps(const RunConfig& run, std::size_t dataset_size) {
  return (run.epochs * dataset_size + run.batch_size - 1) / run.batch_size;
}

inline LrSchedule make_schedule(const RunConfig& run, std::size_t dataset_size) {
  const std::size_t total = std::max<std::size_t>(1, total_steps(run, dataset_size));
  const std::size_t warm = run.warmup_epochs * dataset_size / run.batch_size;
  return {run.base_lr, std::min(warm, total - 1), total};
}

// Linear warmup from 0 to base_lr, then half-cosine decay to 0.
inline double lr_at(const LrSchedule& s, std::size_t step) {
  if (step < s.warmup_steps) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const std::size_t decay = s.total_steps - s.warmup_steps;
  if (decay == 0) return s.base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay));
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct MetricsRow {
  std::size_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double loss = 0.0;
  double tokens_per_sec = 0.0;
  double wall_ms = 0.0;
};

inline std::string format_metrics(const std::vector<MetricsRow>& rows, bool zero_timing) {
  std::ostringstream os;
  os << "step,epoch,lr,loss,tokens_per_sec,wall_ms\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.9g,%.9g,%.6g,%.3f\n", r.step, r.epoch, r.lr, r.loss,
                  zero_timing ? 0.0 : r.tokens_per_sec, zero_timing ? 0.0 : r.wall_ms);
    os << buf;
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

// Mask seed for one sample, derived from the run seed and the sample's seed.
inline std::uint64_t mask_seed_for(std::uint64_t run_seed, std::uint64_t sample_seed) {
  return mix_seed({run_seed, 0x6d61736bULL, sample_seed});
}

struct PretrainOptions {
  SampleOptions sampling;
  std::optional<std::filesystem::path> out_dir;
  std::uint64_t init_seed = 0;
  // Called after every step with the row just logged.
  std::function<void(const MetricsRow&)> on_step;
};

struct PretrainResult {
  MaeModel<float> model;
  std::vector<MetricsRow> log;
  std::size_t steps = 0;
  std::size_t samples = 0;
  std::size_t decodes = 0;
};

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Masked-autoencoder pretraining loop over effective epochs. Each sample gets
// a fresh mask plan seeded from the run seed and the sample's seed.
inline PretrainResult pretrain(const ClipDataset& data, const MaeConfig& cfg, const RunConfig& run,
                               const PretrainOptions& opt = {}) {
  cfg.validate();
  run.validate();
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  PretrainResult res{MaeModel<float>(cfg, opt.init_seed), {}, 0, 0, 0};
  const auto params = res.model.parameters();
  OptimState<float> state;
  state.hp = run.adamw;
  ClipLoader loader(data, opt.sampling, run.batch_size, run.repeat_factor, run.seed, run.workers);
  const LrSchedule sched = make_schedule(run, data.size());
  const TokenGrid grid = cfg.grid();
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.size() / run.batch_size);
  const auto start = Clock::now();
  if (opt.out_dir) std::filesystem::create_directories(*opt.out_dir);

  for (std::size_t step = 0; step < sched.total_steps; ++step) {
    const auto t0 = Clock::now();
    const SampleBatch batch = loader.next_batch();
    zero_grads(params);
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    const float inv_b = 1.0f / static_cast<float>(batch.clips.size());
    for (std::size_t i = 0; i < batch.clips.size(); ++i) {
      const MaskPlan plan = sample_mask(cfg.sampler, grid, cfg.mask_ratio, mask_seed_for(run.seed, batch.seeds[i]));
      GradTape<float> tape;
      TapeScope<float> scope(tape);
      auto out = res.model.forward_pretrain(batch.clips[i], plan);
      const double l = out.loss.item();
      if (!std::isfinite(l)) {
        throw std::runtime_error("non-finite loss at step " + std::to_string(step) + ", sample " + std::to_string(i));
      }
      loss_sum += l;
      tokens += plan.visible.size();
      Tensor<float> scaled = scale(out.loss, inv_b);
      tape.backward(scaled);
    }
    clip_gradients(params, run.grad_clip);
    const double lr = lr_at(sched, step);
    adamw_step(params, state, lr);

    const double step_ms = ms_since(t0);
    MetricsRow row;
    row.step = step;
    row.epoch = loader.effective_epoch();
    row.lr = lr;
    row.loss = loss_sum / static_cast<double>(batch.clips.size());
    row.tokens_per_sec = step_ms > 0.0 ? 1000.0 * static_cast<double>(tokens) / step_ms : 0.0;
    row.wall_ms = ms_since(start);
    res.log.push_back(row);
    if (opt.on_step) opt.on_step(row);

    if (opt.out_dir && run.eval_interval > 0 && (step + 1) % (steps_per_epoch * run.eval_interval) == 0 &&
        step + 1 < sched.total_steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_step%06zu.ckpt", step + 1);
      write_checkpoint(*opt.out_dir / name, model_checkpoint(res.model));
    }
  }
  res.steps = sched.total_steps;
  res.samples = loader.samples_seen();
  res.decodes = loader.decodes();
  if (opt.out_dir) {
    write_checkpoint(*opt.out_dir / "final.ckpt", model_checkpoint(res.model));
    write_text(*opt.out_dir / "metrics.csv", format_metrics(res.log, run.deterministic));
    if (run.deterministic) write_text(*opt.out_dir / "timing.csv", format_metrics(res.log, false));
  }
  return res;
}

// Masked MSE of a model on fixed (clip, plan) pairs, without gradients, plus
// the loss of predicting all zeros on the same pairs.
struct ReconstructionEval {
  double mse = 0.0;
  double zero_baseline = 0.0;
};

template <class T>
ReconstructionEval evaluate_reconstruction(const MaeModel<T>& model, const std::vector<VideoClip>& clips,
                                           const std::vector<MaskPlan>& plans) {
  NoGradScope<T> no_grad;
  ReconstructionEval ev;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    auto out = model.forward_pretrain(clips[i], plans[i]);
    ev.mse += static_cast<double>(out.loss.item());
    const Tensor<T> zeros = Tensor<T>::zeros(out.predictions.shape());
    ev.zero_baseline += static_cast<double>(MaeModel<T>::masked_mse(zeros, out.targets, plans[i]).item());
  }
  ev.mse /= static_cast<double>(clips.size());
  ev.zero_baseline /= static_cast<double>(clips.size());
  return ev;
}

struct FinetuneOptions {
  SampleOptions sampling;
  std::size_t num_classes = kNumDirections;
  std::uint64_t init_seed = 0;
  std::uint64_t head_seed = 1;
  std::optional<std::filesystem::path> out_dir;
};

struct FinetuneResult {
  double accuracy = 0.0;
  std::vector<MetricsRow> log;
  std::vector<std::size_t> tokens_per_sample;  // encoder sequence length per step
  std::vector<double> ratio_per_step;
  std::vector<double> step_ms;
  MaeModel<float> model;
  ClassifierHead<float> head;
};

// Accuracy of dense classification over a labeled dataset (first frames, no
// augmentation).
inline double evaluate_accuracy(const MaeModel<float>& model, const ClassifierHead<float>& head,
                                const ClipDataset& data, const SampleOptions& sampling) {
  NoGradScope<float> no_grad;
  SampleOptions eval = sampling;
  eval.random_augment = false;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const VideoClip clip = make_sample(data.load(i), eval, 0);
    const Tensor<float> logits = classify(model, head, patchify<float>(clip, model.config().patch));
    const auto d = logits.data();
    const auto best = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    if (best == data.label(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Supervised fine-tuning of the encoder plus a linear head with
// cross-entropy. `init` supplies pretrained encoder weights; without it the
// encoder starts from random initialization. The schedule sets the masking
// ratio per step (constant 0 is ordinary dense fine-tuning).
inline FinetuneResult finetune(const ClipDataset& train, const ClipDataset& eval, const MaeConfig& cfg,
                               const Checkpoint* init, const RunConfig& run, MaskSchedule schedule,
                               const FinetuneOptions& opt = {}) {
  cfg.validate();
  run.validate();
  if (!train.has_labels() || !eval.has_labels()) throw ContractError("finetune: datasets must be labeled");
  for (const ClipDataset* d : {&train, &eval})
    for (int l : d->labels())
      if (l < 0 || static_cast<std::size_t>(l) >= opt.num_classes) {
        throw ConfigError("finetune: label " + std::to_string(l) + " outside " + std::to_string(opt.num_classes) +
                          " classes");
      }
  MaeModel<float> model(cfg, opt.init_seed);
  if (init) load_parameters(*init, model.parameters(), &MaeModel<float>::is_encoder_param);
  Rng head_rng(opt.head_seed);
  ClassifierHead<float> head = ClassifierHead<float>::init(cfg.d_enc, opt.num_classes, head_rng);

  std::vector<NamedParam<float>> params;
  for (auto& p : model.parameters())
    if (MaeModel<float>::is_encoder_param(p.name)) params.push_back(p);
  for (auto& p : head.parameters()) params.push_back(p);

  OptimState<float> state;
  state.hp = run.adamw;
  ClipLoader loader(train, opt.sampling, run.batch_size, run.repeat_factor, run.seed, run.workers);
  const LrSchedule sched = make_schedule(run, train.size());
  schedule.total_steps = sched.total_steps;
  const TokenGrid grid = cfg.grid();
  FinetuneResult res;
  const auto start = Clock::now();

  for (std::size_t step = 0; step < sched.total_steps; ++step) {
    const auto t0 = Clock::now();
    const SampleBatch batch = loader.next_batch();
    zero_grads(params);
    const double ratio = ratio_at(schedule, step);
    double loss_sum = 0.0;
    std::size_t seq = grid.tokens();
    const float inv_b = 1.0f / static_cast<float>(batch.clips.size());
    for (std::size_t i = 0; i < batch.clips.size(); ++i) {
      const Patches<float> patches = patchify<float>(batch.clips[i], cfg.patch);
      GradTape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> logits;
      if (ratio > 0.0) {
        const MaskPlan plan = sample_agnostic(grid, ratio, mask_seed_for(run.seed, batch.seeds[i]));
        seq = plan.visible.size();
        logits = classify(model, head, patches, &plan);
      } else {
        logits = classify(model, head, patches);
      }
      const int label = batch.labels[i];
      Tensor<float> loss = cross_entropy(logits, std::span<const int>(&label, 1));
      const double l = loss.item();
      if (!std::isfinite(l)) throw std::runtime_error("non-finite loss at fine-tune step " + std::to_string(step));
      loss_sum += l;
      Tensor<float> scaled = scale(loss, inv_b);
      tape.backward(scaled);
    }
    clip_gradients(params, run.grad_clip);
    const double lr = lr_at(sched, step);
    adamw_step(params, state, lr);
    const double ms = ms_since(t0);
    res.step_ms.push_back(ms);
    res.tokens_per_sample.push_back(seq);
    res.ratio_per_step.push_back(ratio);
    MetricsRow row;
    row.step = step;
    row.epoch = loader.effective_epoch();
    row.lr = lr;
    row.loss = loss_sum / static_cast<double>(batch.clips.size());
    row.tokens_per_sec = ms > 0.0 ? 1000.0 * static_cast<double>(seq * batch.clips.size()) / ms : 0.0;
    row.wall_ms = ms_since(start);
    res.log.push_back(row);
  }
  res.accuracy = evaluate_accuracy(model, head, eval, opt.sampling);
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    write_checkpoint(*opt.out_dir / "final.ckpt", model_checkpoint(model, head.parameters()));
    write_text(*opt.out_dir / "metrics.csv", format_metrics(res.log, run.deterministic));
    if (run.deterministic) write_text(*opt.out_dir / "timing.csv", format_metrics(res.log, false));
  }
  res.model = std::move(model);
  res.head = std::move(head);
  return res;
}

}  // namespace stmae
