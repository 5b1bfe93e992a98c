// stmae: command-line front end for pretraining, fine-tuning, reconstruction,
// mask visualization, FLOPs accounting and benchmarking.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stmae/stmae.hpp"

namespace fs = std::filesystem;
using namespace stmae;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::size_t> parse_extents(const std::string& s, std::size_t expected, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + s + "' is not a list of positive integers");
    }
  }
  if (out.size() != expected) {
    throw UsageError(std::string(flag) + " expects " + std::to_string(expected) + " comma-separated values");
  }
  return out;
}

std::vector<double> parse_ratios(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v >= 0.0 && v < 1.0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--ratios: '" + item + "' is not a ratio in [0, 1)");
    }
  }
  if (out.empty()) throw UsageError("--ratios: empty list");
  return out;
}

std::size_t env_threads(std::size_t fallback) {
  const char* v = std::getenv("SPACETIME_MAE_THREADS");
  if (!v || !*v) return fallback;
  try {
    const long long n = std::stoll(v);
    if (n >= 1) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("SPACETIME_MAE_THREADS must be a positive integer, got '") + v + "'");
}

RunManifest load_manifest(const std::string& path, const std::string& command) {
  RunManifest base;
  base.command = command;
  RunManifest m = manifest_from(KeyValueFile::load(path), base);
  m.command = command;
  m.run.workers = env_threads(m.run.workers);
  return m;
}

void print_row(const MetricsRow& r) {
  std::printf("step %zu  epoch %.2f  lr %.3e  loss %.5f\n", r.step, r.epoch, r.lr, r.loss);
  std::fflush(stdout);
}

// --- commands -------------------------------------------------------------

struct GenDataArgs {
  std::string out, kind = "moving_square", shape = "4,32,32,1";
  std::size_t count = 64;
  std::uint64_t seed = 0;
  int speed = 1;
};

int cmd_gen_data(const GenDataArgs& a) {
  const auto s = parse_extents(a.shape, 4, "--shape");
  const SyntheticKind kind = parse_synthetic_kind(a.kind);
  Rng rng(a.seed);
  std::vector<VideoClip> clips;
  std::vector<int> labels;
  for (std::size_t i = 0; i < a.count; ++i) {
    SyntheticClip c = generate_synthetic(kind, s[0], s[1], s[2], s[3], rng, SyntheticOptions{a.speed});
    clips.push_back(std::move(c.clip));
    labels.push_back(c.label);
  }
  write_dataset(a.out, clips, labels);
  std::printf("wrote %zu clips (%s, %s) to %s\n", a.count, a.kind.c_str(), a.shape.c_str(), a.out.c_str());
  return kExitOk;
}

struct RunArgs {
  std::string data, config, out, init = "scratch";
};

// Flags override the config; manifest.txt then records what actually ran and
// can be passed back as --config to replay the run.
void resolve_inputs(RunManifest& m, const RunArgs& a, bool with_init) {
  m.data_dir = a.data;
  m.out_dir = a.out;
  if (with_init) m.init = a.init;
}

int cmd_pretrain(const RunArgs& a) {
  RunManifest m = load_manifest(a.config, "pretrain");
  resolve_inputs(m, a, false);
  const ClipDataset data = ClipDataset::open_directory(m.data_dir);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "manifest.txt", format_manifest(m));
  PretrainOptions opt;
  opt.sampling = m.sampling;
  opt.out_dir = fs::path(a.out);
  opt.init_seed = m.init_seed;
  opt.on_step = print_row;
  const PretrainResult res = pretrain(data, m.model, m.run, opt);
  std::printf("pretrain done: %zu steps, %zu samples, %zu decodes; final loss %.5f\n", res.steps, res.samples,
              res.decodes, res.log.empty() ? 0.0 : res.log.back().loss);
  return kExitOk;
}

int cmd_finetune(const RunArgs& a) {
  RunManifest m = load_manifest(a.config, "finetune");
  resolve_inputs(m, a, true);
  const ClipDataset data = ClipDataset::open_directory(m.data_dir);
  if (!data.has_labels()) throw std::runtime_error("finetune: " + m.data_dir + " has no labels.tsv");
  const auto n_eval = static_cast<std::size_t>(m.finetune.eval_fraction * static_cast<double>(data.size()));
  if (n_eval == 0 || n_eval >= data.size()) {
    throw ConfigError("eval_fraction leaves an empty train or eval split for " + std::to_string(data.size()) +
                      " clips");
  }
  std::vector<std::size_t> train_idx, eval_idx;
  for (std::size_t i = 0; i < data.size(); ++i) (i < data.size() - n_eval ? train_idx : eval_idx).push_back(i);
  Checkpoint init;
  const bool scratch = m.init == "scratch";
  if (!scratch) init = read_checkpoint(m.init);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "manifest.txt", format_manifest(m));
  FinetuneOptions opt;
  opt.sampling = m.sampling;
  opt.num_classes = m.finetune.num_classes;
  opt.init_seed = m.init_seed;
  opt.out_dir = fs::path(a.out);
  const MaskSchedule sched{m.finetune.mask_start, m.finetune.mask_end, 1, m.finetune.mask_shape};
  const FinetuneResult res = finetune(data.subset(train_idx), data.subset(eval_idx), m.model,
                                      scratch ? nullptr : &init, m.run, sched, opt);
  for (const auto& r : res.log) print_row(r);
  std::printf("finetune done (%s): %zu steps, eval accuracy %.4f on %zu clips\n", scratch ? "scratch" : "pretrained",
              res.log.size(), res.accuracy, eval_idx.size());
  write_text(fs::path(a.out) / "accuracy.txt", detail::fmt_double(res.accuracy) + "\n");
  return kExitOk;
}

struct ReconArgs {
  std::string ckpt, clip, out, sampler = "agnostic";
  double ratio = 0.9;
  std::uint64_t seed = 0;
};

int cmd_reconstruct(const ReconArgs& a) {
  const Checkpoint ckpt = read_checkpoint(a.ckpt);
  const MaeModel<float> model = model_from_checkpoint<float>(ckpt);
  const MaeConfig& cfg = model.config();
  const VideoClip clip = read_clip(a.clip);
  if (clip.t != cfg.frames || clip.h != cfg.height || clip.w != cfg.width || clip.c != cfg.patch.in_channels) {
    throw ContractError("geometry mismatch: checkpoint expects " + std::to_string(cfg.frames) + "x" +
                        std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "x" +
                        std::to_string(cfg.patch.in_channels) + " clips, " + a.clip + " is " +
                        std::to_string(clip.t) + "x" + std::to_string(clip.h) + "x" + std::to_string(clip.w) +
                        "x" + std::to_string(clip.c));
  }
  const MaskPlan plan = sample_mask(parse_sampler(a.sampler), cfg.grid(), a.ratio, a.seed);
  VideoClip recon = clip;
  double mse = 0.0;
  if (!plan.masked.empty()) {
    NoGradScope<float> no_grad;
    const auto out = model.forward_pretrain(clip, plan);
    mse = out.loss.item();
    recon = stitch_visualization(clip, plan, out.predictions, cfg.patch, cfg.target_normalize, cfg.target_eps);
  }
  const VideoClip masked = mask_video(clip, plan, cfg.patch);
  const auto files = write_triptych(a.out, "recon", clip, masked, recon);
  std::printf("visible %zu / %zu tokens; masked_mse %.6f; wrote %zu frames to %s\n", plan.visible.size(),
              plan.grid.tokens(), mse, files.size(), a.out.c_str());
  return kExitOk;
}

struct FlopsArgs {
  std::string config, csv;
  double ratio = -1.0;
};

int cmd_flops(const FlopsArgs& a) {
  const RunManifest m = load_manifest(a.config, "flops");
  const double ratio = a.ratio >= 0.0 ? a.ratio : m.model.mask_ratio;
  const FlopsReport rep = mae_flops(m.model, ratio);
  std::cout << rep.table();
  if (!a.csv.empty()) write_text(a.csv, rep.csv());
  return kExitOk;
}

struct BenchArgs {
  std::string config, ratios = "0.5,0.75,0.9", csv, data;
  std::size_t reps = 5;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  const RunManifest m = load_manifest(a.config, "bench");
  BenchOptions opt;
  opt.repetitions = a.reps;
  opt.seed = a.seed;
  opt.sampling = m.sampling;
  ClipDataset data;
  if (!a.data.empty()) {
    data = ClipDataset::open_directory(a.data);
    opt.dataset = &data;
  }
  const BenchReport rep = benchmark_step(m.model, parse_ratios(a.ratios), opt);
  std::printf("dense step %.3f ms\n", rep.dense_ms);
  std::cout << rep.table();
  if (!a.csv.empty()) write_text(a.csv, rep.csv());
  return kExitOk;
}

struct MaskVizArgs {
  std::string grid = "8,14,14", sampler = "agnostic", out;
  double ratio = 0.9;
  std::uint64_t seed = 0;
};

int cmd_mask_viz(const MaskVizArgs& a) {
  const auto g = parse_extents(a.grid, 3, "--grid");
  const MaskPlan plan = sample_mask(parse_sampler(a.sampler), TokenGrid{g[0], g[1], g[2]}, a.ratio, a.seed);
  const std::string text = mask_grid_text(plan);
  if (a.out.empty()) std::cout << text;
  else write_text(a.out, text);
  std::fprintf(stderr, "visible %zu / %zu\n", plan.visible.size(), plan.grid.tokens());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatiotemporal masked autoencoder tools"};
  app.require_subcommand(1);
  const std::vector<std::string> kinds{"moving_square", "two_object", "moving_gradient"};
  const std::vector<std::string> samplers{"agnostic", "space_only", "time_only", "block",
                                          "random",   "tube",       "frame",     "cube"};

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic labeled clip dataset");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--kind", gen.kind, "Synthetic kind")->check(CLI::IsMember(kinds));
  c_gen->add_option("--count", gen.count, "Number of clips")->check(CLI::PositiveNumber);
  c_gen->add_option("--shape", gen.shape, "T,H,W,C");
  c_gen->add_option("--seed", gen.seed, "Seed");
  c_gen->add_option("--speed", gen.speed, "Pixels per frame")->check(CLI::PositiveNumber);

  RunArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining");
  c_pre->add_option("--data", pre.data, "Dataset directory")->required();
  c_pre->add_option("--config", pre.config, "Config file")->required();
  c_pre->add_option("--out", pre.out, "Output directory")->required();

  RunArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Supervised fine-tuning on clip labels");
  c_ft->add_option("--data", ft.data, "Labeled dataset directory")->required();
  c_ft->add_option("--init", ft.init, "Checkpoint path or 'scratch'")->required();
  c_ft->add_option("--config", ft.config, "Config file")->required();
  c_ft->add_option("--out", ft.out, "Output directory")->required();

  ReconArgs rec;
  auto* c_rec = app.add_subcommand("reconstruct", "Write original/masked/reconstructed PPM frames");
  c_rec->add_option("--ckpt", rec.ckpt, "Checkpoint")->required();
  c_rec->add_option("--clip", rec.clip, "Clip file (.vmae)")->required();
  c_rec->add_option("--ratio", rec.ratio, "Masking ratio")->check(CLI::Range(0.0, 0.999999));
  c_rec->add_option("--sampler", rec.sampler, "Mask sampler")->check(CLI::IsMember(samplers));
  c_rec->add_option("--seed", rec.seed, "Mask seed");
  c_rec->add_option("--out", rec.out, "Output directory")->required();

  FlopsArgs fl;
  auto* c_fl = app.add_subcommand("flops", "Analytic MAC counts, dense vs sparse encoder");
  c_fl->add_option("--config", fl.config, "Config file")->required();
  c_fl->add_option("--ratio", fl.ratio, "Override masking ratio")->check(CLI::Range(0.0, 0.999999));
  c_fl->add_option("--csv", fl.csv, "Also write CSV here");

  BenchArgs be;
  auto* c_be = app.add_subcommand("bench", "Measured step time, dense vs sparse encoder");
  c_be->add_option("--config", be.config, "Config file")->required();
  c_be->add_option("--ratios", be.ratios, "Comma-separated masking ratios");
  c_be->add_option("--reps", be.reps, "Timed repetitions")->check(CLI::PositiveNumber);
  c_be->add_option("--seed", be.seed, "Seed");
  c_be->add_option("--data", be.data, "Dataset directory (adds load time)");
  c_be->add_option("--csv", be.csv, "Also write CSV here");

  MaskVizArgs mv;
  auto* c_mv = app.add_subcommand("mask-viz", "Print a mask as text, one block per time slice");
  c_mv->add_option("--grid", mv.grid, "T,H,W token grid");
  c_mv->add_option("--ratio", mv.ratio, "Masking ratio")->check(CLI::Range(0.0, 0.999999));
  c_mv->add_option("--sampler", mv.sampler, "Mask sampler")->check(CLI::IsMember(samplers));
  c_mv->add_option("--seed", mv.seed, "Mask seed");
  c_mv->add_option("--out", mv.out, "Write to file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_pre->parsed()) return cmd_pretrain(pre);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_rec->parsed()) return cmd_reconstruct(rec);
    if (c_fl->parsed()) return cmd_flops(fl);
    if (c_be->parsed()) return cmd_bench(be);
    if (c_mv->parsed()) return cmd_mask_viz(mv);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
