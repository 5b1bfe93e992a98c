#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/masking.hpp"
#include "stmae/model.hpp"
#include "stmae/trainer.hpp"
#include "stmae/video.hpp"

// Run configuration files: one `key = value` per line, `#` starts a comment.
// Keys follow the usual pretraining-recipe vocabulary (optimizer_momentum,
// warmup_epochs, repeated_sampling, gradient_clipping, ...). Unknown keys are
// rejected so typos surface immediately.
namespace stmae {

struct FinetuneSettings {
  double mask_start = 0.0;
  double mask_end = 0.0;
  ScheduleShape mask_shape = ScheduleShape::constant;
  std::size_t num_classes = kNumDirections;
  double eval_fraction = 0.25;
};

// Every resolved setting of a run.
struct RunManifest {
  std::string command = "pretrain";
  MaeConfig model;
  RunConfig run;
  SampleOptions sampling;
  FinetuneSettings finetune;
  std::string data_dir;
  std::string out_dir;
  std::string init = "scratch";
  std::uint64_t init_seed = 0;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

class KeyValueFile {
 public:
  struct Item {
    std::string value;
    std::size_t line = 0;
  };

  static KeyValueFile parse(std::string_view text, std::string source = "config") {
    KeyValueFile f;
    f.source_ = std::move(source);
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      const auto hash = raw.find('#');
      const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(f.source_ + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = detail::trim(std::string_view(line).substr(0, eq));
      const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) throw ConfigError(f.source_ + ":" + std::to_string(lineno) + ": empty key");
      if (f.items_.count(key)) {
        throw ConfigError(f.source_ + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      f.items_[key] = {value, lineno};
    }
    return f;
  }

  static KeyValueFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return items_.count(key) != 0; }

  void reject_unknown(const std::set<std::string>& known) const {
    for (const auto& [k, item] : items_) {
      if (!known.count(k)) throw ConfigError(where(item) + ": unknown key '" + k + "'");
    }
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = items_.find(key);
    return it == items_.end() ? fallback : it->second.value;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = items_.find(key);
    if (it == items_.end()) return fallback;
    return to_double(it->second.value, key, it->second);
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    auto it = items_.find(key);
    if (it == items_.end()) return fallback;
    std::uint64_t v = 0;
    const std::string& s = it->second.value;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError(where(it->second) + ": field '" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = items_.find(key);
    if (it == items_.end()) return fallback;
    const std::string& s = it->second.value;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(where(it->second) + ": field '" + key + "' expects true/false, got '" + s + "'");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    auto it = items_.find(key);
    if (it == items_.end()) return fallback;
    std::vector<double> out;
    std::string_view s = it->second.value;
    while (true) {
      const auto comma = s.find(',');
      out.push_back(to_double(detail::trim(s.substr(0, comma)), key, it->second));
      if (comma == std::string_view::npos) break;
      s.remove_prefix(comma + 1);
    }
    return out;
  }

  // Rethrows ConfigError from `f` with the key's line context.
  template <class F>
  auto with_context(const std::string& key, F&& f) const {
    try {
      return f();
    } catch (const ConfigError& e) {
      auto it = items_.find(key);
      if (it == items_.end()) throw;
      throw ConfigError(where(it->second) + ": field '" + key + "': " + e.what());
    }
  }

 private:
  std::string where(const Item& item) const { return source_ + ":" + std::to_string(item.line); }

  double to_double(const std::string& s, const std::string& key, const Item& item) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(where(item) + ": field '" + key + "' expects a number, got '" + s + "'");
  }

  std::string source_;
  std::map<std::string, Item> items_;
};

inline const std::set<std::string>& manifest_keys() {
  static const std::set<std::string> keys{
      "command", "data_dir", "out_dir", "init", "init_seed",
      // model
      "input_frames", "input_height", "input_width", "channels", "patch_size_t", "patch_size",
      "encoder_width", "encoder_depth", "encoder_heads", "decoder_width", "decoder_depth",
      "decoder_heads", "mlp_ratio", "mask_ratio", "mask_sampler", "norm_pix_target", "target_eps",
      "layer_norm_eps",
      // optimization
      "optimizer", "optimizer_momentum", "adamw_eps", "weight_decay", "learning_rate",
      "learning_rate_schedule", "warmup_epochs", "epochs", "repeated_sampling", "batch_size",
      "gradient_clipping", "seed", "checkpoint_interval", "deterministic", "workers",
      // data
      "num_frames", "sample_stride", "crop_scale", "hflip_prob", "augment",
      // fine-tuning
      "ft_mask_start", "ft_mask_end", "ft_mask_schedule", "num_classes", "eval_fraction"};
  return keys;
}

// Builds a manifest from a config file; absent keys keep `base` values.
inline RunManifest manifest_from(const KeyValueFile& f, RunManifest m = {}) {
  f.reject_unknown(manifest_keys());
  m.command = f.get_string("command", m.command);
  m.data_dir = f.get_string("data_dir", m.data_dir);
  m.out_dir = f.get_string("out_dir", m.out_dir);
  m.init = f.get_string("init", m.init);
  m.init_seed = f.get_uint("init_seed", m.init_seed);

  MaeConfig& c = m.model;
  c.frames = f.get_uint("input_frames", c.frames);
  c.height = f.get_uint("input_height", c.height);
  c.width = f.get_uint("input_width", c.width);
  c.patch.in_channels = f.get_uint("channels", c.patch.in_channels);
  c.patch.t_patch = f.get_uint("patch_size_t", c.patch.t_patch);
  c.patch.p = f.get_uint("patch_size", c.patch.p);
  c.d_enc = f.get_uint("encoder_width", c.d_enc);
  c.depth_enc = f.get_uint("encoder_depth", c.depth_enc);
  c.heads_enc = f.get_uint("encoder_heads", c.heads_enc);
  c.d_dec = f.get_uint("decoder_width", c.d_dec);
  c.depth_dec = f.get_uint("decoder_depth", c.depth_dec);
  c.heads_dec = f.get_uint("decoder_heads", c.heads_dec);
  c.mlp_ratio = f.get_uint("mlp_ratio", c.mlp_ratio);
  c.mask_ratio = f.get_double("mask_ratio", c.mask_ratio);
  c.sampler = f.with_context("mask_sampler", [&] {
    return f.has("mask_sampler") ? parse_sampler(f.get_string("mask_sampler", "")) : c.sampler;
  });
  c.target_normalize = f.get_bool("norm_pix_target", c.target_normalize);
  c.target_eps = f.get_double("target_eps", c.target_eps);
  c.norm_eps = f.get_double("layer_norm_eps", c.norm_eps);

  RunConfig& r = m.run;
  const std::string opt = f.get_string("optimizer", "adamw");
  if (opt != "adamw" && opt != "AdamW") {
    f.with_context("optimizer", [&]() -> int { throw ConfigError("only adamw is supported"); });
  }
  const auto betas = f.get_doubles("optimizer_momentum", {r.adamw.beta1, r.adamw.beta2});
  if (betas.size() != 2) {
    f.with_context("optimizer_momentum", [&]() -> int { throw ConfigError("expects 'beta1, beta2'"); });
  }
  r.adamw.beta1 = betas[0];
  r.adamw.beta2 = betas[1];
  r.adamw.eps = f.get_double("adamw_eps", r.adamw.eps);
  r.adamw.weight_decay = f.get_double("weight_decay", r.adamw.weight_decay);
  r.base_lr = f.get_double("learning_rate", r.base_lr);
  const std::string sched = f.get_string("learning_rate_schedule", "cosine");
  if (sched != "cosine") {
    f.with_context("learning_rate_schedule", [&]() -> int { throw ConfigError("only cosine decay is supported"); });
  }
  r.warmup_epochs = f.get_uint("warmup_epochs", r.warmup_epochs);
  r.epochs = f.get_uint("epochs", r.epochs);
  r.repeat_factor = f.get_uint("repeated_sampling", r.repeat_factor);
  r.batch_size = f.get_uint("batch_size", r.batch_size);
  r.grad_clip = f.get_double("gradient_clipping", r.grad_clip);
  r.seed = f.get_uint("seed", r.seed);
  r.eval_interval = f.get_uint("checkpoint_interval", r.eval_interval);
  r.deterministic = f.get_bool("deterministic", r.deterministic);
  r.workers = f.get_uint("workers", r.workers);

  SampleOptions& s = m.sampling;
  s.num_frames = f.get_uint("num_frames", f.has("input_frames") ? c.frames : s.num_frames);
  s.stride = f.get_uint("sample_stride", s.stride);
  const auto scale = f.get_doubles("crop_scale", {s.augment.scale_lo, s.augment.scale_hi});
  if (scale.size() != 2) f.with_context("crop_scale", [&]() -> int { throw ConfigError("expects 'lo, hi'"); });
  s.augment.scale_lo = scale[0];
  s.augment.scale_hi = scale[1];
  s.augment.hflip_prob = f.get_double("hflip_prob", s.augment.hflip_prob);
  s.random_augment = f.get_bool("augment", s.random_augment);
  s.augment.out_h = c.height;
  s.augment.out_w = c.width;

  FinetuneSettings& ft = m.finetune;
  ft.mask_start = f.get_double("ft_mask_start", ft.mask_start);
  ft.mask_end = f.get_double("ft_mask_end", ft.mask_end);
  const std::string shape = f.get_string("ft_mask_schedule", ft.mask_shape == ScheduleShape::cosine ? "cosine" : "constant");
  if (shape == "cosine") ft.mask_shape = ScheduleShape::cosine;
  else if (shape == "constant") ft.mask_shape = ScheduleShape::constant;
  else f.with_context("ft_mask_schedule", [&]() -> int { throw ConfigError("expects constant or cosine"); });
  ft.num_classes = f.get_uint("num_classes", ft.num_classes);
  ft.eval_fraction = f.get_double("eval_fraction", ft.eval_fraction);

  f.with_context("input_frames", [&] {
    c.validate();
    return 0;
  });
  f.with_context("epochs", [&] {
    r.validate();
    return 0;
  });
  return m;
}

// Serializes every setting; parsing the output reproduces the manifest.
inline std::string format_manifest(const RunManifest& m) {
  using detail::fmt_double;
  const MaeConfig& c = m.model;
  const RunConfig& r = m.run;
  const SampleOptions& s = m.sampling;
  std::ostringstream os;
  os << "# resolved run manifest\n";
  os << "command = " << m.command << '\n';
  os << "data_dir = " << m.data_dir << '\n';
  os << "out_dir = " << m.out_dir << '\n';
  os << "init = " << m.init << '\n';
  os << "init_seed = " << m.init_seed << "\n\n";
  os << "# model\n";
  os << "input_frames = " << c.frames << '\n';
  os << "input_height = " << c.height << '\n';
  os << "input_width = " << c.width << '\n';
  os << "channels = " << c.patch.in_channels << '\n';
  os << "patch_size_t = " << c.patch.t_patch << '\n';
  os << "patch_size = " << c.patch.p << '\n';
  os << "encoder_width = " << c.d_enc << '\n';
  os << "encoder_depth = " << c.depth_enc << '\n';
  os << "encoder_heads = " << c.heads_enc << '\n';
  os << "decoder_width = " << c.d_dec << '\n';
  os << "decoder_depth = " << c.depth_dec << '\n';
  os << "decoder_heads = " << c.heads_dec << '\n';
  os << "mlp_ratio = " << c.mlp_ratio << '\n';
  os << "mask_ratio = " << fmt_double(c.mask_ratio) << '\n';
  os << "mask_sampler = " << sampler_name(c.sampler) << '\n';
  os << "norm_pix_target = " << (c.target_normalize ? "true" : "false") << '\n';
  os << "target_eps = " << fmt_double(c.target_eps) << '\n';
  os << "layer_norm_eps = " << fmt_double(c.norm_eps) << "\n\n";
  os << "# optimization (no weight decay on biases, norms, positional tables, mask token)\n";
  os << "optimizer = adamw\n";
  os << "optimizer_momentum = " << fmt_double(r.adamw.beta1) << ", " << fmt_double(r.adamw.beta2) << '\n';
  os << "adamw_eps = " << fmt_double(r.adamw.eps) << '\n';
  os << "weight_decay = " << fmt_double(r.adamw.weight_decay) << '\n';
  os << "learning_rate = " << fmt_double(r.base_lr) << '\n';
  os << "learning_rate_schedule = cosine\n";
  os << "warmup_epochs = " << r.warmup_epochs << '\n';
  os << "epochs = " << r.epochs << '\n';
  os << "repeated_sampling = " << r.repeat_factor << '\n';
  os << "batch_size = " << r.batch_size << '\n';
  os << "gradient_clipping = " << fmt_double(r.grad_clip) << '\n';
  os << "seed = " << r.seed << '\n';
  os << "checkpoint_interval = " << r.eval_interval << '\n';
  os << "deterministic = " << (r.deterministic ? "true" : "false") << '\n';
  os << "workers = " << r.workers << "\n\n";
  os << "# data\n";
  os << "num_frames = " << s.num_frames << '\n';
  os << "sample_stride = " << s.stride << '\n';
  os << "crop_scale = " << fmt_double(s.augment.scale_lo) << ", " << fmt_double(s.augment.scale_hi) << '\n';
  os << "hflip_prob = " << fmt_double(s.augment.hflip_prob) << '\n';
  os << "augment = " << (s.random_augment ? "true" : "false") << "\n\n";
  os << "# fine-tuning\n";
  os << "ft_mask_start = " << fmt_double(m.finetune.mask_start) << '\n';
  os << "ft_mask_end = " << fmt_double(m.finetune.mask_end) << '\n';
  os << "ft_mask_schedule = " << (m.finetune.mask_shape == ScheduleShape::cosine ? "cosine" : "constant") << '\n';
  os << "num_classes = " << m.finetune.num_classes << '\n';
  os << "eval_fraction = " << fmt_double(m.finetune.eval_fraction) << '\n';
  return os.str();
}

}  // namespace stmae
