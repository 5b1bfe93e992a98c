#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/masking.hpp"
#include "stmae/ops.hpp"
#include "stmae/rng.hpp"
#include "stmae/tensor.hpp"
#include "stmae/tokenizer.hpp"
#include "stmae/video.hpp"

namespace stmae {

// Architecture, input geometry and masking knobs of one autoencoder.
struct MaeConfig {
  PatchSpec patch{2, 16, 3};
  std::size_t frames = 16;
  std::size_t height = 224;
  std::size_t width = 224;

  std::size_t d_enc = 1024;
  std::size_t depth_enc = 24;
  std::size_t heads_enc = 16;
  std::size_t d_dec = 512;
  std::size_t depth_dec = 4;
  std::size_t heads_dec = 16;
  std::size_t mlp_ratio = 4;

  double mask_ratio = 0.9;
  Sampler sampler = Sampler::agnostic;
  bool target_normalize = true;
  double target_eps = 1e-6;
  double norm_eps = 1e-6;

  TokenGrid grid() const { return grid_for(frames, height, width, patch); }

  void validate() const {
    (void)grid();
    if (d_enc == 0 || d_dec == 0 || heads_enc == 0 || heads_dec == 0 || mlp_ratio == 0) {
      throw ConfigError("widths, head counts and mlp_ratio must be positive");
    }
    if (d_enc % heads_enc != 0) throw ConfigError("encoder width must be divisible by encoder heads");
    if (d_dec % heads_dec != 0) throw ConfigError("decoder width must be divisible by decoder heads");
    if (d_dec > d_enc) throw ConfigError("decoder width must not exceed encoder width");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in [0, 1)");
  }
};

// Closed-form learnable parameter count of MaeModel for a configuration.
inline std::size_t block_parameter_count(std::size_t d, std::size_t mlp_ratio) {
  return (4 + 2 * mlp_ratio) * d * d + (9 + mlp_ratio) * d;
}

inline std::size_t parameter_count(const MaeConfig& c) {
  const TokenGrid g = c.grid();
  const std::size_t pos = g.t + g.spatial();
  const std::size_t d = c.d_enc, dd = c.d_dec;
  return c.patch.patch_dim() * d + pos * d + c.depth_enc * block_parameter_count(d, c.mlp_ratio) + 2 * d +
         (d * dd + dd) + dd + pos * dd + c.depth_dec * block_parameter_count(dd, c.mlp_ratio) + 2 * dd +
         (dd * c.patch.slice_dim() + c.patch.slice_dim());
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for biases, norms, positional tables, mask token
};

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double std = 0.02) {
    Linear l{Tensor<T>({in, out}), Tensor<T>({out})};
    for (auto& v : l.weight.data()) v = static_cast<T>(rng.truncated_normal(std));
    l.weight.set_requires_grad();
    l.bias.set_requires_grad();
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, false});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  static LayerNorm init(std::size_t d, double eps) {
    LayerNorm n{Tensor<T>::ones({d}), Tensor<T>::zeros({d}), static_cast<T>(eps)};
    n.gamma.set_requires_grad();
    n.beta.set_requires_grad();
    return n;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + ".weight", gamma, false});
    out.push_back({prefix + ".bias", beta, false});
  }
};

// Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x)).
template <class T>
struct Block {
  LayerNorm<T> norm1;
  Linear<T> qkv;
  Linear<T> proj;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;
  std::size_t heads = 1;

  static Block init(std::size_t d, std::size_t heads, std::size_t mlp_ratio, double eps, Rng& rng) {
    Block b;
    b.norm1 = LayerNorm<T>::init(d, eps);
    b.qkv = Linear<T>::init(d, 3 * d, rng);
    b.proj = Linear<T>::init(d, d, rng);
    b.norm2 = LayerNorm<T>::init(d, eps);
    b.fc1 = Linear<T>::init(d, mlp_ratio * d, rng);
    b.fc2 = Linear<T>::init(mlp_ratio * d, d, rng);
    b.heads = heads;
    return b;
  }

  Tensor<T> attention(const Tensor<T>& x) const {
    const std::size_t d = x.dim(1), hd = d / heads;
    const Tensor<T> qkv_rows = qkv(x);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor<T> q = slice_cols(qkv_rows, h * hd, hd);
      const Tensor<T> k = slice_cols(qkv_rows, d + h * hd, hd);
      const Tensor<T> v = slice_cols(qkv_rows, 2 * d + h * hd, hd);
      const Tensor<T> weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
      outs.push_back(matmul(weights, v));
    }
    return proj(heads == 1 ? outs[0] : concat(outs, 1));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> h = add(x, attention(norm1(x)));
    return add(h, fc2(gelu(fc1(norm2(h)))));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    norm1.collect(prefix + ".norm1", out);
    qkv.collect(prefix + ".attn.qkv", out);
    proj.collect(prefix + ".attn.proj", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".mlp.fc1", out);
    fc2.collect(prefix + ".mlp.fc2", out);
  }
};

// Asymmetric masked autoencoder. The encoder sees visible tokens only; the
// decoder sees every grid position, with a shared mask token standing in for
// masked ones.
template <class T>
class MaeModel {
 public:
  MaeModel() = default;

  MaeModel(const MaeConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const TokenGrid g = config_.grid();
    Rng rng(seed);
    const std::size_t d = config_.d_enc, dd = config_.d_dec;
    patch_embed_ = Tensor<T>({config_.patch.patch_dim(), d});
    for (auto& v : patch_embed_.data()) v = static_cast<T>(rng.truncated_normal(0.02));
    patch_embed_.set_requires_grad();
    enc_pos_ = PositionalEmbedding<T>::init(g, d, rng);
    for (std::size_t i = 0; i < config_.depth_enc; ++i)
      enc_blocks_.push_back(Block<T>::init(d, config_.heads_enc, config_.mlp_ratio, config_.norm_eps, rng));
    enc_norm_ = LayerNorm<T>::init(d, config_.norm_eps);
    enc_to_dec_ = Linear<T>::init(d, dd, rng);
    mask_token_ = Tensor<T>({1, dd});
    for (auto& v : mask_token_.data()) v = static_cast<T>(rng.truncated_normal(0.02));
    mask_token_.set_requires_grad();
    dec_pos_ = PositionalEmbedding<T>::init(g, dd, rng);
    for (std::size_t i = 0; i < config_.depth_dec; ++i)
      dec_blocks_.push_back(Block<T>::init(dd, config_.heads_dec, config_.mlp_ratio, config_.norm_eps, rng));
    dec_norm_ = LayerNorm<T>::init(dd, config_.norm_eps);
    head_ = Linear<T>::init(dd, config_.patch.slice_dim(), rng);
  }

  const MaeConfig& config() const { return config_; }
  TokenGrid grid() const { return config_.grid(); }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"patch_embed.weight", patch_embed_, true});
    out.push_back({"encoder.pos_time", enc_pos_.time_table, false});
    out.push_back({"encoder.pos_space", enc_pos_.space_table, false});
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
      enc_blocks_[i].collect("encoder.blocks." + std::to_string(i), out);
    enc_norm_.collect("encoder.norm", out);
    enc_to_dec_.collect("decoder.embed", out);
    out.push_back({"decoder.mask_token", mask_token_, false});
    out.push_back({"decoder.pos_time", dec_pos_.time_table, false});
    out.push_back({"decoder.pos_space", dec_pos_.space_table, false});
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
      dec_blocks_[i].collect("decoder.blocks." + std::to_string(i), out);
    dec_norm_.collect("decoder.norm", out);
    head_.collect("decoder.pred", out);
    return out;
  }

  // Parameters that belong to the encoder path (used for transfer).
  static bool is_encoder_param(const std::string& name) {
    return name.rfind("patch_embed.", 0) == 0 || name.rfind("encoder.", 0) == 0;
  }

  std::size_t allocated_parameters() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  const Tensor<T>& patch_embed() const { return patch_embed_; }
  const PositionalEmbedding<T>& encoder_positions() const { return enc_pos_; }
  const PositionalEmbedding<T>& decoder_positions() const { return dec_pos_; }
  const Tensor<T>& mask_token() const { return mask_token_; }

  void check_geometry(const Patches<T>& patches, const MaskPlan& plan) const {
    const TokenGrid g = grid();
    if (!(patches.grid == g) || !(plan.grid == g)) {
      throw ContractError("geometry mismatch: model grid " + g.str() + ", clip grid " + patches.grid.str() +
                          ", plan grid " + plan.grid.str());
    }
  }

  // Embedded tokens (patch projection + encoder positions) before any block.
  Tensor<T> embed_tokens(const Patches<T>& patches, std::span<const std::size_t> tokens) const {
    if (tokens.empty()) throw ContractError("encode: no visible tokens; ratio too high for this grid");
    return embed(patches, patch_embed_, enc_pos_, tokens);
  }

  // Encoder over an arbitrary token subset; only these tokens enter attention.
  Tensor<T> encode_tokens(const Patches<T>& patches, std::span<const std::size_t> tokens) const {
    Tensor<T> x = embed_tokens(patches, tokens);
    for (const auto& b : enc_blocks_) x = b(x);
    return enc_norm_(x);
  }

  // [|visible|, d_enc]
  Tensor<T> encode(const Patches<T>& patches, const MaskPlan& plan) const {
    check_geometry(patches, plan);
    return encode_tokens(patches, plan.visible);
  }

  // Decoder input [N, d_dec]: projected encodings at visible positions, the
  // mask token elsewhere, plus decoder positional embeddings.
  Tensor<T> decoder_input(const Tensor<T>& encoded, const MaskPlan& plan) const {
    if (encoded.rank() != 2 || encoded.dim(0) != plan.visible.size()) {
      throw ContractError("decode: " + shape_str(encoded.shape()) + " encoded rows for " +
                          std::to_string(plan.visible.size()) + " visible tokens");
    }
    const TokenGrid g = grid();
    if (!(plan.grid == g)) throw ContractError("decode: plan grid " + plan.grid.str() + " != model grid " + g.str());
    const Tensor<T> projected = enc_to_dec_(encoded);
    const Tensor<T> tokens = scatter_rows(repeat_rows(mask_token_, g.tokens()), std::span<const std::size_t>(plan.visible), projected);
    const auto all = all_tokens(g);
    return add(tokens, dec_pos_.rows(g, all));
  }

  // Decoder input built from a dense (all-token) encoding: every position is
  // projected and masked positions are then overwritten by the mask token.
  // This is the "encoder sees everything" baseline used for cost comparisons.
  Tensor<T> decoder_input_dense(const Tensor<T>& encoded_all, const MaskPlan& plan) const {
    const TokenGrid g = grid();
    if (encoded_all.rank() != 2 || encoded_all.dim(0) != g.tokens()) {
      throw ContractError("decode: dense encoding must have " + std::to_string(g.tokens()) + " rows");
    }
    Tensor<T> tokens = enc_to_dec_(encoded_all);
    if (!plan.masked.empty()) {
      tokens = scatter_rows(tokens, std::span<const std::size_t>(plan.masked),
                            repeat_rows(mask_token_, plan.masked.size()));
    }
    const auto all = all_tokens(g);
    return add(tokens, dec_pos_.rows(g, all));
  }

  // Decoder blocks, norm and prediction head over a full [N, d_dec] input.
  Tensor<T> run_decoder(Tensor<T> x) const {
    for (const auto& b : dec_blocks_) x = b(x);
    return head_(dec_norm_(x));
  }

  // Head output for all N positions, [N, p*p*C].
  Tensor<T> decode_all(const Tensor<T>& encoded, const MaskPlan& plan) const {
    return run_decoder(decoder_input(encoded, plan));
  }

  // Predictions for masked positions only, [|masked|, p*p*C], in plan.masked order.
  Tensor<T> decode(const Tensor<T>& encoded, const MaskPlan& plan) const {
    if (plan.masked.empty()) throw ContractError("no masked tokens; ratio too low");
    return gather_rows(decode_all(encoded, plan), std::span<const std::size_t>(plan.masked));
  }

  struct PretrainOutput {
    Tensor<T> loss;
    Tensor<T> predictions;
    Tensor<T> targets;  // all N rows
  };

  PretrainOutput forward_pretrain(const Patches<T>& patches, const MaskPlan& plan) const {
    check_geometry(patches, plan);
    if (plan.masked.empty()) throw ContractError("no masked tokens; ratio too low");
    const Tensor<T> encoded = encode(patches, plan);
    Tensor<T> pred = decode(encoded, plan);
    Tensor<T> target = build_target(patches.rows, config_.patch, config_.target_normalize, config_.target_eps);
    Tensor<T> l = masked_mse(pred, target, plan);
    return {std::move(l), std::move(pred), std::move(target)};
  }

  PretrainOutput forward_pretrain(const VideoClip& clip, const MaskPlan& plan) const {
    return forward_pretrain(patchify<T>(clip, config_.patch), plan);
  }

  // Mean squared error over masked rows only; targets holds all N rows.
  static Tensor<T> masked_mse(const Tensor<T>& predictions, const Tensor<T>& targets, const MaskPlan& plan) {
    if (plan.masked.empty()) throw ContractError("no masked tokens; ratio too low");
    const Tensor<T> selected = gather_rows(targets, std::span<const std::size_t>(plan.masked));
    if (selected.shape() != predictions.shape()) {
      throw ContractError("loss: predictions " + shape_str(predictions.shape()) + " vs masked targets " +
                          shape_str(selected.shape()));
    }
    const Tensor<T> diff = sub(predictions, selected);
    return mean(mul(diff, diff));
  }

 private:
  MaeConfig config_;
  Tensor<T> patch_embed_;
  PositionalEmbedding<T> enc_pos_;
  std::vector<Block<T>> enc_blocks_;
  LayerNorm<T> enc_norm_;
  Linear<T> enc_to_dec_;
  Tensor<T> mask_token_;
  PositionalEmbedding<T> dec_pos_;
  std::vector<Block<T>> dec_blocks_;
  LayerNorm<T> dec_norm_;
  Linear<T> head_;
};

// Linear classifier over mean-pooled encoder tokens.
template <class T>
struct ClassifierHead {
  Linear<T> linear;

  static ClassifierHead init(std::size_t d, std::size_t classes, Rng& rng) {
    return {Linear<T>::init(d, classes, rng)};
  }
  std::size_t classes() const { return linear.weight.dim(1); }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    linear.collect("head", out);
    return out;
  }
};

// Logits [1, K]. With a plan, only its visible tokens are encoded (masked
// fine-tuning); without one, all tokens are.
template <class T>
Tensor<T> classify(const MaeModel<T>& model, const ClassifierHead<T>& head, const Patches<T>& patches,
                   const MaskPlan* plan = nullptr) {
  if (head.linear.weight.dim(0) != model.config().d_enc) {
    throw DimensionError("classify: head expects width " + std::to_string(head.linear.weight.dim(0)) +
                         ", encoder width is " + std::to_string(model.config().d_enc));
  }
  Tensor<T> enc;
  if (plan) {
    enc = model.encode(patches, *plan);
  } else {
    const auto all = all_tokens(patches.grid);
    if (!(patches.grid == model.grid())) throw ContractError("classify: clip grid does not match model");
    enc = model.encode_tokens(patches, all);
  }
  return head.linear(mean_over_axis(enc, 0));
}

}  // namespace stmae
