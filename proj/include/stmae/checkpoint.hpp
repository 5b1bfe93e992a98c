#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/model.hpp"
#include "stmae/tensor.hpp"
#include "stmae/video.hpp"

// Checkpoint layout (little-endian):
//   "MAECKPT1", u32 count,
//   count x { u32 name_len, name bytes, u32 rank, u32 extents[rank], f32 payload }
namespace stmae {

struct CheckpointEntry {
  std::string name;
  Tensor<float> tensor;
};

using Checkpoint = std::vector<CheckpointEntry>;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out;
  for (char ch : std::string_view("MAECKPT1")) out.push_back(static_cast<std::uint8_t>(ch));
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& e : ckpt) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t x : e.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(x));
    for (float v : e.tensor.data()) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes.data(), bytes.size(), what);
  if (r.bytes(8) != "MAECKPT1") throw FormatError(what + ": bad magic");
  const std::uint32_t count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0) throw FormatError(what + ": tensor '" + e.name + "' has rank 0");
    Shape shape(rank);
    for (auto& x : shape) x = r.u32();
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = r.f32();
    e.tensor = Tensor<float>(std::move(shape), std::move(data));
    ckpt.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes");
  return ckpt;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

// Architecture integers stored as an ordinary tensor record named
// "meta.config" so a checkpoint can rebuild its model.
inline constexpr const char* kConfigRecord = "meta.config";

inline Tensor<float> encode_config(const MaeConfig& c) {
  const std::vector<std::size_t> v{c.patch.t_patch, c.patch.p,   c.patch.in_channels, c.frames,
                                   c.height,        c.width,     c.d_enc,             c.depth_enc,
                                   c.heads_enc,     c.d_dec,     c.depth_dec,         c.heads_dec,
                                   c.mlp_ratio,     c.target_normalize ? 1u : 0u};
  std::vector<float> data(v.begin(), v.end());
  const std::size_t n = data.size();
  return Tensor<float>({n}, std::move(data));
}

inline MaeConfig decode_config(const Tensor<float>& t) {
  if (t.size() != 14) throw FormatError("meta.config record has " + std::to_string(t.size()) + " fields, expected 14");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  MaeConfig c;
  c.patch = {u(0), u(1), u(2)};
  c.frames = u(3);
  c.height = u(4);
  c.width = u(5);
  c.d_enc = u(6);
  c.depth_enc = u(7);
  c.heads_enc = u(8);
  c.d_dec = u(9);
  c.depth_dec = u(10);
  c.heads_dec = u(11);
  c.mlp_ratio = u(12);
  c.target_normalize = u(13) != 0;
  return c;
}

template <class T>
Checkpoint model_checkpoint(const MaeModel<T>& model, const std::vector<NamedParam<T>>& extra = {}) {
  Checkpoint ckpt;
  ckpt.push_back({kConfigRecord, encode_config(model.config())});
  for (const auto& p : model.parameters()) ckpt.push_back({p.name, p.tensor.template cast<float>()});
  for (const auto& p : extra) ckpt.push_back({p.name, p.tensor.template cast<float>()});
  return ckpt;
}

inline const Tensor<float>* find_entry(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& e : ckpt)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

// Copies checkpoint values into matching parameters, restricted to names
// accepted by `select` when given. Missing or mis-shaped records throw.
template <class T>
void load_parameters(const Checkpoint& ckpt, const std::vector<NamedParam<T>>& params,
                     bool (*select)(const std::string&) = nullptr) {
  for (const auto& p : params) {
    if (select && !select(p.name)) continue;
    const Tensor<float>* src = find_entry(ckpt, p.name);
    if (!src) throw FormatError("checkpoint has no record '" + p.name + "'");
    if (src->shape() != p.tensor.shape()) {
      throw FormatError("checkpoint record '" + p.name + "' has shape " + shape_str(src->shape()) +
                        ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor<T> dst = p.tensor;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>((*src)[i]);
  }
}

template <class T>
MaeModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const Tensor<float>* meta = find_entry(ckpt, kConfigRecord);
  if (!meta) throw FormatError("checkpoint lacks a meta.config record");
  MaeModel<T> model(decode_config(*meta), 0);
  load_parameters(ckpt, model.parameters());
  return model;
}

}  // namespace stmae
