#include <gtest/gtest.h>

#include <cmath>

#include "stmae/tokenizer.hpp"

using namespace stmae;

namespace {

VideoClip random_clip(std::uint64_t seed, std::size_t t, std::size_t h, std::size_t w, std::size_t c) {
  Rng rng(seed);
  VideoClip v = VideoClip::zeros(t, h, w, c);
  for (float& p : v.pixels) p = static_cast<float>(rng.uniform());
  return v;
}

template <class T>
std::vector<T> vec(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Patchify, ReferenceGeometry) {
  const PatchSpec spec{2, 16, 3};
  const TokenGrid g = grid_for(16, 224, 224, spec);
  EXPECT_EQ(g, (TokenGrid{8, 14, 14}));
  EXPECT_EQ(g.tokens(), 1568u);
  EXPECT_EQ(spec.patch_dim(), 1536u);
}

TEST(Patchify, TinyGeometryAndExactRoundTrip) {
  const PatchSpec spec{2, 8, 3};
  const VideoClip v = random_clip(1, 4, 32, 32, 3);
  const auto p = patchify<float>(v, spec);
  EXPECT_EQ(p.grid, (TokenGrid{2, 4, 4}));
  EXPECT_EQ(p.rows.shape(), (Shape{32, 384}));
  EXPECT_EQ(unpatchify(p.rows, p.grid, spec).pixels, v.pixels);
}

TEST(Patchify, RowLayoutIsTimeRowColChannel) {
  const PatchSpec spec{2, 2, 1};
  VideoClip v = VideoClip::zeros(2, 4, 4, 1);
  for (std::size_t i = 0; i < v.pixels.size(); ++i) v.pixels[i] = static_cast<float>(i) / 32.0f;
  const auto p = patchify<double>(v, spec);
  // Token 1 is (t=0, h=0, w=1): columns 2..3 of rows 0..1 in both frames.
  const std::vector<double> expect{v.at(0, 0, 2, 0), v.at(0, 0, 3, 0), v.at(0, 1, 2, 0), v.at(0, 1, 3, 0),
                                   v.at(1, 0, 2, 0), v.at(1, 0, 3, 0), v.at(1, 1, 2, 0), v.at(1, 1, 3, 0)};
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(p.rows.at(1, k), expect[k]);
}

TEST(Patchify, IndivisibleAxisNamed) {
  try {
    grid_for(5, 32, 32, PatchSpec{2, 8, 1});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("time"), std::string::npos);
  }
  try {
    grid_for(4, 30, 32, PatchSpec{2, 8, 1});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  try {
    grid_for(4, 32, 31, PatchSpec{2, 8, 1});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(Embed, ZeroProjectionGivesSeparablePositions) {
  const PatchSpec spec{2, 8, 1};
  const auto p = patchify<double>(random_clip(2, 4, 32, 32, 1), spec);
  Rng rng(3);
  const auto pos = PositionalEmbedding<double>::init(p.grid, 6, rng);
  const auto zero_w = Tensor<double>::zeros({spec.patch_dim(), 6});
  const auto e = embed(p, zero_w, pos);
  EXPECT_EQ(vec(e), vec(pos.materialize(p.grid)));
  // Tokens 0 and 1 share t=0, so they differ exactly by their space rows.
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_EQ(e.at(1, j) - e.at(0, j), (pos.space_table.at(1, j) + pos.time_table.at(0, j)) -
                                           (pos.space_table.at(0, j) + pos.time_table.at(0, j)));
  }
  EXPECT_EQ(pos.time_table.size() + pos.space_table.size(), (2u + 16u) * 6u);
}

TEST(Embed, ZeroEverythingIsZero) {
  const PatchSpec spec{2, 8, 1};
  Patches<double> p{Tensor<double>::zeros({32, spec.patch_dim()}), TokenGrid{2, 4, 4}};
  PositionalEmbedding<double> pos{Tensor<double>::zeros({2, 4}), Tensor<double>::zeros({16, 4})};
  const auto e = embed(p, Tensor<double>::zeros({spec.patch_dim(), 4}), pos);
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(embed(p, Tensor<double>::zeros({3, 4}), pos), DimensionError);
}

TEST(Embed, SubsetMatchesFullRows) {
  const PatchSpec spec{2, 8, 1};
  const auto p = patchify<double>(random_clip(4, 4, 32, 32, 1), spec);
  Rng rng(5);
  const auto pos = PositionalEmbedding<double>::init(p.grid, 4, rng);
  Tensor<double> w({spec.patch_dim(), 4});
  for (auto& v : w.data()) v = rng.uniform(-0.1, 0.1);
  const auto full = embed(p, w, pos);
  const std::vector<std::size_t> sub{3, 17, 30};
  const auto part = embed(p, w, pos, std::span<const std::size_t>(sub));
  for (std::size_t i = 0; i < sub.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(part.at(i, j), full.at(sub[i], j), 1e-15);
}

TEST(BuildTarget, Examples) {
  const PatchSpec spec{2, 1, 2};  // slice = 2 values, tubelet = 4
  Tensor<double> raw({3, 4}, {0.0, 2.0, 9.0, 9.0,     // slice {0,2}
                              0.5, 0.5, 0.1, 0.7,     // constant slice
                              0.2, 0.4, 0.0, 0.0});
  const auto norm = build_target(raw, spec, true, 0.0);
  EXPECT_DOUBLE_EQ(norm.at(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(norm.at(0, 1), 1.0);
  const auto guarded = build_target(raw, spec, true, 1e-6);
  EXPECT_EQ(guarded.at(1, 0), 0.0);
  EXPECT_EQ(guarded.at(1, 1), 0.0);
  const auto plain = build_target(raw, spec, false);
  EXPECT_EQ(vec(plain), (std::vector<double>{0.0, 2.0, 0.5, 0.5, 0.2, 0.4}));
}

TEST(BuildTarget, NormalizedRowsAreStandardized) {
  const PatchSpec spec{2, 8, 3};
  const auto p = patchify<double>(random_clip(6, 4, 32, 32, 3), spec);
  const auto t = build_target(p.rows, spec, true);
  const std::size_t q = spec.slice_dim();
  ASSERT_EQ(t.shape(), (Shape{32, q}));
  for (std::size_t i = 0; i < 32; ++i) {
    double mu = 0, sq = 0;
    for (std::size_t k = 0; k < q; ++k) mu += t.at(i, k);
    mu /= static_cast<double>(q);
    for (std::size_t k = 0; k < q; ++k) sq += (t.at(i, k) - mu) * (t.at(i, k) - mu);
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(q)), 1.0, 1e-4);
  }
}

TEST(Stitch, RatioZeroReturnsOriginal) {
  const PatchSpec spec{2, 8, 1};
  const VideoClip v = random_clip(7, 4, 32, 32, 1);
  const MaskPlan none = sample_agnostic(grid_for(v, spec), 0.0, 1);
  EXPECT_EQ(stitch_visualization(v, none, Tensor<double>::zeros({1, 1}), spec, false).pixels, v.pixels);
}

TEST(Stitch, OraclePredictionsRestoreTargetSlices) {
  const PatchSpec spec{2, 8, 1};
  const VideoClip v = random_clip(8, 4, 32, 32, 1);
  const auto p = patchify<double>(v, spec);
  const MaskPlan plan = sample_agnostic(p.grid, 0.75, 2);
  for (bool normalized : {false, true}) {
    const auto target = build_target(p.rows, spec, normalized);
    const auto pred = gather_rows(target, std::span<const std::size_t>(plan.masked));
    const VideoClip out = stitch_visualization(v, plan, pred, spec, normalized);
    // First frame of every tubelet is the target slice.
    for (std::size_t t = 0; t < v.t; t += spec.t_patch)
      for (std::size_t y = 0; y < v.h; ++y)
        for (std::size_t x = 0; x < v.w; ++x) EXPECT_NEAR(out.at(t, y, x, 0), v.at(t, y, x, 0), 1e-5);
  }
  EXPECT_THROW(stitch_visualization(v, plan, Tensor<double>::zeros({2, 64}), spec, false), ContractError);
}

TEST(Deflate, UnitTemporalPatchIsIdentity) {
  const PatchSpec spec{1, 4, 2};
  Rng rng(9);
  Tensor<double> w({spec.patch_dim(), 5});
  for (auto& v : w.data()) v = rng.uniform(-1, 1);
  EXPECT_EQ(vec(deflate_patch_embed(w, spec)), vec(w));
}

TEST(Deflate, StaticClipEmbedsLikeImage) {
  const PatchSpec spec3{2, 8, 1}, spec2{1, 8, 1};
  Rng rng(10);
  Tensor<double> w({spec3.patch_dim(), 6});
  for (auto& v : w.data()) v = rng.uniform(-1, 1);
  const VideoClip img = random_clip(11, 1, 16, 16, 1);
  VideoClip rep = VideoClip::zeros(2, 16, 16, 1);
  std::copy(img.pixels.begin(), img.pixels.end(), rep.pixels.begin());
  std::copy(img.pixels.begin(), img.pixels.end(), rep.pixels.begin() + static_cast<std::ptrdiff_t>(img.pixels.size()));
  const auto e3 = matmul(patchify<double>(rep, spec3).rows, w);
  const auto e2 = matmul(patchify<double>(img, spec2).rows, deflate_patch_embed(w, spec3));
  ASSERT_EQ(e3.shape(), e2.shape());
  for (std::size_t i = 0; i < e3.size(); ++i) EXPECT_NEAR(e3[i], e2[i], 1e-12);
  EXPECT_THROW(deflate_patch_embed(Tensor<double>::zeros({7, 6}), spec3), DimensionError);
}
