#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "stmae/model.hpp"
#include "stmae/ops.hpp"

using namespace stmae;
using stmae::testing::grad_check;
using stmae::testing::random_tensor;
using stmae::testing::weighted_sum;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

void expect_tensor_near(const Tensor<double>& a, const std::vector<double>& b, double tol = 1e-12) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(Tensor<float>(Shape{}), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Tensor, HandleSharesStorageCloneDoesNot) {
  Tensor<float> a({2}, 1.0f);
  Tensor<float> b = a;
  b[0] = 5.0f;
  EXPECT_EQ(a[0], 5.0f);
  Tensor<float> c = a.clone();
  c[0] = 7.0f;
  EXPECT_EQ(a[0], 5.0f);
  EXPECT_FALSE(c.same_storage(a));
}

TEST(Matmul, IdentityAndHandExample) {
  const auto x = mat(3, 2, {1, 2, 3, 4, 5, 6});
  auto eye = mat(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  expect_tensor_near(matmul(eye, x), {1, 2, 3, 4, 5, 6});
  expect_tensor_near(matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 1, {1, 1})), {3, 7});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  const auto r = grad_check({a, b}, [&] { return sum(matmul(a, b)); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(LayerNorm, Examples) {
  auto g = Tensor<double>({2}, 1.0), b = Tensor<double>({2}, 0.0);
  expect_tensor_near(layer_norm(mat(1, 2, {3, 3}), g, b), {0, 0});
  expect_tensor_near(layer_norm(mat(1, 2, {0, 2}), g, b, 0.0), {-1, 1});
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng, 0.5, 1.5), b = random_tensor({6}, rng);
  const auto w = random_tensor({3, 6}, rng);
  const auto r = grad_check({x, g, b}, [&] { return weighted_sum(layer_norm(x, g, b), w); });
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Softmax, Examples) {
  expect_tensor_near(softmax_rows(mat(1, 4, {2, 2, 2, 2})), {0.25, 0.25, 0.25, 0.25});
  expect_tensor_near(softmax_rows(mat(1, 2, {0, std::log(3.0)})), {0.25, 0.75});
  const auto a = softmax_rows(mat(1, 3, {0.1, -2, 3}));
  const auto b = softmax_rows(mat(1, 3, {100.1, 98, 103}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  const auto big = softmax_rows(mat(1, 2, {1000, 1000}));
  EXPECT_NEAR(big[0], 0.5, 1e-12);
}

TEST(Elementwise, SimpleExamples) {
  EXPECT_EQ(gelu(Tensor<double>({1}, 0.0))[0], 0.0);
  EXPECT_NEAR(gelu(Tensor<double>({1}, 1.0))[0], 0.8413447460685429, 1e-12);
  const auto x = mat(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<std::size_t> all{0, 1, 2};
  expect_tensor_near(gather_rows(x, all), {1, 2, 3, 4, 5, 6});
  expect_tensor_near(transpose(x), {1, 3, 5, 2, 4, 6});
  expect_tensor_near(mean_over_axis(x, 0), {3, 4});
  expect_tensor_near(mean_over_axis(x, 1), {1.5, 3.5, 5.5});
  expect_tensor_near(concat<double>({x, x}, 1), {1, 2, 1, 2, 3, 4, 3, 4, 5, 6, 5, 6});
  expect_tensor_near(add_bias(x, Tensor<double>({2}, std::vector<double>{10, 20})), {11, 22, 13, 24, 15, 26});
}

TEST(Elementwise, ScatterThenGatherIsIdentityOnSelectedRows) {
  Rng rng(3);
  const auto base = random_tensor({5, 3}, rng), rows = random_tensor({2, 3}, rng);
  const std::vector<std::size_t> idx{4, 1};
  const auto back = gather_rows(scatter_rows(base, idx, rows), idx);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(back[i], rows[i]);
}

TEST(Elementwise, IndexErrors) {
  const auto x = mat(2, 2, {1, 2, 3, 4});
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW((void)gather_rows(x, bad), std::out_of_range);
  const std::vector<std::size_t> dup{0, 0};
  EXPECT_THROW((void)scatter_rows(x, dup, mat(2, 2, {0, 0, 0, 0})), ContractError);
  const std::vector<std::size_t> oob{5};
  EXPECT_THROW((void)scatter_rows(x, oob, mat(1, 2, {0, 0})), std::out_of_range);
  const std::vector<int> labels{0, 3};
  EXPECT_THROW((void)cross_entropy(x.clone(), std::span<const int>(labels)), std::out_of_range);
}

TEST(Elementwise, ShapeErrorsAreDimensionErrors) {
  EXPECT_THROW((void)add(Tensor<double>({2, 2}), Tensor<double>({2, 3})), DimensionError);
  EXPECT_THROW((void)add_bias(Tensor<double>({2, 2}), Tensor<double>({3})), DimensionError);
  EXPECT_THROW((void)reshape(Tensor<double>({2, 2}), {3}), DimensionError);
  EXPECT_THROW((void)concat<double>({Tensor<double>({2, 2}), Tensor<double>({3, 3})}, 1), DimensionError);
}

// Each differentiable op against central finite differences at 64-bit.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{11};
};

TEST_F(OpGradient, AddSubMulScale) {
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const auto w = random_tensor({3, 4}, rng);
  EXPECT_LT(grad_check({a, b}, [&] { return weighted_sum(add(a, b), w); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({a, b}, [&] { return weighted_sum(sub(a, b), w); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({a, b}, [&] { return weighted_sum(mul(a, b), w); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({a}, [&] { return weighted_sum(scale(a, 0.37), w); }).max_rel_error, 1e-4);
}

TEST_F(OpGradient, BiasTransposeReshape) {
  auto x = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
  const auto w = random_tensor({3, 4}, rng), wt = random_tensor({4, 3}, rng), wr = random_tensor({2, 6}, rng);
  EXPECT_LT(grad_check({x, b}, [&] { return weighted_sum(add_bias(x, b), w); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(transpose(x), wt); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(reshape(x, {2, 6}), wr); }).max_rel_error, 1e-4);
}

TEST_F(OpGradient, RowSelection) {
  auto x = random_tensor({5, 3}, rng), rows = random_tensor({2, 3}, rng), tok = random_tensor({1, 3}, rng);
  const std::vector<std::size_t> idx{3, 0, 3};
  const std::vector<std::size_t> sidx{4, 1};
  const auto w3 = random_tensor({3, 3}, rng), w5 = random_tensor({5, 3}, rng), w4 = random_tensor({4, 3}, rng);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(gather_rows(x, idx), w3); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x, rows}, [&] { return weighted_sum(scatter_rows(x, sidx, rows), w5); }).max_rel_error,
            1e-4);
  EXPECT_LT(grad_check({tok}, [&] { return weighted_sum(repeat_rows(tok, 4), w4); }).max_rel_error, 1e-4);
}

TEST_F(OpGradient, SliceConcatReductions) {
  auto x = random_tensor({3, 6}, rng), y = random_tensor({2, 6}, rng);
  const auto ws = random_tensor({3, 2}, rng), wc = random_tensor({5, 6}, rng), wc1 = random_tensor({3, 12}, rng);
  const auto wm0 = random_tensor({1, 6}, rng), wm1 = random_tensor({3, 1}, rng);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(slice_cols(x, 2, 2), ws); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x, y}, [&] { return weighted_sum(concat<double>({x, y}, 0), wc); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(concat<double>({x, x}, 1), wc1); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(mean_over_axis(x, 0), wm0); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(mean_over_axis(x, 1), wm1); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return mean(mul(x, x)); }).max_rel_error, 1e-4);
}

TEST_F(OpGradient, Nonlinearities) {
  auto x = random_tensor({3, 5}, rng, -3.0, 3.0);
  const auto w = random_tensor({3, 5}, rng);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(gelu(x), w); }).max_rel_error, 1e-4);
  EXPECT_LT(grad_check({x}, [&] { return weighted_sum(softmax_rows(x), w); }).max_rel_error, 1e-4);
  const std::vector<int> labels{1, 4, 0};
  EXPECT_LT(grad_check({x}, [&] { return cross_entropy(x, std::span<const int>(labels)); }).max_rel_error, 1e-4);
}

TEST_F(OpGradient, TwoBlockTransformer) {
  std::vector<Block<double>> blocks;
  for (int i = 0; i < 2; ++i) blocks.push_back(Block<double>::init(8, 2, 2, 1e-6, rng));
  auto x = random_tensor({5, 8}, rng);
  const auto w = random_tensor({5, 8}, rng);
  std::vector<NamedParam<double>> params;
  blocks[0].collect("b0", params);
  blocks[1].collect("b1", params);
  std::vector<Tensor<double>> leaves{x};
  std::vector<std::string> names{"x"};
  for (auto& p : params) {
    leaves.push_back(p.tensor);
    names.push_back(p.name);
  }
  const auto r = grad_check(leaves, [&] { return weighted_sum(blocks[1](blocks[0](x)), w); }, 1e-5, names);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Backward, ClosedForms) {
  Tensor<double> x({3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = sum(x);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 1.0);
  x.drop_grad();
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = scale(sum(mul(x, x)), 0.5);
    tape.backward(loss);
    EXPECT_EQ(tape.size(), 0u);
    EXPECT_EQ(tape.replayed(), 3u);
  }
  expect_tensor_near(Tensor<double>({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 2, 3});
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, NoGradScopeRecordsNothing) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad();
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> off;
    (void)sum(mul(x, x));
  }
  EXPECT_EQ(tape.size(), 0u);
  (void)sum(x);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(5);
    Block<float> block = Block<float>::init(16, 4, 4, 1e-6f, rng);
    Tensor<float> x({7, 16});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    GradTape<float> tape;
    TapeScope<float> scope(tape);
    Tensor<float> loss = mean(mul(block(x), block(x)));
    tape.backward(loss);
    std::vector<NamedParam<float>> ps;
    block.collect("b", ps);
    std::vector<float> out{loss.item()};
    for (auto& p : ps) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}
