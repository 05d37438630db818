#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rmap/nn.hpp"
#include "rmap/optim.hpp"
#include "rmap/tensor.hpp"

using namespace rmap;

namespace {

constexpr double kTol = 1e-4;

GradCheckReport check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Shape> shapes,
                      std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  return grad_check(fn, shapes, kTol, rng);
}

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST(Tensor, RejectsNonFiniteAndBadShapes) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({1}, std::vector<double>{NAN}), NumericalError);
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({2, 2})), DimensionError);
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::randn({5, 7}, rng);
  Tensor b = Tensor::randn({7, 4}, rng);
  const auto ref = naive_matmul({a.values().begin(), a.values().end()}, {b.values().begin(), b.values().end()}, 5, 7, 4);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{5, 4}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Tensor, BatchedMatmulMatchesPerSliceLoop) {
  std::mt19937_64 rng(4);
  Tensor a = Tensor::randn({3, 4, 5}, rng);
  Tensor b = Tensor::randn({3, 5, 2}, rng);
  Tensor c = matmul(a, b);
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<double> as(a.values().begin() + s * 20, a.values().begin() + (s + 1) * 20);
    std::vector<double> bs(b.values().begin() + s * 10, b.values().begin() + (s + 1) * 10);
    const auto ref = naive_matmul(as, bs, 4, 5, 2);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(c[s * 8 + i], ref[i], 1e-12);
  }
  Tensor shared = Tensor::randn({5, 2}, rng);
  Tensor d = matmul(a, shared);
  std::vector<double> a0(a.values().begin(), a.values().begin() + 20);
  const auto ref0 = naive_matmul(a0, {shared.values().begin(), shared.values().end()}, 4, 5, 2);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(d[i], ref0[i], 1e-12);
}

TEST(Tensor, SoftmaxRowsAreConvex) {
  std::mt19937_64 rng(5);
  Tensor x = scale(Tensor::randn({6, 9}, rng), 30.0);
  Tensor y = softmax(x, 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(y[r * 9 + c], 0.0);
      total += y[r * 9 + c];
    }
    EXPECT_LE(std::abs(total - 1.0), 1e-12);
  }
  Tensor big = softmax(Tensor({1, 3}, std::vector<double>{1000.0, 1000.0, -1000.0}), 1);
  EXPECT_NEAR(big[0], 0.5, 1e-12);
  EXPECT_NEAR(big[2], 0.0, 1e-12);
}

TEST(Tensor, LayerNormNormalizesRows) {
  std::mt19937_64 rng(6);
  Tensor x = Tensor::randn({4, 16}, rng, 3.0);
  Tensor y = layer_norm(x, Tensor({16}, 1.0), Tensor({16}, 0.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0;
    double v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c] / 16.0;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m) / 16.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(TensorGrad, Elementwise) {
  EXPECT_TRUE(check([](const auto& x) { return add(x[0], x[1]); }, {{3, 4}, {3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return sub(x[0], x[1]); }, {{3, 4}, {4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return mul(x[0], x[1]); }, {{2, 3, 4}, {3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return scale(x[0], -2.5); }, {{5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return add_scalar(x[0], 0.7); }, {{5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return square(x[0]); }, {{3, 3}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return tanh(x[0]); }, {{3, 3}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return gelu(x[0]); }, {{4, 4}}).passed);
}

TEST(TensorGrad, Piecewise) {
  // Gaussian inputs land on a kink with probability zero.
  EXPECT_TRUE(check([](const auto& x) { return relu(x[0]); }, {{6}}, 8).passed);
  EXPECT_TRUE(check([](const auto& x) { return clamp(x[0], -0.5, 0.5); }, {{6}}, 8).passed);
}

TEST(TensorGrad, ClampPassesInteriorGradientOnly) {
  Tensor x = Tensor({3}, std::vector<double>{-2.0, 0.3, 2.0}).set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(tape, sum(clamp(x, -1.0, 1.0)));
  }
  EXPECT_EQ(x.grad(), (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(TensorGrad, Reductions) {
  EXPECT_TRUE(check([](const auto& x) { return sum(x[0]); }, {{3, 5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return mean(square(x[0])); }, {{3, 5}}).passed);
}

TEST(TensorGrad, ShapeOps) {
  EXPECT_TRUE(check([](const auto& x) { return reshape(x[0], {6, 2}); }, {{3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return transpose(x[0]); }, {{2, 3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return gather_rows(x[0], {2, 0, 2, 1}); }, {{3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return concat_rows(x[0], x[1]); }, {{2, 3}, {4, 3}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return concat_cols({x[0], x[1], x[2]}); }, {{2, 3}, {2, 1}, {2, 2}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return split_heads(x[0], 2); }, {{2, 3, 4}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return merge_heads(x[0], 2); }, {{4, 3, 2}}).passed);
}

TEST(TensorGrad, HeadSplitRoundTrip) {
  std::mt19937_64 rng(10);
  Tensor x = Tensor::randn({2, 5, 6}, rng);
  Tensor y = merge_heads(split_heads(x, 3), 3);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(TensorGrad, MatmulVariants) {
  EXPECT_TRUE(check([](const auto& x) { return matmul(x[0], x[1]); }, {{3, 4}, {4, 2}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return matmul(x[0], x[1]); }, {{2, 3, 4}, {2, 4, 5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return matmul(x[0], x[1]); }, {{2, 3, 4}, {4, 5}}).passed);
}

TEST(TensorGrad, SoftmaxAndLayerNorm) {
  EXPECT_TRUE(check([](const auto& x) { return softmax(x[0], 1); }, {{3, 5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return softmax(x[0], 0); }, {{3, 5}}).passed);
  EXPECT_TRUE(check([](const auto& x) { return layer_norm(x[0], x[1], x[2]); }, {{3, 6}, {6}, {6}}).passed);
}

TEST(TensorGrad, AttentionBlock) {
  std::mt19937_64 init(11);
  nn::TransformerBlock block = nn::TransformerBlock::init(8, 2, 2, init);
  auto report = check(
      [&](const auto& x) {
        nn::TransformerBlock b = block;
        b.attention.query.weight = x[1];
        b.expand.weight = x[2];
        return b(x[0]);
      },
      {{2, 4, 8}, {8, 8}, {8, 16}});
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(TensorGrad, GradientAccumulationMatchesWholeBatch) {
  std::mt19937_64 rng(12);
  Tensor w = Tensor::randn({4, 3}, rng).set_requires_grad(true);
  Tensor x = Tensor::randn({6, 4}, rng);
  auto loss = [&](const std::vector<std::size_t>& rows) { return sum(square(matmul(gather_rows(x, rows), w))); };
  Tape whole;
  {
    TapeScope scope(whole);
    backward(whole, loss({0, 1, 2, 3, 4, 5}));
  }
  const auto g_whole = w.grad();
  w.zero_grad();
  for (const auto& half : {std::vector<std::size_t>{0, 1, 2}, std::vector<std::size_t>{3, 4, 5}}) {
    Tape tape;
    TapeScope scope(tape);
    backward(tape, loss(half));
  }
  const auto g_split = w.grad();
  for (std::size_t i = 0; i < g_whole.size(); ++i) EXPECT_NEAR(g_whole[i], g_split[i], 1e-10);
}

TEST(TensorGrad, ReusedInputAccumulates) {
  Tensor x = Tensor({2}, std::vector<double>{1.5, -2.0}).set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(tape, sum(mul(x, x)));
  }
  EXPECT_EQ(x.grad(), (std::vector<double>{3.0, -4.0}));
}

TEST(TensorGrad, NoTapeRecordsNothing) {
  Tensor x = Tensor({2}, 1.0).set_requires_grad(true);
  Tensor y = square(x);
  EXPECT_FALSE(y.requires_grad());
}
