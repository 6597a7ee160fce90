#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dbfusion/tensor.hpp"
#include "test_support.hpp"

namespace dbf {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_EQ(max_abs_diff(matmul(eye, b), b), 0.0);
}

TEST(Matmul, RowTimesColumn) {
  const Tensor c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  const auto oracle = testing::naive_matmul(a, b);
  EXPECT_LT(max_abs_diff(matmul(a, b).data(), oracle), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Concat, SingleInputIsIdentity) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({64, 64}, rng);
  EXPECT_EQ(max_abs_diff(concat({a}, 0), a), 0.0);
}

TEST(Concat, ThreeTokenBlocksStackTo1728) {
  const Tensor x = Tensor::zeros({576, 8});
  EXPECT_EQ(concat({x, x, x}, 0).shape(), (Shape{1728, 8}));
}

TEST(Concat, ChannelBlocksSliceBackExactly) {
  std::mt19937_64 rng(3);
  std::vector<Tensor> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(random_tensor({64, 64}, rng));
  const Tensor c = concat(parts, 1);
  ASSERT_EQ(c.shape(), (Shape{64, 256}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(max_abs_diff(slice(c, 1, 64 * i, 64 * (i + 1)), parts[i]), 0.0);
}

TEST(Concat, RoundTripPropertyOnRandomSplits) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t axis = trial % 2, other = ext(rng);
    std::vector<Tensor> parts;
    for (std::size_t i = 0, n = ext(rng); i < n; ++i) {
      const std::size_t e = ext(rng);
      parts.push_back(random_tensor(axis == 0 ? Shape{e, other} : Shape{other, e}, rng));
    }
    const Tensor c = concat(parts, axis);
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t e = p.dim(axis);
      EXPECT_EQ(max_abs_diff(slice(c, axis, off, off + e), p), 0.0);
      off += e;
    }
    EXPECT_EQ(off, c.dim(axis));
  }
}

TEST(Concat, Errors) {
  EXPECT_THROW(concat({}, 0), ArgumentError);
  EXPECT_THROW(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), DimensionError);
}

TEST(MeanPool, HandComputed) {
  const Tensor m = mean_pool(Tensor::matrix({{2, 4}, {6, 8}}), 0);
  ASSERT_EQ(m.shape(), (Shape{2}));
  EXPECT_EQ(m[0], 4.0);
  EXPECT_EQ(m[1], 6.0);
}

TEST(MeanPool, ConstantTensor) {
  const Tensor m = mean_pool(Tensor::filled({7, 3}, 2.5), 0);
  for (double v : m.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(MeanPool, MatchesSummationOracle) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({10, 5}, rng);
  const Tensor m = mean_pool(x, 0);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 10; ++i) s += x.at(i, j);
    EXPECT_LT(std::abs(m[j] - s / 10.0), 1e-12);
  }
  EXPECT_THROW(mean_pool(x, 2), DimensionError);
}

TEST(L2Normalize, ThreeFourFive) {
  const Tensor y = l2_normalize(Tensor::matrix({{3, 4}}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitRowsUnchanged) {
  const Tensor u = Tensor::matrix({{1, 0, 0}, {0, 0.6, 0.8}});
  EXPECT_LT(max_abs_diff(l2_normalize(u), u), 1e-12);
}

TEST(L2Normalize, RandomRowsHaveUnitNorm) {
  std::mt19937_64 rng(6);
  const Tensor y = l2_normalize(random_tensor({8, 16}, rng));
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += y.at(i, j) * y.at(i, j);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
  }
}

TEST(L2Normalize, ZeroRowNamesIndex) {
  try {
    l2_normalize(Tensor::matrix({{1, 1}, {0, 0}}));
    FAIL();
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(LayerNorm, ArithmeticSequence) {
  const Tensor y = layer_norm(Tensor::matrix({{1, 2, 3}}), Tensor::filled({3}, 1.0), Tensor::zeros({3}));
  EXPECT_NEAR(y[0], -1.2247, 1e-4);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], 1.2247, 1e-4);
  // Exact value with the variance floor.
  EXPECT_NEAR(y[2], 1.0 / std::sqrt(2.0 / 3.0 + kLayerNormEps), 1e-12);
}

TEST(LayerNorm, ConstantRowIsZero) {
  const Tensor y = layer_norm(Tensor::filled({2, 5}, 3.0), Tensor::filled({5}, 1.0), Tensor::zeros({5}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, RowMoments) {
  std::mt19937_64 rng(7);
  const std::size_t n = 6, d = 32;
  // Output variance is var/(var + eps), so the input spread keeps eps/var below 1e-6.
  const Tensor y = layer_norm(random_tensor({n, d}, rng, 10.0), Tensor::filled({d}, 1.0), Tensor::zeros({d}));
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += y.at(i, j);
    mu /= d;
    for (std::size_t j = 0; j < d; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= d;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  const Tensor l = softmax_cross_entropy_rows(Tensor::zeros({1, 4}), Tensor::matrix({{0, 0, 1, 0}}));
  EXPECT_NEAR(l.item(), std::log(4.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, SaturatesToZero) {
  double prev = INFINITY;
  for (double margin : {1.0, 10.0, 50.0, 500.0}) {
    const double l = softmax_cross_entropy_rows(Tensor::matrix({{0, margin, 0}}), Tensor::matrix({{0, 1, 0}})).item();
    EXPECT_LE(l, prev);
    EXPECT_GE(l, 0.0);
    prev = l;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(SoftmaxCrossEntropy, MatchesLogSumExpOracle) {
  std::mt19937_64 rng(8);
  const Tensor logits = random_tensor({6, 6}, rng, 3.0);
  std::vector<double> eye(36, 0.0);
  for (int i = 0; i < 6; ++i) eye[i * 7] = 1.0;
  double oracle = 0.0;
  for (std::size_t i = 0; i < 6; ++i) oracle += testing::lse_nll(logits.data().subspan(i * 6, 6), i);
  oracle /= 6.0;
  EXPECT_LT(std::abs(softmax_cross_entropy_rows(logits, Tensor({6, 6}, eye)).item() - oracle), 1e-10);
}

TEST(SoftmaxCrossEntropy, NonNegativeForOneHot) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> t(3 * 5, 0.0);
    for (int r = 0; r < 3; ++r) t[r * 5 + pick(rng)] = 1.0;
    EXPECT_GE(softmax_cross_entropy_rows(random_tensor({3, 5}, rng, 5.0), Tensor({3, 5}, t)).item(), 0.0);
  }
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(10);
  const Tensor p = softmax_rows(random_tensor({7, 9}, rng, 10.0));
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor w = Tensor::matrix({{1, -2}, {3, 4}});
  w.set_requires_grad(true);
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquareGivesWeights) {
  std::mt19937_64 rng(11);
  Tensor w = random_tensor({3, 4}, rng, 1.0, true);
  backward(scale(sum(mul(w, w)), 0.5));
  EXPECT_LT(max_abs_diff(w.grad(), w.data()), 1e-15);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor w = Tensor::zeros({2, 2}, true);
  EXPECT_THROW(backward(add(w, w)), ArgumentError);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor w = Tensor::matrix({{1, 2}});
  w.set_requires_grad(true);
  backward(sum(w));
  backward(sum(w));
  for (double g : w.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor w = Tensor::zeros({2}, true);
  Tensor y;
  {
    NoGradGuard ng;
    y = sum(w);
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, NonFiniteResultThrows) {
  EXPECT_THROW(scale(Tensor::matrix({{1e308}}), 1e10), NumericError);
}

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
}

TEST(Tensor, DeterministicOpSequence) {
  auto run = [] {
    std::mt19937_64 rng(12);
    const Tensor a = random_tensor({9, 9}, rng);
    return softmax_rows(layer_norm(matmul(a, transpose(a)), Tensor::filled({9}, 1.0), Tensor::zeros({9})));
  };
  EXPECT_EQ(max_abs_diff(run(), run()), 0.0);
}

TEST(AttentionMask, CausalWithPrefix) {
  const auto m = AttentionMask::causal_with_prefix(5, 2);
  EXPECT_TRUE(m.allowed(0, 1));   // prefix rows see each other
  EXPECT_FALSE(m.allowed(0, 2));  // prefix never sees text
  EXPECT_TRUE(m.allowed(4, 0));
  EXPECT_TRUE(m.allowed(3, 3));
  EXPECT_FALSE(m.allowed(3, 4));
}

TEST(AttentionMask, GridWindow) {
  const auto m = AttentionMask::grid_window(4, 4, 1);
  EXPECT_TRUE(m.allowed(0, 5));
  EXPECT_FALSE(m.allowed(0, 2));
  EXPECT_FALSE(m.allowed(0, 8));
  std::size_t covering0 = 0;
  for (std::size_t i = 0; i < 16; ++i) covering0 += m.allowed(i, 0);
  EXPECT_EQ(covering0, 4u);
}

}  // namespace
}  // namespace dbf
