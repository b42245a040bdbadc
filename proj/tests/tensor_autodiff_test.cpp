// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "vlcdoc/autodiff.hpp"
#include "vlcdoc/gradcheck.hpp"

namespace vlcdoc {
namespace {

using testing::expect_near;
using testing::random_shape;
using testing::random_tensor;

constexpr double kStep = 1e-5;
constexpr double kGradTol = 1e-4;

TEST(Matmul, IdentityLeavesOperand) {
  Tape t;
  Var y = matmul(t.constant(Tensor::identity(2)), t.constant(Tensor::matrix({{1, 2}, {3, 4}})));
  expect_near(y.data(), {1, 2, 3, 4}, 0.0);
}

TEST(Matmul, ZeroOperandGivesZeros) {
  Tape t;
  Var y = matmul(t.constant(Tensor::identity(2)), t.constant(Tensor::zeros({2, 2})));
  expect_near(y.data(), {0, 0, 0, 0}, 0.0);
}

TEST(Matmul, HandEvaluatedProduct) {
  Tape t;
  Var y = matmul(t.constant(Tensor::matrix({{1, 2}, {3, 4}})), t.constant(Tensor::matrix({{5, 6}, {7, 8}})));
  EXPECT_EQ(y.shape(), (Shape{2, 2}));
  expect_near(y.data(), {19, 22, 43, 50}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor::zeros({2, 3})), t.constant(Tensor::zeros({2, 3})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BroadcastsBatchDimensions) {
  Rng rng(3);
  Tensor a = random_tensor({2, 1, 3, 4}, rng);
  Tensor b = random_tensor({5, 4, 2}, rng);
  Tape t;
  Var y = matmul(t.constant(a), t.constant(b));
  ASSERT_EQ(y.shape(), (Shape{2, 5, 3, 2}));
  // Scalar oracle for one broadcast slice.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 4; ++p) s += a[(1 * 3 + i) * 4 + p] * b[(3 * 4 + p) * 2 + j];
      EXPECT_NEAR(y.data()[((1 * 5 + 3) * 3 + i) * 2 + j], s, 1e-12);
    }
}

TEST(Matmul, AssociativityOnRandomTensors) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5), p = 1 + rng.below(5);
    Tape t;
    Var a = t.constant(random_tensor({m, k}, rng));
    Var b = t.constant(random_tensor({k, n}, rng));
    Var c = t.constant(random_tensor({n, p}, rng));
    Var left = matmul(matmul(a, b), c);
    Var right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left.data()[i], right.data()[i], 1e-9);
  }
}

TEST(Softmax, UniformOnEqualLogits) {
  Tape t;
  Var y = softmax_last(t.constant(Tensor::vector({0, 0, 0})));
  expect_near(y.data(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, LogTwoGivesTwoThirds) {
  Tape t;
  Var y = softmax_last(t.constant(Tensor::vector({std::log(2.0), 0.0})));
  expect_near(y.data(), {2.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tape t;
  Var y = softmax_last(t.constant(Tensor::vector({1000.0, 0.0})));
  EXPECT_TRUE(std::isfinite(y.data()[0]));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-15);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Shape s = random_shape(1 + rng.below(3), 6, rng);
    Tensor x = random_tensor(s, rng, -20, 20);
    const double shift = rng.uniform(-50, 50);
    Tensor shifted = x;
    for (double& v : shifted.data()) v += shift;
    Tape t;
    Var y = softmax_last(t.constant(x));
    Var ys = softmax_last(t.constant(shifted));
    const std::size_t n = s.back();
    for (std::size_t r = 0; r < y.size() / n; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(y.data()[r * n + j], 0.0);
        total += y.data()[r * n + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], ys.data()[i], 1e-12);
  }
}

TEST(Softmax, MaskedKeysGetZeroWeight) {
  Tape t;
  KeyMask mask{1, 3, {1, 0, 1}};
  Var y = softmax_last(t.constant(Tensor(Shape{1, 2, 3}, {0, 9, 0, 1, 1, 1})), &mask);
  expect_near(y.data(), {0.5, 0.0, 0.5, 0.5, 0.0, 0.5}, 1e-15);
}

TEST(Softmax, FullyMaskedRowIsContractError) {
  Tape t;
  KeyMask mask{1, 2, {0, 0}};
  EXPECT_THROW(softmax_last(t.constant(Tensor(Shape{1, 1, 2}, {0, 0})), &mask), ContractError);
}

TEST(Elementwise, MulByZerosIsZero) {
  Tape t;
  Var y = mul(t.constant(Tensor::vector({1, 2, 3})), t.constant(Tensor::vector({0, 0, 0})));
  expect_near(y.data(), {0, 0, 0}, 0.0);
}

TEST(Elementwise, AddZeroIsIdentity) {
  Tape t;
  Var x = t.constant(Tensor::vector({1.5, -2, 3}));
  expect_near(add(x, 0.0).data(), {1.5, -2, 3}, 0.0);
}

TEST(Elementwise, ExpOfLogRoundTrips) {
  Tape t;
  Var y = exp(log(t.constant(Tensor::vector({2, 5}))));
  expect_near(y.data(), {2, 5}, 1e-14);
}

TEST(Elementwise, LogOfNonPositiveIsNumericError) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::vector({1, 0}))), NumericError);
  EXPECT_THROW(log(t.constant(Tensor::vector({-3}))), NumericError);
}

TEST(Elementwise, ShapeMismatchIsShapeError) {
  Tape t;
  EXPECT_THROW(add(t.constant(Tensor::zeros({2})), t.constant(Tensor::zeros({3}))), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  Var x = t.leaf(Tensor::vector({3, -1, 4}));
  t.backward(sum(x));
  expect_near(x.grad(), {1, 1, 1}, 0.0);
}

TEST(Backward, SumOfSquares) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  t.backward(sum(mul(x, x)));
  expect_near(x.grad(), {2, 4}, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(mul(x, x)), ContractError);
}

TEST(Backward, ReusedTensorAccumulatesPerUseAdjoints) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.5, -2.0}));
  // d/dx [sum(3x) + sum(exp(x))] = 3 + exp(x)
  t.backward(add(sum(scale(x, 3.0)), sum(exp(x))));
  expect_near(x.grad(), {3 + std::exp(1.5), 3 + std::exp(-2.0)}, 1e-14);
}

TEST(Backward, RepeatedParamBindsShareOneAdjoint) {
  Parameter p(Tensor::vector({2.0}));
  Tape t;
  Var a = t.param(p);
  Var b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  t.backward(sum(mul(a, b)));
  EXPECT_DOUBLE_EQ(t.grad_of(p)[0], 4.0);
}

TEST(Tape, ReplayVisitsEachReachableNodeOnce) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  Var y = exp(x);
  Var z = mul(y, y);
  Var loss = sum(add(z, y));
  t.backward(loss);
  // x, y, z, add, sum
  EXPECT_EQ(t.last_backward_visits(), 5u);
}

TEST(Tape, ZeroGradsClearsEveryGradient) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  Var loss = sum(mul(x, x));
  t.backward(loss);
  t.zero_grads();
  for (std::size_t i = 0; i < t.size(); ++i)
    for (double g : t.node(i).grad) EXPECT_EQ(g, 0.0);
}

TEST(Tape, ConstantsDoNotRequireGrad) {
  Tape t;
  Var c = t.constant(Tensor::vector({1, 2}));
  Var y = exp(c);
  EXPECT_FALSE(y.requires_grad());
  t.backward(sum(y));
  EXPECT_TRUE(c.grad().empty());
}

TEST(Tape, InferenceTapeBindsParamsAsConstants) {
  Parameter p(Tensor::vector({1.0}));
  Tape t(false);
  EXPECT_FALSE(t.param(p).requires_grad());
}

TEST(FiniteDiff, SumHasZeroError) {
  Rng rng(1);
  auto r = finite_diff_check([](Tape&, const Var& x) { return sum(x); }, random_tensor({3, 4}, rng), kStep);
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(FiniteDiff, NonFiniteValueReportsCoordinate) {
  Tensor x = Tensor::vector({1.0, 2.0});
  auto f = [](Tape&, const Var& v) {
    const double bad = v.data()[1] > 2.0 ? INFINITY : 0.0;
    return add(sum(v), bad);
  };
  auto r = finite_diff_check(f, x, kStep);
  EXPECT_FALSE(r.finite);
  EXPECT_EQ(r.worst_index, 1u);
  EXPECT_FALSE(r.message.empty());
}

// Every exported differentiable op against central differences on random
// shapes up to 4x8x8.
struct OpCase {
  std::string name;
  std::function<Var(Tape&, const Var&, const Shape&)> f;
};

TEST(FiniteDiff, EveryOpMatchesCentralDifferences) {
  Rng rng(2024);
  const std::vector<OpCase> cases = {
      {"matmul_left", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(7);
         Shape bs{s.back(), 3};
         return sum(mul(matmul(x, t.constant(random_tensor(bs, r))), matmul(x, t.constant(random_tensor(bs, r)))));
       }},
      {"matmul_right", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(8);
         Shape as{2, s[s.size() - 2]};
         Var y = matmul(t.constant(random_tensor(as, r)), x);
         return sum(mul(y, y));
       }},
      {"transpose", [](Tape& t, const Var& x, const Shape&) {
         Var y = transpose_last2(x);
         Rng r(9);
         return sum(mul(y, t.constant(random_tensor(y.shape(), r))));
       }},
      {"add_sub_mul", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(10);
         Var c = t.constant(random_tensor(s, r));
         return sum(mul(sub(add(x, c), scale(x, 0.3)), x));
       }},
      {"exp_log", [](Tape&, const Var& x, const Shape&) { return sum(log(add(exp(x), 1.0))); }},
      {"gelu", [](Tape&, const Var& x, const Shape&) { return sum(mul(gelu(x), x)); }},
      {"softmax", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(11);
         return sum(mul(softmax_last(scale(x, 3.0)), t.constant(random_tensor(s, r))));
       }},
      {"log_softmax", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(12);
         return sum(mul(log_softmax_last(x), t.constant(random_tensor(s, r))));
       }},
      {"masked_logsumexp", [](Tape&, const Var& x, const Shape&) {
         std::vector<std::uint8_t> keep(x.size(), 1);
         for (std::size_t i = 0; i < keep.size(); i += 3) keep[i] = 0;
         for (std::size_t r = 0; r < keep.size(); r += x.shape().back()) keep[r + x.shape().back() - 1] = 1;
         Var l = masked_logsumexp_last(scale(x, 2.0), keep);
         return sum(mul(l, l));
       }},
      {"layer_norm", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(13);
         const std::size_t d = s.back();
         Var y = layer_norm(x, t.leaf(random_tensor({d}, r)), t.leaf(random_tensor({d}, r)), 1e-5);
         return sum(mul(y, t.constant(random_tensor(s, r))));
       }},
      {"l2_normalize", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(14);
         return sum(mul(l2_normalize_last(add(x, 2.0)), t.constant(random_tensor(s, r))));
       }},
      {"sum_last_mean", [](Tape&, const Var& x, const Shape&) {
         Var r = sum_last(x);
         return add(sum(mul(r, r)), mean(exp(x)));
       }},
      {"add_broadcast", [](Tape& t, const Var& x, const Shape& s) {
         Rng r(15);
         Var b = t.leaf(random_tensor({s.back()}, r));
         Var y = add_broadcast(x, b);
         return sum(mul(y, y));
       }},
      {"select_row", [](Tape&, const Var& x, const Shape&) {
         Var r = select_row(x, 0);
         return sum(mul(r, exp(r)));
       }},
      {"reshape", [](Tape&, const Var& x, const Shape&) {
         Var y = reshape(x, Shape{x.size()});
         return sum(mul(y, y));
       }},
  };
  for (const auto& c : cases) {
    for (int trial = 0; trial < 4; ++trial) {
      Shape s = random_shape(2 + rng.below(2), 8, rng);
      s[0] = 1 + rng.below(4);
      if (s.back() < 2) s.back() = 2;
      Tensor x = random_tensor(s, rng);
      auto r = finite_diff_check([&](Tape& t, const Var& v) { return c.f(t, v, s); }, x, kStep);
      EXPECT_TRUE(r.passed(kGradTol)) << c.name << " shape " << to_string(s) << " err " << r.max_rel_error;
    }
  }
}

TEST(FiniteDiff, HeadSplitMergeAndRowOps) {
  Rng rng(77);
  Tensor x = random_tensor({2, 3, 8}, rng);
  auto r = finite_diff_check(
      [](Tape& t, const Var& v) {
        Var h = split_heads(v, 4);
        Var scores = matmul(h, transpose_last2(h));
        Var m = merge_heads(matmul(softmax_last(scores), h));
        Rng rr(1);
        Var cls = t.leaf(random_tensor({8}, rr));
        Var p = prepend_row(cls, m);
        return sum(mul(p, p));
      },
      x, kStep);
  EXPECT_TRUE(r.passed(kGradTol)) << r.max_rel_error;

  Tensor table = random_tensor({6, 4}, rng);
  std::vector<std::uint32_t> ids = {0, 5, 5, 2};
  auto r2 = finite_diff_check(
      [&](Tape&, const Var& v) {
        Var y = gather_rows(v, ids, Shape{2, 2});
        return sum(mul(y, exp(y)));
      },
      table, kStep);
  EXPECT_TRUE(r2.passed(kGradTol)) << r2.max_rel_error;
}

TEST(GatherRows, OutOfVocabularyIsDataError) {
  Tape t;
  std::vector<std::uint32_t> ids = {7};
  EXPECT_THROW(gather_rows(t.constant(Tensor::zeros({3, 2})), ids, Shape{1}), DataError);
}

TEST(L2Normalize, ZeroRowIsDegenerate) {
  Tape t;
  EXPECT_THROW(l2_normalize_last(t.constant(Tensor::zeros({2, 3}))), DegenerateEmbeddingError);
}

}  // namespace
}  // namespace vlcdoc
