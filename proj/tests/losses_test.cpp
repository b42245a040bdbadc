// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "reference.hpp"
#include "test_support.hpp"
#include "vlcdoc/gradcheck.hpp"
#include "vlcdoc/losses.hpp"

namespace vlcdoc {
namespace {

// Random unit rows in `d` dimensions.
Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      t.at(i, j) = rng.normal();
      norm += t.at(i, j) * t.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) /= std::sqrt(norm);
  }
  return t;
}

std::vector<Label> random_labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<Label> y(n);
  for (auto& v : y) v = static_cast<Label>(rng.below(k));
  return y;
}

Tensor identical_rows(std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) t.at(i, 0) = 1.0;
  return t;
}

TEST(CrossCL, IdenticalEmbeddingsOneClassGiveFourLnThree) {
  const std::vector<Label> y{2, 2, 2, 2};
  Tape t;
  Var x = t.constant(identical_rows(4, 3));
  LossReport r = cross_cl(x, x, y, LossConfig{});
  EXPECT_NEAR(r.vision_to_vision.item(), 4.0 * std::log(3.0), 1e-9);
  EXPECT_NEAR(r.language_to_language.item(), 4.0 * std::log(3.0), 1e-9);
  EXPECT_NEAR(r.language_to_vision.item(), 4.0 * std::log(3.0), 1e-9);
  EXPECT_NEAR(r.total.item(), 3.0 * 4.0 * std::log(3.0), 1e-9);
}

TEST(CrossCL, IdenticalEmbeddingsOneClassGiveNLnNMinusOne) {
  for (std::size_t n = 2; n <= 12; ++n) {
    const std::vector<Label> y(n, 0);
    Tape t;
    Var x = t.constant(identical_rows(n, 4));
    EXPECT_NEAR(intra_term(x, y, 0.1).item(), static_cast<double>(n) * std::log(static_cast<double>(n - 1)), 1e-9)
        << "n=" << n;
  }
}

TEST(CrossCL, AllDistinctClassesGiveZeroEverywhere) {
  Rng rng(1);
  const std::vector<Label> y{0, 1, 2, 3, 4};
  Tape t;
  Var x = t.constant(unit_rows(5, 3, rng)), u = t.constant(unit_rows(5, 3, rng));
  const LossValues v = cross_cl(x, u, y, LossConfig{}).values();
  EXPECT_EQ(v.total, 0.0);
  EXPECT_EQ(v.vision_to_vision, 0.0);
  EXPECT_EQ(v.language_to_vision, 0.0);
  EXPECT_EQ(v.language_to_language, 0.0);
  EXPECT_EQ(v.vision_to_language, 0.0);
}

Tensor planar(std::initializer_list<double> degrees) {
  Tensor t({degrees.size(), 2});
  std::size_t i = 0;
  for (double a : degrees) {
    t.at(i, 0) = std::cos(a * M_PI / 180.0);
    t.at(i, 1) = std::sin(a * M_PI / 180.0);
    ++i;
  }
  return t;
}

TEST(CrossCL, PlanarFixtureMatchesOracleUnderDefaults) {
  const Tensor x = planar({0, 10, 90, 100}), u = planar({5, 20, 80, 110});
  const std::vector<Label> y{0, 0, 1, 1};
  const LossConfig defaults;
  ASSERT_EQ(defaults.tau, 0.1);
  ASSERT_EQ(defaults.lambda, 0.5);
  Tape t;
  Var xv = t.constant(x), uv = t.constant(u);
  const auto want = ref::cross_cl(ref::rows_of(x), ref::rows_of(u), y, 0.1, 0.5);
  const LossValues got = cross_cl(xv, uv, y, defaults).values();
  EXPECT_NEAR(got.vision_to_vision, want.vv, 1e-12);
  EXPECT_NEAR(got.language_to_vision, want.lv, 1e-12);
  EXPECT_NEAR(got.language_to_language, want.ll, 1e-12);
  EXPECT_NEAR(got.vision_to_language, want.vl, 1e-12);
  EXPECT_NEAR(got.total, want.total, 1e-12);
  EXPECT_NEAR(scl(xv, y, 0.1).item(), want.vv, 1e-12);

  // By hand: each anchor's only positive sits 10 degrees away. Anchors at 0
  // and 100 degrees see negatives at 90 and 100 degrees of separation; anchors
  // at 10 and 90 degrees see 80 and 90.
  auto term = [](double deg_a, double deg_b) {
    auto e = [](double deg) { return std::exp(std::cos(deg * M_PI / 180.0) / 0.1); };
    return -std::log(e(10) / (e(10) + e(deg_a) + e(deg_b)));
  };
  EXPECT_NEAR(got.vision_to_vision, 2.0 * (term(90, 100) + term(80, 90)), 1e-12);
}

TEST(CrossCL, TwoDistinctClassesGiveZero) {
  const std::vector<Label> y{0, 1};
  Tape t;
  EXPECT_EQ(cross_cl(t.constant(planar({0, 30})), t.constant(planar({60, 90})), y, LossConfig{}).total.item(), 0.0);
}

TEST(CrossCL, MatchesScalarDoubleLoopOnRandomBatches) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(7), k = 1 + rng.below(4), d = 2 + rng.below(5);
    const double tau = rng.uniform(0.05, 1.0), lambda = rng.uniform(0.0, 2.0);
    const Tensor x = unit_rows(n, d, rng), u = unit_rows(n, d, rng);
    const auto y = random_labels(n, k, rng);
    Tape t;
    const LossValues got = cross_cl(t.constant(x), t.constant(u), y, LossConfig{tau, lambda, false}).values();
    const auto want = ref::cross_cl(ref::rows_of(x), ref::rows_of(u), y, tau, lambda);
    EXPECT_NEAR(got.vision_to_vision, want.vv, 1e-10);
    EXPECT_NEAR(got.language_to_vision, want.lv, 1e-10);
    EXPECT_NEAR(got.language_to_language, want.ll, 1e-10);
    EXPECT_NEAR(got.vision_to_language, want.vl, 1e-10);
    EXPECT_NEAR(got.total, want.total, 1e-10);
  }
}

TEST(CrossCL, OwnPairVariantMatchesScalarDoubleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const Tensor x = unit_rows(n, 3, rng), u = unit_rows(n, 3, rng);
    const auto y = random_labels(n, 3, rng);
    Tape t;
    const LossValues got = cross_cl(t.constant(x), t.constant(u), y, LossConfig{0.1, 0.5, true}).values();
    const auto want = ref::cross_cl(ref::rows_of(x), ref::rows_of(u), y, 0.1, 0.5, true);
    EXPECT_NEAR(got.language_to_vision, want.lv, 1e-10);
    EXPECT_NEAR(got.vision_to_language, want.vl, 1e-10);
    EXPECT_NEAR(got.total, want.total, 1e-10);
  }
}

TEST(CrossCL, ModalitySwapIsExactlySymmetric) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const Tensor x = unit_rows(n, 4, rng), u = unit_rows(n, 4, rng);
    const auto y = random_labels(n, 3, rng);
    Tape t;
    const LossValues a = cross_cl(t.constant(x), t.constant(u), y, LossConfig{}).values();
    const LossValues b = cross_cl(t.constant(u), t.constant(x), y, LossConfig{}).values();
    EXPECT_EQ(a.total, b.total);
    EXPECT_EQ(a.vision_to_vision, b.language_to_language);
    EXPECT_EQ(a.language_to_vision, b.vision_to_language);
  }
}

TEST(CrossCL, BatchPermutationInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(7), d = 3;
    const Tensor x = unit_rows(n, d, rng), u = unit_rows(n, d, rng);
    const auto y = random_labels(n, 3, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Tensor xp({n, d}), up({n, d});
    std::vector<Label> yp(n);
    for (std::size_t i = 0; i < n; ++i) {
      yp[i] = y[perm[i]];
      for (std::size_t j = 0; j < d; ++j) {
        xp.at(i, j) = x.at(perm[i], j);
        up.at(i, j) = u.at(perm[i], j);
      }
    }
    Tape t;
    const double a = cross_cl(t.constant(x), t.constant(u), y, LossConfig{}).total.item();
    const double b = cross_cl(t.constant(xp), t.constant(up), yp, LossConfig{}).total.item();
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(CrossCL, InvariantToScaleBeforeNormalisation) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const Tensor z = testing::random_tensor({n, 4}, rng), w = testing::random_tensor({n, 4}, rng);
    const double c = std::exp(rng.uniform(-5, 5));
    Tensor zc = z, wc = w;
    for (double& v : zc.data()) v *= c;
    for (double& v : wc.data()) v *= c;
    const auto y = random_labels(n, 3, rng);
    Tape t;
    const double a =
        cross_cl(l2_normalize_last(t.constant(z)), l2_normalize_last(t.constant(w)), y, LossConfig{}).total.item();
    const double b =
        cross_cl(l2_normalize_last(t.constant(zc)), l2_normalize_last(t.constant(wc)), y, LossConfig{}).total.item();
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(CrossCL, ZeroLambdaReducesToPerModalitySCL) {
  Rng rng(7);
  const Tensor x = unit_rows(6, 3, rng), u = unit_rows(6, 3, rng);
  const auto y = random_labels(6, 2, rng);
  Tape t;
  Var xv = t.constant(x), uv = t.constant(u);
  const double total = cross_cl(xv, uv, y, LossConfig{0.1, 0.0, false}).total.item();
  EXPECT_NEAR(total, scl(xv, y, 0.1).item() + scl(uv, y, 0.1).item(), 1e-12);
}

TEST(CrossCL, CombineTermsAgreesWithReport) {
  Rng rng(8);
  const Tensor x = unit_rows(6, 3, rng), u = unit_rows(6, 3, rng);
  const auto y = random_labels(6, 2, rng);
  Tape t;
  const LossValues v = cross_cl(t.constant(x), t.constant(u), y, LossConfig{0.2, 0.7, false}).values();
  EXPECT_EQ(v.total, combine_terms(v.vision_to_vision, v.language_to_vision, v.language_to_language,
                                   v.vision_to_language, 0.7));
}

TEST(CrossCL, ContractAndConfigErrors) {
  Rng rng(9);
  Tape t;
  Var one = t.constant(unit_rows(1, 3, rng));
  const std::vector<Label> y1{0};
  EXPECT_THROW(cross_cl(one, one, y1, LossConfig{}), ContractError);
  Var raw = t.constant(Tensor::matrix({{2, 0}, {0, 1}}));
  const std::vector<Label> y2{0, 0};
  EXPECT_THROW(cross_cl(raw, raw, y2, LossConfig{}), ContractError);
  Var ok = t.constant(unit_rows(2, 3, rng));
  EXPECT_THROW(cross_cl(ok, ok, y2, LossConfig{0.0, 0.5, false}), ConfigError);
  EXPECT_THROW(cross_cl(ok, ok, y2, LossConfig{0.1, -1.0, false}), ConfigError);
  const std::vector<Label> y3{0, 0, 1};
  EXPECT_THROW(cross_cl(ok, ok, y3, LossConfig{}), ShapeError);
}

TEST(CrossCL, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 3 + rng.below(5);
    Parameter a(testing::random_tensor({n, 3}, rng)), b(testing::random_tensor({n, 3}, rng));
    const auto y = random_labels(n, 2, rng);
    const bool own = trial % 2 == 1;
    auto res = finite_diff_check(
        [&](Tape& t) {
          return cross_cl(l2_normalize_last(t.param(a)), l2_normalize_last(t.param(b)), y, LossConfig{0.1, 0.5, own})
              .total;
        },
        {&a, &b}, 1e-6);
    EXPECT_TRUE(res.passed(1e-6)) << res.max_rel_error;
  }
}

TEST(SCL, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Parameter a(testing::random_tensor({6, 4}, rng));
  const std::vector<Label> y{0, 1, 0, 1, 2, 0};
  auto res = finite_diff_check([&](Tape& t) { return scl(l2_normalize_last(t.param(a)), y, 0.1); }, {&a}, 1e-6);
  EXPECT_TRUE(res.passed(1e-6)) << res.max_rel_error;
}

TEST(CrossEntropy, MatchesScalarReferenceAndUniformCase) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(6), k = 2 + rng.below(4);
    const Tensor logits = testing::random_tensor({n, k}, rng, -5, 5);
    const auto y = random_labels(n, k, rng);
    Tape t;
    EXPECT_NEAR(cross_entropy(t.constant(logits), y).item(), ref::cross_entropy(ref::rows_of(logits), y), 1e-12);
  }
  Tape t;
  const std::vector<Label> y{0, 3};
  EXPECT_NEAR(cross_entropy(t.constant(Tensor({2, 4})), y).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveNearZero) {
  Tensor logits({3, 4});
  const std::vector<Label> y{2, 0, 3};
  for (std::size_t i = 0; i < 3; ++i) logits.at(i, y[i]) = 1000.0;
  Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(logits), y).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, RejectsLabelsOutsideClassRange) {
  Tape t;
  const std::vector<Label> y{0, 4};
  EXPECT_THROW(cross_entropy(t.constant(Tensor({2, 4})), y), DataError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  Parameter logits(testing::random_tensor({5, 3}, rng, -3, 3));
  const std::vector<Label> y{0, 2, 1, 1, 0};
  auto res = finite_diff_check([&](Tape& t) { return cross_entropy(t.param(logits), y); }, {&logits}, 1e-6);
  EXPECT_TRUE(res.passed(1e-7)) << res.max_rel_error;
}

}  // namespace
}  // namespace vlcdoc
