// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vlcdoc/autodiff.hpp"

namespace vlcdoc {

using Label = std::uint32_t;

struct LossConfig {
  double tau = 0.1;
  double lambda = 0.5;
  /// Counts an anchor's own paired sample as an inter-modality positive (and
  /// keeps it in the denominator). Off by default.
  bool include_own_pair = false;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive, got " + std::to_string(tau));
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative, got " + std::to_string(lambda));
  }
};

namespace detail {

inline void require_unit_rows(const char* op, const Var& e) {
  if (e.shape().size() != 2) throw ShapeError(std::string(op) + ": embeddings must be [N, d], got " + to_string(e.shape()));
  const std::size_t d = e.shape()[1];
  auto v = e.data();
  for (std::size_t i = 0; i < e.shape()[0]; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-9) {
      throw ContractError(std::string(op) + ": embedding " + std::to_string(i) + " is not unit norm (|e| = " +
                          std::to_string(std::sqrt(s)) + ")");
    }
  }
}

/// Supervised contrastive sum over anchors:
///   sum_i -1/|P_i| sum_{j in P_i} log( exp(s_ij) / sum_{k != i} exp(s_ik) ),
/// with s = anchors . others^T / tau and P_i = {j != i : y_j = y_i}. Anchors
/// with no positives contribute 0. `own_pair` admits j == i / k == i.
inline Var contrastive_sum(const char* op, const Var& anchors, const Var& others, std::span<const Label> labels,
                           double tau, bool own_pair) {
  if (!(tau > 0.0)) throw ConfigError(std::string(op) + ": temperature must be positive");
  require_unit_rows(op, anchors);
  require_unit_rows(op, others);
  const std::size_t n = anchors.shape()[0];
  if (others.shape() != anchors.shape() || labels.size() != n) {
    throw ShapeError(std::string(op) + ": anchors " + to_string(anchors.shape()) + ", others " +
                     to_string(others.shape()) + " and " + std::to_string(labels.size()) + " labels disagree");
  }
  Tape& t = anchors.tape();
  Var sims = scale(matmul(anchors, transpose_last2(others)), 1.0 / tau);

  std::vector<std::uint8_t> keep(n * n, 0);
  Tensor pos_weight(Shape{n, n});
  Tensor has_pos(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      keep[i * n + j] = (own_pair || j != i) ? 1 : 0;
      if (labels[j] == labels[i] && (own_pair || j != i)) ++count;
    }
    if (count == 0) continue;
    has_pos[i] = 1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (labels[j] == labels[i] && (own_pair || j != i)) pos_weight.at(i, j) = 1.0 / static_cast<double>(count);
  }
  if (n < 2 && !own_pair) return scale(sum(sims), 0.0);
  Var log_denominator = masked_logsumexp_last(sims, std::move(keep));
  return sub(sum(mul(log_denominator, t.constant(std::move(has_pos)))),
             sum(mul(sims, t.constant(std::move(pos_weight)))));
}

}  // namespace detail

/// Same-modality term (e.g. V->V) summed over anchors.
inline Var intra_term(const Var& anchors, std::span<const Label> labels, double tau) {
  return detail::contrastive_sum("intra_term", anchors, anchors, labels, tau, false);
}

/// Cross-modality term: anchors from one modality, positives and denominator
/// from the other (e.g. L->V uses vision anchors against language samples).
inline Var inter_term(const Var& anchors, const Var& others, std::span<const Label> labels, double tau,
                      bool include_own_pair = false) {
  return detail::contrastive_sum("inter_term", anchors, others, labels, tau, include_own_pair);
}

/// Single-modality supervised contrastive baseline; identical in form to intra_term.
inline Var scl(const Var& anchors, std::span<const Label> labels, double tau) {
  return detail::contrastive_sum("scl", anchors, anchors, labels, tau, false);
}

struct LossValues {
  double total = 0.0;
  double vision_to_vision = 0.0;
  double language_to_vision = 0.0;
  double language_to_language = 0.0;
  double vision_to_language = 0.0;
};

struct LossReport {
  Var total;
  Var vision_to_vision;      // intra, vision anchors
  Var language_to_vision;    // inter, vision anchors vs language samples
  Var language_to_language;  // intra, language anchors
  Var vision_to_language;    // inter, language anchors vs vision samples

  LossValues values() const {
    return {total.item(), vision_to_vision.item(), language_to_vision.item(), language_to_language.item(),
            vision_to_language.item()};
  }
};

/// Combines the four terms: (VV + LL) + lambda * (LV + VL).
inline double combine_terms(double vv, double lv, double ll, double vl, double lambda) {
  return (vv + ll) + lambda * (lv + vl);
}

/// Four-term cross-modal contrastive objective over a paired batch of unit
/// vision embeddings `x` and language embeddings `t`.
inline LossReport cross_cl(const Var& x, const Var& t, std::span<const Label> labels, const LossConfig& cfg) {
  cfg.validate();
  if (x.shape().size() != 2 || x.shape()[0] < 2) {
    throw ContractError("cross_cl: batch needs at least 2 samples, got " + to_string(x.shape()));
  }
  LossReport r;
  r.vision_to_vision = intra_term(x, labels, cfg.tau);
  r.language_to_vision = inter_term(x, t, labels, cfg.tau, cfg.include_own_pair);
  r.language_to_language = intra_term(t, labels, cfg.tau);
  r.vision_to_language = inter_term(t, x, labels, cfg.tau, cfg.include_own_pair);
  r.total = add(add(r.vision_to_vision, r.language_to_language),
                scale(add(r.language_to_vision, r.vision_to_language), cfg.lambda));
  return r;
}

/// Mean negative log-likelihood of the true class under softmax(logits).
inline Var cross_entropy(const Var& logits, std::span<const Label> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[1] < 2) throw ShapeError("cross_entropy: logits must be [N, K>=2], got " + to_string(s));
  if (labels.size() != s[0]) throw ShapeError("cross_entropy: label count does not match logits");
  Tensor onehot(s);
  for (std::size_t i = 0; i < s[0]; ++i) {
    if (labels[i] >= s[1]) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " outside " + std::to_string(s[1]) +
                      " classes");
    }
    onehot.at(i, labels[i]) = 1.0;
  }
  Var picked = sum(mul(log_softmax_last(logits), logits.tape().constant(std::move(onehot))));
  return scale(picked, -1.0 / static_cast<double>(s[0]));
}

}  // namespace vlcdoc
