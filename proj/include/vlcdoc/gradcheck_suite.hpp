// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlcdoc/cross_modal.hpp"
#include "vlcdoc/encoders.hpp"
#include "vlcdoc/gradcheck.hpp"
#include "vlcdoc/losses.hpp"
#include "vlcdoc/nn.hpp"

namespace vlcdoc {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckEntry {
  std::string block;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string worst;  // parameter and coordinate of the largest error

  nlohmann::json to_json() const {
    return {{"block", block}, {"max_rel_error", max_rel_error}, {"passed", passed}, {"worst", worst}};
  }
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0.0;

  bool all_passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return !entries.empty();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries) rows.push_back(e.to_json());
    return {{"blocks", rows}, {"all_passed", all_passed()}, {"seconds", seconds}};
  }
};

/// Identity forward whose adjoint is scaled by 1.5. Only for negative controls.
inline Var corrupt_adjoint(const Var& x) {
  std::vector<double> y(x.data().begin(), x.data().end());
  return x.tape().record("corrupt_adjoint", x.shape(), std::move(y), {x}, [x](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 1.5 * g[i];
  });
}

namespace detail {

// Fixture state that must outlive the checks: parameters, masks, labels.
struct GradcheckFixture {
  std::size_t batch = 2, rows = 3, d = 4, heads = 2, d_ff = 6, d_h = 5, d_p = 3;
  Rng rng;
  KeyMask mask;
  explicit GradcheckFixture(std::uint64_t seed) : rng(seed) {
    // Last key of the second sequence is padding.
    mask = KeyMask{batch, rows, {1, 1, 1, 1, 1, 0}};
  }

  Parameter random(Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal();
    return Parameter(std::move(t));
  }
};

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct adjoint.
inline Var weighted_sum(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (double& v : w.data()) v = rng.normal();
  return sum(mul(y, y.tape().constant(std::move(w))));
}

}  // namespace detail

/// Finite-difference checks on tiny dimensions for every block and loss.
/// `corrupt_block` names a block whose output is routed through
/// corrupt_adjoint, which must then be reported as failing.
inline GradcheckReport run_gradcheck(std::uint64_t seed, const std::string& corrupt_block = "",
                                     double step = 1e-6) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::GradcheckFixture fx(seed);
  const std::size_t B = fx.batch, m = fx.rows, d = fx.d;
  GradcheckReport report;

  auto run = [&](const std::string& name, NamedParams params, const std::function<Var(Tape&)>& f) {
    const bool corrupt = name == corrupt_block;
    std::vector<Parameter*> ps;
    for (auto& [n, p] : params) ps.push_back(p);
    const auto res = finite_diff_check(
        [&](Tape& t) {
          Var y = f(t);
          if (corrupt) y = corrupt_adjoint(y);
          return detail::weighted_sum(y, seed + 17);
        },
        ps, step);
    GradcheckEntry e{name, res.max_rel_error, res.passed(kGradcheckTolerance), ""};
    if (!res.finite) {
      e.worst = res.message;
    } else if (!params.empty()) {
      e.worst = params[res.worst_param].first + "[" + std::to_string(res.worst_index) + "]";
    }
    report.entries.push_back(std::move(e));
  };

  {
    Parameter x = fx.random({B, m, d});
    LayerNormParams ln = make_layer_norm(d);
    ln.gamma = fx.random({d});
    ln.beta = fx.random({d});
    NamedParams ps{{"x", &x}};
    ln.collect("ln", ps);
    run("layer_norm", ps, [&](Tape& t) { return layer_norm(t, ln, t.param(x)); });
  }
  {
    Parameter x = fx.random({B, m, d});
    FeedForwardParams ff = make_feed_forward(d, fx.d_ff, fx.rng);
    NamedParams ps{{"x", &x}};
    ff.collect("ff", ps);
    run("feed_forward", ps, [&](Tape& t) { return feed_forward(t, ff, t.param(x)); });
  }
  {
    Parameter q = fx.random({B, m, d});
    Parameter kv = fx.random({B, m, d});
    MHAParams mha = make_mha(d, fx.heads, fx.rng);
    NamedParams ps{{"query_input", &q}, {"key_value_input", &kv}};
    mha.collect("attention", ps);
    run("attention", ps, [&](Tape& t) { return multi_head_attention(t, mha, t.param(q), t.param(kv), &fx.mask); });
  }
  CrossModalDims dims{d, fx.heads, fx.d_ff, 2, 1e-5};
  {
    Parameter v = fx.random({B, m, d});
    Parameter l = fx.random({B, m, d});
    InterMCAParams p = make_inter_mca(dims, fx.rng);
    NamedParams ps{{"vision", &v}, {"language", &l}};
    p.collect("inter_mca", ps);
    run("inter_mca", ps, [&](Tape& t) {
      ModalityPair out = inter_mca(t, p, t.param(v), t.param(l), &fx.mask);
      return add(out.vision, out.language);
    });
  }
  {
    Parameter prev = fx.random({B, m, d});
    Parameter next = fx.random({B, m, d});
    IntraModalityParams p = make_intra_modality(dims, fx.rng);
    NamedParams ps{{"prev", &prev}, {"next", &next}};
    p.collect("intra_msa", ps);
    run("intra_msa", ps, [&](Tape& t) { return intra_msa(t, p, t.param(prev), t.param(next), &fx.mask); });
  }
  {
    Parameter x = fx.random({4, d});
    ProjectionHeadParams head = make_projection_head(d, fx.d_h, fx.d_p, fx.rng);
    NamedParams ps{{"x", &x}};
    head.collect("projection_head", ps);
    run("projection_head", ps, [&](Tape& t) { return project_and_normalize(t, head, t.param(x)); });
  }
  {
    Parameter v = fx.random({B, m, d});
    Parameter l = fx.random({B, m, d});
    CrossModalStack stack = make_cross_modal_stack(dims, fx.rng);
    ProjectionHeadParams hv = make_projection_head(d, fx.d_h, fx.d_p, fx.rng);
    ProjectionHeadParams hl = make_projection_head(d, fx.d_h, fx.d_p, fx.rng);
    NamedParams ps{{"vision", &v}, {"language", &l}};
    stack.collect("stack", ps);
    hv.collect("head_vision", ps);
    hl.collect("head_language", ps);
    run("cross_modal_stack", ps, [&](Tape& t) {
      StackOutput out = stack_forward(t, stack, hv, hl, t.param(v), t.param(l), &fx.mask);
      return add(out.vision_embedding, out.language_embedding);
    });
  }

  // Losses on raw rows normalised inside the graph. Sample 4 has no positive.
  const std::vector<Label> labels{0, 1, 0, 1, 2};
  {
    Parameter a = fx.random({5, fx.d_p});
    Parameter b = fx.random({5, fx.d_p});
    NamedParams ps{{"vision", &a}, {"language", &b}};
    run("cross_cl", ps, [&](Tape& t) {
      return cross_cl(l2_normalize_last(t.param(a)), l2_normalize_last(t.param(b)), labels, LossConfig{}).total;
    });
  }
  {
    Parameter a = fx.random({5, fx.d_p});
    NamedParams ps{{"embeddings", &a}};
    run("scl", ps, [&](Tape& t) { return scl(l2_normalize_last(t.param(a)), labels, 0.1); });
  }
  {
    Parameter logits = fx.random({5, 3});
    NamedParams ps{{"logits", &logits}};
    run("cross_entropy", ps, [&](Tape& t) { return cross_entropy(t.param(logits), labels); });
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace vlcdoc
