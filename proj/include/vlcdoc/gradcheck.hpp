// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vlcdoc/autodiff.hpp"

namespace vlcdoc {

struct FiniteDiffResult {
  double max_rel_error = 0.0;
  bool finite = true;
  std::size_t worst_param = 0;  // index into the checked parameter list
  std::size_t worst_index = 0;  // flat coordinate inside that parameter
  std::string message;

  bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences, perturbing every coordinate of every listed parameter.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline FiniteDiffResult finite_diff_check(const std::function<Var(Tape&)>& f,
                                          const std::vector<Parameter*>& params, double step) {
  if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  FiniteDiffResult res;

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    if (loss.size() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    if (!std::isfinite(loss.item())) {
      res.finite = false;
      res.message = "non-finite loss at the unperturbed point";
      return res;
    }
    tape.backward(loss);
    for (Parameter* p : params) analytic.push_back(tape.grad_of(*p));
  }

  auto eval = [&] {
    Tape tape(false);
    return f(tape).item();
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi]->value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = eval();
      values[i] = saved - step;
      const double down = eval();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        res.finite = false;
        res.worst_param = pi;
        res.worst_index = i;
        res.message = "non-finite value at parameter " + std::to_string(pi) + " coordinate " + std::to_string(i);
        return res;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = i;
      }
    }
  }
  return res;
}

/// Single-input convenience form: checks d f(x) / dx at `x`.
inline FiniteDiffResult finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x,
                                          double step) {
  Parameter p(x);
  return finite_diff_check([&](Tape& t) { return f(t, t.param(p)); }, std::vector<Parameter*>{&p}, step);
}

}  // namespace vlcdoc
