// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "vlcdoc/nn.hpp"
#include "vlcdoc/tensor.hpp"

namespace vlcdoc {

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
struct Schedule {
  std::size_t total_steps = 500;
  double warmup_fraction = 0.1;
  double base_lr = 1e-3;

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
  }

  void validate() const {
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
      throw ConfigError("warmup fraction must lie in [0, 1)");
    }
    if (!(base_lr >= 0.0)) throw ConfigError("base learning rate must be non-negative");
  }
};

inline double lr_at(const Schedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond schedule of " +
                        std::to_string(s.total_steps) + " steps");
  }
  const std::size_t warm = s.warmup_steps();
  if (step < warm) return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (s.total_steps == warm) return s.base_lr;
  return s.base_lr * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - warm);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
class AdamW {
 public:
  struct Moments {
    Tensor first;
    Tensor second;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  /// Applies one update using each parameter's `grad` field.
  void step(const NamedParams& params, double lr) {
    for (const auto& [name, p] : params) {
      if (p->grad.shape() != p->value.shape()) {
        throw ShapeError("adamw: gradient of '" + name + "' has shape " + to_string(p->grad.shape()));
      }
      for (double g : p->grad.data()) {
        if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in parameter '" + name + "'");
      }
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (const auto& [name, p] : params) {
      auto it = moments_.find(name);
      if (it == moments_.end()) {
        it = moments_.emplace(name, Moments{Tensor(p->value.shape()), Tensor(p->value.shape())}).first;
      }
      auto& m = it->second.first.data();
      auto& v = it->second.second.data();
      auto& w = p->value.data();
      const auto& g = p->grad.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] *= 1.0 - lr * cfg_.weight_decay;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
      }
    }
  }

  /// Restores state saved in a checkpoint.
  void restore(std::uint64_t step, std::map<std::string, Moments> moments) {
    step_ = step;
    moments_ = std::move(moments);
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace vlcdoc
