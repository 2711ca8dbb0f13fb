// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/optim.hpp"

#include <cmath>
#include <numbers>

#include "ctvr/errors.hpp"

namespace ctvr::nn {

void Optimizer::step(ParameterSet& params, const GradientMap& grads, double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw UsageError("gradient for unknown parameter: " + name);
    if (params.is_frozen(name)) continue;
    auto values = params.at(name).mutable_values();
    if (g.size() != values.size()) throw UsageError("gradient shape mismatch for " + name);
    if (scheme_ == OptimizerScheme::kSgd) {
      for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * g[i];
      continue;
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(adam_.beta1, t);
    const double c2 = 1.0 - std::pow(adam_.beta2, t);
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = adam_.beta1 * m[i] + (1.0 - adam_.beta1) * g[i];
      v[i] = adam_.beta2 * v[i] + (1.0 - adam_.beta2) * g[i] * g[i];
      values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + adam_.eps);
    }
  }
}

void Optimizer::reset() {
  steps_ = 0;
  m_.clear();
  v_.clear();
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps, double min_lr) {
  if (total_steps == 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace ctvr::nn
