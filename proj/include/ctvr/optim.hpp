// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ctvr/params.hpp"

namespace ctvr::nn {

enum class OptimizerScheme { kSgd, kAdam };

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Updates the non-frozen entries of a ParameterSet in place. Moment state
// is keyed by parameter name.
class Optimizer {
 public:
  explicit Optimizer(OptimizerScheme scheme, AdamSettings adam = {})
      : scheme_(scheme), adam_(adam) {}

  void step(ParameterSet& params, const GradientMap& grads, double lr);
  std::size_t steps() const { return steps_; }
  void reset();

 private:
  OptimizerScheme scheme_;
  AdamSettings adam_;
  std::size_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// Cosine decay from base_lr at step 0 to min_lr at total_steps.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps, double min_lr = 0.0);

}  // namespace ctvr::nn
