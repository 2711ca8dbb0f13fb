// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctvr/params.hpp"
#include "ctvr/random.hpp"
#include "ctvr/tensor.hpp"

namespace ctvr::tame {

enum class Role { kQ, kK, kV, kOut };

std::string role_name(Role role);
Role parse_role(const std::string& name);

struct TameConfig {
  std::size_t experts = 5;
  std::size_t top_k = 0;  // 0 selects min(2, experts)
  std::size_t rank = 4;
  double lambda = 1.0;
  std::vector<Role> roles{Role::kQ, Role::kV};
  double init_std = 0.02;

  std::size_t effective_k() const;
};

// Mixture of low-rank experts sharing one encoder A. Expert i maps a row x
// to B_i A x; the router scores experts from the sequence's EOS row plus
// a task prototype.
struct TAMEAdapter {
  nn::Tensor a;                // [r × O]
  std::vector<nn::Tensor> b;   // n_e × [O × r]
  nn::Tensor router;           // [n_e × O]
  double lambda = 1.0;
  std::size_t k = 1;

  std::size_t experts() const { return b.size(); }
  std::size_t width() const { return a.dim(1); }
};

// B_i start at zero so the adapted layer reproduces the frozen one.
TAMEAdapter make_adapter(std::size_t width, const TameConfig& config, Rng& rng);

// Gates [n × n_e] from EOS rows [n × O] (or one [O] vector) plus an optional
// prototype [O] broadcast to every row. Exactly k nonzeros per row.
nn::Tensor route(const TAMEAdapter& adapter, const nn::Tensor& eos, const nn::Tensor* prototype);

// Σ_i gate_i · (B_i A x) for every row of x. Rows are grouped into
// sequences of `seq_len` consecutive rows that share one gate row; a gate
// vector of rank 1 applies to all rows. Experts with all-zero gates are not
// evaluated and receive no gradient.
nn::Tensor experts_apply(const TAMEAdapter& adapter, const nn::Tensor& x, const nn::Tensor& gates,
                         std::size_t seq_len = 0);

// x · W̃ᵀ + λ · E(x).
nn::Tensor adapted_linear(const TAMEAdapter& adapter, const nn::Tensor& frozen_w, const nn::Tensor& x,
                          const nn::Tensor& gates, std::size_t seq_len = 0);

// Adapters keyed by (text block, role).
struct TameStack {
  TameConfig config;
  std::map<std::pair<std::size_t, Role>, TAMEAdapter> adapters;
  bool enabled = true;  // false skips routing entirely

  const TAMEAdapter* find(std::size_t layer, Role role) const;
};

TameStack make_stack(std::size_t layers, std::size_t width, const TameConfig& config, Rng& rng);
// Names: tame.{layer}.{role}.A, tame.{layer}.{role}.B.{i}, tame.{layer}.{role}.router.
void register_parameters(TameStack& stack, nn::ParameterSet& params);

// Learnable per-task vectors added to the EOS row before routing. Only the
// newest prototype trains; earlier ones are frozen.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(std::size_t width, bool pinned) : width_(width), pinned_(pinned) {}

  // Appends p_t (t is 1-based and must equal size()+1) initialised to zero.
  void begin_task(std::size_t t, nn::ParameterSet* params = nullptr);

  std::size_t size() const { return prototypes_.size(); }
  bool empty() const { return prototypes_.empty(); }
  std::size_t active_task() const { return prototypes_.size(); }
  std::size_t width() const { return width_; }
  bool pinned() const { return pinned_; }
  const nn::Tensor& prototype(std::size_t t) const;  // 1-based
  nn::Tensor& prototype(std::size_t t);

  static std::string param_name(std::size_t t) { return "proto." + std::to_string(t); }

 private:
  std::size_t width_ = 0;
  bool pinned_ = false;  // prototypes stay zero and never train
  std::vector<nn::Tensor> prototypes_;
};

}  // namespace ctvr::tame
