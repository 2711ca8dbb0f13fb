// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/tame.hpp"

#include <algorithm>

#include "ctvr/errors.hpp"
#include "ctvr/ops.hpp"

namespace ctvr::tame {

std::string role_name(Role role) {
  switch (role) {
    case Role::kQ: return "q";
    case Role::kK: return "k";
    case Role::kV: return "v";
    case Role::kOut: return "out";
  }
  return "?";
}

Role parse_role(const std::string& name) {
  if (name == "q") return Role::kQ;
  if (name == "k") return Role::kK;
  if (name == "v") return Role::kV;
  if (name == "out") return Role::kOut;
  throw ConfigError("unknown TAME role '" + name + "' (expected q, k, v or out)");
}

std::size_t TameConfig::effective_k() const { return top_k == 0 ? std::min<std::size_t>(2, experts) : top_k; }

TAMEAdapter make_adapter(std::size_t width, const TameConfig& config, Rng& rng) {
  const std::size_t k = config.effective_k();
  if (config.experts == 0 || k < 1 || k > config.experts) {
    throw ConfigError("TAME needs 1 <= k <= n_e (k=" + std::to_string(k) + ", n_e=" +
                      std::to_string(config.experts) + ")");
  }
  if (config.rank == 0) throw ConfigError("TAME rank must be >= 1");
  TAMEAdapter adapter;
  adapter.a = rng.normal_tensor({config.rank, width}, config.init_std);
  for (std::size_t i = 0; i < config.experts; ++i) adapter.b.push_back(nn::Tensor::zeros({width, config.rank}));
  adapter.router = rng.normal_tensor({config.experts, width}, config.init_std);
  adapter.lambda = config.lambda;
  adapter.k = k;
  return adapter;
}

nn::Tensor route(const TAMEAdapter& adapter, const nn::Tensor& eos, const nn::Tensor* prototype) {
  if (adapter.k < 1 || adapter.k > adapter.experts()) {
    throw ConfigError("route: k=" + std::to_string(adapter.k) + " exceeds n_e=" + std::to_string(adapter.experts()));
  }
  const nn::Tensor rows = eos.rank() == 1 ? nn::reshape(eos, {1, eos.numel()}) : eos;
  if (rows.dim(1) != adapter.width()) throw DimensionError("route: EOS width differs from adapter width");
  nn::Tensor input = rows;
  if (prototype) {
    if (prototype->numel() != adapter.width()) throw DimensionError("route: prototype width differs");
    input = nn::add_row(rows, *prototype);
  }
  return nn::topk_softmax(nn::linear(input, adapter.router), adapter.k);
}

nn::Tensor experts_apply(const TAMEAdapter& adapter, const nn::Tensor& x, const nn::Tensor& gates,
                         std::size_t seq_len) {
  if (x.rank() != 2 || x.dim(1) != adapter.width()) {
    throw DimensionError("experts_apply: input " + nn::shape_str(x.shape()) + " for width " +
                         std::to_string(adapter.width()));
  }
  const nn::Tensor g = gates.rank() == 1 ? nn::reshape(gates, {1, gates.numel()}) : gates;
  if (g.dim(1) != adapter.experts()) throw DimensionError("experts_apply: gate count differs from n_e");
  const std::size_t rows = x.dim(0), seqs = g.dim(0);
  if (seq_len == 0) seq_len = rows / seqs;
  if (seq_len * seqs != rows) throw DimensionError("experts_apply: rows do not split into gate sequences");

  const nn::Tensor hidden = nn::linear(x, adapter.a);
  nn::Tensor row_gates;
  if (seqs > 1) {
    std::vector<std::size_t> seq_of_row(rows);
    for (std::size_t r = 0; r < rows; ++r) seq_of_row[r] = r / seq_len;
    row_gates = nn::gather_rows(g, seq_of_row);
  }
  // Experts are summed in order of their gate columns, largest first, so a
  // relabelling of the experts yields the same floating-point sum.
  const auto gv = g.values();
  const std::size_t ne = adapter.experts();
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < ne; ++i) {
    for (std::size_t s = 0; s < seqs; ++s) {
      if (gv[s * ne + i] != 0.0) {
        used.push_back(i);
        break;
      }
    }
  }
  std::stable_sort(used.begin(), used.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t s = 0; s < seqs; ++s) {
      if (gv[s * ne + a] != gv[s * ne + b]) return gv[s * ne + a] > gv[s * ne + b];
    }
    return false;
  });
  nn::Tensor total;
  for (std::size_t i : used) {
    const nn::Tensor out = nn::linear(hidden, adapter.b[i]);
    const nn::Tensor term = seqs > 1 ? nn::mul_rows(out, nn::column(row_gates, i))
                                     : nn::mul_scalar(out, nn::column(g, i));
    total = total.defined() ? nn::add(total, term) : term;
  }
  if (!total.defined()) return nn::Tensor::zeros({rows, adapter.width()});
  return total;
}

nn::Tensor adapted_linear(const TAMEAdapter& adapter, const nn::Tensor& frozen_w, const nn::Tensor& x,
                          const nn::Tensor& gates, std::size_t seq_len) {
  return nn::add(nn::linear(x, frozen_w), nn::scale(experts_apply(adapter, x, gates, seq_len), adapter.lambda));
}

const TAMEAdapter* TameStack::find(std::size_t layer, Role role) const {
  auto it = adapters.find({layer, role});
  return it == adapters.end() ? nullptr : &it->second;
}

TameStack make_stack(std::size_t layers, std::size_t width, const TameConfig& config, Rng& rng) {
  TameStack stack;
  stack.config = config;
  for (std::size_t l = 0; l < layers; ++l)
    for (Role role : config.roles) stack.adapters.emplace(std::make_pair(l, role), make_adapter(width, config, rng));
  return stack;
}

void register_parameters(TameStack& stack, nn::ParameterSet& params) {
  for (auto& [key, adapter] : stack.adapters) {
    const std::string prefix = "tame." + std::to_string(key.first) + "." + role_name(key.second) + ".";
    params.add(prefix + "A", adapter.a);
    for (std::size_t i = 0; i < adapter.b.size(); ++i) params.add(prefix + "B." + std::to_string(i), adapter.b[i]);
    params.add(prefix + "router", adapter.router);
  }
}

void PrototypeBank::begin_task(std::size_t t, nn::ParameterSet* params) {
  if (t != prototypes_.size() + 1) {
    throw ProtocolError("begin_task(" + std::to_string(t) + ") after " + std::to_string(prototypes_.size()) +
                        " tasks; tasks must be sequential");
  }
  if (width_ == 0) throw UsageError("prototype bank has no width");
  for (std::size_t i = 0; i < prototypes_.size(); ++i) {
    prototypes_[i].set_requires_grad(false);
    if (params && params->contains(param_name(i + 1))) params->freeze(param_name(i + 1));
  }
  nn::Tensor p = nn::Tensor::zeros({width_});
  if (params) {
    params->add(param_name(t), p);
    if (pinned_) params->freeze(param_name(t));
  } else {
    p.set_requires_grad(!pinned_);
  }
  prototypes_.push_back(p);
}

const nn::Tensor& PrototypeBank::prototype(std::size_t t) const {
  if (t < 1 || t > prototypes_.size()) throw ProtocolError("no prototype for task " + std::to_string(t));
  return prototypes_[t - 1];
}

nn::Tensor& PrototypeBank::prototype(std::size_t t) {
  if (t < 1 || t > prototypes_.size()) throw ProtocolError("no prototype for task " + std::to_string(t));
  return prototypes_[t - 1];
}

}  // namespace ctvr::tame
