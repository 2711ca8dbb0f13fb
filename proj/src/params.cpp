// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/params.hpp"

#include <cstring>

#include "ctvr/errors.hpp"

namespace ctvr::nn {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  if (entries_.count(name)) throw UsageError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  return entries_.emplace(name, std::move(value)).first->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

void ParameterSet::erase(const std::string& name) {
  entries_.erase(name);
  frozen_.erase(name);
}

void ParameterSet::freeze(const std::string& name) {
  at(name).set_requires_grad(false);
  at(name).zero_grad();
  frozen_.insert(name);
}

void ParameterSet::unfreeze(const std::string& name) {
  at(name).set_requires_grad(true);
  frozen_.erase(name);
}

void ParameterSet::freeze_all() {
  for (auto& [name, _] : entries_) freeze(name);
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParameterSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_)
    if (!frozen_.count(name)) out.push_back(name);
  return out;
}

void ParameterSet::round_to_float() {
  for (auto& [_, t] : entries_)
    for (auto& v : t.mutable_values()) v = static_cast<double>(static_cast<float>(v));
}

std::uint64_t ParameterSet::checksum() const { return checksum(""); }

std::uint64_t ParameterSet::checksum(const std::string& prefix) const {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : entries_) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    fnv(h, name.data(), name.size());
    for (auto e : t.shape()) {
      const std::uint64_t e64 = e;
      fnv(h, &e64, sizeof e64);
    }
    auto v = t.values();
    fnv(h, v.data(), v.size() * sizeof(double));
  }
  return h;
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& [name, t] : other.entries_) {
    add(name, t);
    if (other.is_frozen(name)) freeze(name);
  }
}

GradientMap backward(const Tensor& loss, ParameterSet& params) {
  if (!loss.defined() || loss.numel() != 1) throw UsageError("backward requires a scalar loss");
  for (const auto& name : params.names()) params.at(name).zero_grad();
  nn::backward(loss);
  GradientMap grads;
  for (const auto& name : params.trainable_names()) {
    const Tensor& t = params.at(name);
    if (t.has_grad()) {
      grads[name].assign(t.grad().begin(), t.grad().end());
    } else {
      grads[name].assign(t.numel(), 0.0);
    }
  }
  return grads;
}

}  // namespace ctvr::nn
