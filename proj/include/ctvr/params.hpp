// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctvr/tensor.hpp"

namespace ctvr::nn {

using GradientMap = std::map<std::string, std::vector<double>>;

// Named parameters with a frozen subset. Iteration order is by name, which
// keeps checksums and optimizer updates deterministic.
class ParameterSet {
 public:
  // Registers a new trainable entry; duplicate names are rejected.
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void erase(const std::string& name);

  void freeze(const std::string& name);
  void unfreeze(const std::string& name);
  void freeze_all();
  bool is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }

  const std::map<std::string, Tensor>& entries() const { return entries_; }
  const std::set<std::string>& frozen() const { return frozen_; }
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::size_t size() const { return entries_.size(); }

  // Rounds every value to the nearest 32-bit float so that a 32-bit
  // checkpoint of this set reloads bit-identically.
  void round_to_float();

  // FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const;
  std::uint64_t checksum(const std::string& prefix) const;

  // Inserts every entry of `other`, keeping its frozen marks.
  void merge(const ParameterSet& other);

 private:
  std::map<std::string, Tensor> entries_;
  std::set<std::string> frozen_;
};

// Zeroes trainable gradients, runs reverse accumulation from `loss` and
// returns one gradient per trainable entry (zeros where unreachable).
GradientMap backward(const Tensor& loss, ParameterSet& params);

}  // namespace ctvr::nn
