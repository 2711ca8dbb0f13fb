// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ctvr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter (heads, k, tau, beta ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operations invoked out of order (tasks, appends, extraction).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed model input, e.g. token sequence without EOS.
class InputError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by an op while finite checks are on.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctvr
