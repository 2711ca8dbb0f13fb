// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ctvr/tensor.hpp"

namespace ctvr::nn {

// Matrix ops take rank-2 tensors unless noted. "Row" ops view a tensor of
// any rank as (numel / last extent) rows of the last extent.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x · wᵀ for x [rows × in], w [out × in].
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a · s where s holds a single (possibly trainable) value.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// Adds a vector of the last extent to every row.
Tensor add_row(const Tensor& a, const Tensor& row);
// Scales row r of a [R × C] by v[r].
Tensor mul_rows(const Tensor& a, const Tensor& v);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor column(const Tensor& x, std::size_t col);
// y[i] = x[rows[i], cols[i]].
Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
// Mean over consecutive groups of `group` rows: [R × C] -> [R/group × C].
Tensor mean_row_groups(const Tensor& x, std::size_t group);
// Unit-norm rows; an all-zero row maps to zeros.
Tensor l2_normalize_rows(const Tensor& x);

// Row-wise: keep the k largest logits (ties to the lower index), softmax
// over those, exact zeros elsewhere.
Tensor topk_softmax(const Tensor& logits, std::size_t k);

struct AttentionSpec {
  std::size_t blocks = 1;  // independent sequences stacked along rows
  std::size_t heads = 1;
  double scale_divisor = 1.0;  // logits are q·k / scale_divisor
  bool causal = false;         // query i sees keys j <= i (needs equal lengths)
};

// Per block and head: softmax(Q Kᵀ / divisor) V, heads concatenated along
// columns. q is [blocks·Lq × O]; k and v are [blocks·Lk × O]. When `probs`
// is non-null it receives the attention matrices laid out as
// [block][head][Lq][Lk].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionSpec& spec, std::vector<double>* probs = nullptr);

// Projects queries from q_src and keys/values from kv_src (both [L × O]),
// then runs attention with divisor sqrt(O / heads).
Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src, const Tensor& wq,
                            const Tensor& wk, const Tensor& wv, std::size_t heads);

}  // namespace ctvr::nn
