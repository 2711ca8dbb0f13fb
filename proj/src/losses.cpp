// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/losses.hpp"

#include <numeric>
#include <vector>

#include "ctvr/errors.hpp"
#include "ctvr/ops.hpp"

namespace ctvr::losses {

namespace {

void validate(const SimilarityBatch& batch) {
  if (!(batch.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!batch.q.defined() || !batch.v.defined() || batch.q.rank() != 2 || batch.q.shape() != batch.v.shape()) {
    throw DimensionError("similarity batch needs matching [n x O] query and video features");
  }
}

std::vector<std::size_t> diagonal(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

nn::Tensor logits(const nn::Tensor& a, const nn::Tensor& b, double tau) {
  return nn::scale(nn::linear(nn::l2_normalize_rows(a), nn::l2_normalize_rows(b)), 1.0 / tau);
}

// Mean negative log-probability of the diagonal under a softmax along axis.
nn::Tensor diagonal_nll(const nn::Tensor& scores, std::size_t axis) {
  const auto idx = diagonal(scores.dim(0));
  return nn::scale(nn::mean(nn::pick(nn::log_softmax(scores, axis), idx, idx)), -1.0);
}

}  // namespace

InfoNcePair infonce_pair(const SimilarityBatch& batch) {
  validate(batch);
  const nn::Tensor s = logits(batch.q, batch.v, batch.tau);  // s[i][j] = <q_i, v_j>/tau
  return {diagonal_nll(s, 0), diagonal_nll(s, 1)};
}

nn::Tensor ct_loss(const SimilarityBatch& batch) {
  validate(batch);
  nn::Tensor s = logits(batch.q, batch.v, batch.tau);
  if (batch.refs.defined() && batch.refs.numel() > 0) {
    if (batch.refs.rank() != 2 || batch.refs.dim(1) != batch.q.dim(1)) {
      throw DimensionError("reference features must be [n_ref x O]");
    }
    s = nn::concat_cols(s, logits(batch.q, batch.refs, batch.tau));
  }
  return diagonal_nll(s, 1);
}

nn::Tensor total_loss(const SimilarityBatch& batch, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  const auto pair = infonce_pair(batch);
  nn::Tensor contrastive = nn::scale(nn::add(pair.v2t, pair.t2v), 0.5);
  if (beta == 0.0) return contrastive;
  if (beta == 1.0) return ct_loss(batch);
  return nn::add(nn::scale(contrastive, 1.0 - beta), nn::scale(ct_loss(batch), beta));
}

double mix_components(double v2t, double t2v, double ct, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  return (1.0 - beta) * 0.5 * (v2t + t2v) + beta * ct;
}

}  // namespace ctvr::losses
