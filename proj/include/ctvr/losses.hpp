// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctvr/tensor.hpp"

namespace ctvr::losses {

// Row i of q and v is a positive pair; refs are extra negatives cached
// from earlier tasks and may be left undefined. All features are
// L2-normalized before the inner products.
struct SimilarityBatch {
  nn::Tensor q;     // [n × O]
  nn::Tensor v;     // [n × O]
  nn::Tensor refs;  // [n_ref × O] or undefined
  double tau = 0.05;
};

struct InfoNcePair {
  nn::Tensor v2t;  // column-wise softmax over queries
  nn::Tensor t2v;  // row-wise softmax over videos
};

InfoNcePair infonce_pair(const SimilarityBatch& batch);

// Text-to-video loss whose denominator also sums exp(<q_i, ref_h>/tau).
nn::Tensor ct_loss(const SimilarityBatch& batch);

// (1-beta)·½(L_v2t + L_t2v) + beta·L_CT. The CT term (and the reference
// set) is not touched when beta == 0.
nn::Tensor total_loss(const SimilarityBatch& batch, double beta);

// Mixes already-computed loss components the same way as total_loss.
double mix_components(double v2t, double t2v, double ct, double beta);

}  // namespace ctvr::losses
