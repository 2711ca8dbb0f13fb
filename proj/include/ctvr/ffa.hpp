// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ctvr/params.hpp"
#include "ctvr/random.hpp"
#include "ctvr/tensor.hpp"

namespace ctvr::ffa {

// Temporal cross-attention run beside one frozen vision self-attention block.
// Queries come from the previous frame's tokens, keys and values from the
// current frame; the result is added to the SA output scaled by alpha.
struct FFALayer {
  nn::Tensor wq, wk, wv;  // [O × O], heads split along rows
  nn::Tensor alpha;       // single value
  std::size_t heads = 1;

  std::size_t width() const { return wq.dim(0); }
};

struct FFAStack {
  std::vector<FFALayer> layers;  // layer b adapts vision block b

  std::size_t attach_depth() const { return layers.size(); }
};

// alpha starts at 0 so the adapted tower reproduces the frozen one.
FFAStack make_stack(std::size_t attach_depth, std::size_t width, std::size_t heads, Rng& rng,
                    double init_std = 0.02);

// Adds the stack's tensors to `params` as ffa.{b}.wq|wk|wv|alpha (aliasing).
void register_parameters(FFAStack& stack, nn::ParameterSet& params);

// CA(F_prev, F_cur) for `blocks` frames stacked along rows, each
// [(P+1) × O]. Attention logits are divided by sqrt(O / heads).
nn::Tensor cross_attend(const FFALayer& layer, const nn::Tensor& prev, const nn::Tensor& cur,
                        std::size_t blocks = 1, std::vector<double>* probs = nullptr);

// sa_out + alpha · ca_out.
nn::Tensor fuse_frame(const FFALayer& layer, const nn::Tensor& sa_out, const nn::Tensor& ca_out);

// Row index of frame m-1 for every token row of `videos` videos with
// `frames` frames of `tokens` rows each. Frame 0 maps onto itself.
std::vector<std::size_t> previous_frame_rows(std::size_t videos, std::size_t frames, std::size_t tokens);

}  // namespace ctvr::ffa
