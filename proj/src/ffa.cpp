// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/ffa.hpp"

#include <cmath>

#include "ctvr/errors.hpp"
#include "ctvr/ops.hpp"

namespace ctvr::ffa {

FFAStack make_stack(std::size_t attach_depth, std::size_t width, std::size_t heads, Rng& rng,
                    double init_std) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("ffa: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  FFAStack stack;
  for (std::size_t b = 0; b < attach_depth; ++b) {
    FFALayer layer;
    layer.wq = rng.normal_tensor({width, width}, init_std);
    layer.wk = rng.normal_tensor({width, width}, init_std);
    layer.wv = rng.normal_tensor({width, width}, init_std);
    layer.alpha = nn::Tensor::scalar(0.0);
    layer.heads = heads;
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

void register_parameters(FFAStack& stack, nn::ParameterSet& params) {
  for (std::size_t b = 0; b < stack.layers.size(); ++b) {
    auto& layer = stack.layers[b];
    const std::string prefix = "ffa." + std::to_string(b) + ".";
    params.add(prefix + "wq", layer.wq);
    params.add(prefix + "wk", layer.wk);
    params.add(prefix + "wv", layer.wv);
    params.add(prefix + "alpha", layer.alpha);
  }
}

nn::Tensor cross_attend(const FFALayer& layer, const nn::Tensor& prev, const nn::Tensor& cur,
                        std::size_t blocks, std::vector<double>* probs) {
  if (prev.shape() != cur.shape()) {
    throw DimensionError("cross_attend: previous frame " + nn::shape_str(prev.shape()) +
                         " vs current frame " + nn::shape_str(cur.shape()));
  }
  nn::AttentionSpec spec;
  spec.blocks = blocks;
  spec.heads = layer.heads;
  spec.scale_divisor = std::sqrt(static_cast<double>(layer.width()) / static_cast<double>(layer.heads));
  return nn::scaled_dot_attention(nn::linear(prev, layer.wq), nn::linear(cur, layer.wk),
                                  nn::linear(cur, layer.wv), spec, probs);
}

nn::Tensor fuse_frame(const FFALayer& layer, const nn::Tensor& sa_out, const nn::Tensor& ca_out) {
  return nn::add(sa_out, nn::mul_scalar(ca_out, layer.alpha));
}

std::vector<std::size_t> previous_frame_rows(std::size_t videos, std::size_t frames, std::size_t tokens) {
  std::vector<std::size_t> rows;
  rows.reserve(videos * frames * tokens);
  for (std::size_t v = 0; v < videos; ++v)
    for (std::size_t m = 0; m < frames; ++m) {
      const std::size_t src = m == 0 ? 0 : m - 1;
      for (std::size_t t = 0; t < tokens; ++t) rows.push_back((v * frames + src) * tokens + t);
    }
  return rows;
}

}  // namespace ctvr::ffa
