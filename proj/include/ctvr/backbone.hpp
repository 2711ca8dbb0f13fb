// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctvr/ffa.hpp"
#include "ctvr/params.hpp"
#include "ctvr/tame.hpp"
#include "ctvr/taskgen.hpp"

namespace ctvr::backbone {

struct BackboneConfig {
  std::size_t width = 32;  // O
  std::size_t heads = 4;
  std::size_t vision_layers = 2;
  std::size_t text_layers = 2;
  std::size_t patches = 16;  // P
  std::size_t input_width = 16;
  std::size_t vocab = 256;
  std::size_t context = 16;
  std::size_t mlp_ratio = 4;
  double ln_eps = 1e-5;
  double tau_pre = 0.05;
  std::uint64_t seed = 1;
};

// Two-tower transformer. Parameter names:
//   vision.patch_proj, vision.cls, vision.pos, vision.ln_pre.{g,b},
//   vision.{b}.{ln1.g,ln1.b,wq,wk,wv,wo,ln2.g,ln2.b,fc1,fc1_b,fc2,fc2_b},
//   vision.ln_post.{g,b}, text.tok_emb, text.pos, text.{b}.<same block
//   names>, text.ln_final.{g,b}, logit.tau_pre.
struct BackboneParams {
  BackboneConfig config;
  nn::ParameterSet params;

  std::uint64_t checksum() const { return params.checksum(); }
  bool frozen() const { return params.trainable_names().empty(); }
};

BackboneParams init_backbone(const BackboneConfig& config);

// Single-video view: tokens [M × (P+1) × O], cls [M × O] with
// cls[m] == tokens[m, 0, :].
struct FrameTokens {
  nn::Tensor tokens;
  nn::Tensor cls;
};

// Stacked encoding of several videos with equal frame counts. Rows of
// `tokens` run video-major, then frame, then token (CLS first).
struct VideoBatch {
  std::size_t videos = 0;
  std::size_t frames = 0;
  std::size_t tokens_per_frame = 0;
  nn::Tensor tokens;  // [videos·frames·(P+1) × O]
  nn::Tensor cls;     // [videos·frames × O]
};

// Attention maps recorded for one vision block during encoding, laid out
// [frame][head][query token][key token].
struct AttentionCapture {
  std::size_t layer = 0;
  std::vector<double> self_attention;
  std::vector<double> cross_attention;  // empty when the block has no FFA
};

VideoBatch encode_video_batch(std::span<const data::Video* const> videos, const BackboneParams& params,
                              const ffa::FFAStack* ffa = nullptr, AttentionCapture* capture = nullptr);
FrameTokens encode_frames(const data::Video& video, const BackboneParams& params,
                          const ffa::FFAStack* ffa = nullptr);

// Mean of the per-frame CLS features: [O] for one video.
nn::Tensor avg_pool_video(const FrameTokens& frames);
// Per-video average pooled features: [videos × O].
nn::Tensor video_features(const VideoBatch& batch);

struct QueryTokens {
  std::vector<std::int32_t> ids;
  std::size_t eos_index = 0;
  nn::Tensor eos_feature;  // [O]
};

struct TextBatch {
  std::size_t sequences = 0;
  std::size_t length = 0;
  std::vector<std::size_t> eos_index;
  nn::Tensor hidden;  // [sequences·length × O]
  nn::Tensor eos;     // [sequences × O]
};

// Position of the single EOS; throws InputError on a missing or repeated EOS,
// non-padding tokens after it, an out-of-vocabulary id, or an over-long
// sequence.
std::size_t validate_query(std::span<const std::int32_t> ids, const BackboneConfig& config);

// Causal text tower. Sequences are right-padded to a common length. With a
// TAME stack, adapted projections route on (EOS row + prototype).
TextBatch encode_text_batch(std::span<const std::vector<std::int32_t>* const> queries,
                            const BackboneParams& params, const tame::TameStack* tame = nullptr,
                            const nn::Tensor* prototype = nullptr);
QueryTokens encode_text(const std::vector<std::int32_t>& ids, const BackboneParams& params,
                        const tame::TameStack* tame = nullptr, const nn::Tensor* prototype = nullptr);

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 11;
};

struct PretrainResult {
  std::vector<double> epoch_loss;
  std::uint64_t checksum = 0;
};

// Trains both towers on the stream's base split with symmetric InfoNCE at
// tau_pre, rounds values to 32-bit precision, then freezes everything.
PretrainResult pretrain_backbone(BackboneParams& params, const data::TaskStream& stream,
                                 const PretrainConfig& config);

}  // namespace ctvr::backbone

namespace ctvr::ffa {

// Vision encoding with FFA fused into the first stack.attach_depth() blocks.
backbone::FrameTokens encode_video_with_ffa(const data::Video& video, const backbone::BackboneParams& params,
                                            const FFAStack& stack);

}  // namespace ctvr::ffa
