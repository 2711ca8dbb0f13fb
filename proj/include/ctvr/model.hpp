// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctvr/backbone.hpp"
#include "ctvr/ffa.hpp"
#include "ctvr/params.hpp"
#include "ctvr/tame.hpp"

namespace ctvr::model {

struct ModelConfig {
  std::size_t attach_depth = 2;
  tame::TameConfig tame;
  bool tame_enabled = true;
  bool prototypes_pinned = false;
  std::uint64_t seed = 3;
};

// Frozen backbone plus the continual adapters. Adapter tensors are shared
// between `adapters()` and the FFA / TAME stacks, so optimizer updates
// through the parameter set are visible to the encoders.
class Model {
 public:
  Model(backbone::BackboneParams backbone, const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const backbone::BackboneParams& backbone() const { return backbone_; }
  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& adapters() { return adapters_; }
  const nn::ParameterSet& adapters() const { return adapters_; }
  const ffa::FFAStack& ffa() const { return ffa_; }
  const tame::TameStack& tame() const { return tame_; }
  const tame::PrototypeBank& bank() const { return bank_; }
  std::size_t width() const { return backbone_.config.width; }

  // Adds p_t and freezes earlier prototypes.
  void begin_task(std::size_t t);

  // Average pooled video features [n × O].
  nn::Tensor encode_videos(std::span<const data::Video* const> videos) const;
  // EOS query features [n × O]; prototype 0 routes on EOS alone.
  nn::Tensor encode_queries(std::span<const std::vector<std::int32_t>* const> queries,
                            std::size_t prototype) const;

  // One feature per stored prototype, in task order.
  std::vector<std::pair<std::size_t, nn::Tensor>> conditional_query_sweep(const std::vector<std::int32_t>& ids) const;
  // Batched form: element i holds the [n × O] features under prototype i+1.
  std::vector<nn::Tensor> conditional_query_sweep(std::span<const std::vector<std::int32_t>* const> queries) const;

  // Encodes with a vision block's attention maps recorded.
  backbone::AttentionCapture capture_attention(const data::Video& video, std::size_t layer) const;

 private:
  backbone::BackboneParams backbone_;
  ModelConfig config_;
  nn::ParameterSet adapters_;
  ffa::FFAStack ffa_;
  tame::TameStack tame_;
  tame::PrototypeBank bank_;

  friend Model load_model(const std::filesystem::path& path);
};

// Shared tensor checkpoint: "CTVRBB01" | u32 version | named tensors until
// EOF, each u16 name length, name, u8 rank, u32 extents, f32 values.
inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'V', 'R', 'B', 'B', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, nn::Tensor>>;

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_tensors(const std::filesystem::path& path);

void save_backbone(const std::filesystem::path& path, const backbone::BackboneParams& backbone);
backbone::BackboneParams load_backbone(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace ctvr::model
