// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctvr/random.hpp"

namespace ctvr::data {

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kEosToken = 1;

struct StreamConfig {
  std::uint64_t seed = 7;
  std::size_t tasks = 5;
  std::size_t cats_per_task = 4;
  std::size_t videos_per_cat = 16;
  std::size_t test_per_cat = 4;  // held out per category; these populate the feature store
  // Pretraining sees many categories with few clips each, which pushes the
  // backbone toward the general token/latent correspondence.
  std::size_t base_categories = 1024;
  std::size_t base_videos_per_cat = 2;
  std::size_t frames = 8;        // M
  std::size_t patches = 16;      // P
  std::size_t input_width = 16;  // raw patch feature width
  std::size_t latent_dim = 16;
  std::size_t query_len = 8;  // tokens before EOS
  std::size_t vocab = 256;
  std::size_t magnitude_buckets = 3;
  std::size_t appearance_dims = 4;  // dims named by a category's appearance tokens
  std::size_t motion_dims = 2;      // dims carrying drift
  double min_center_distance = 3.0;
  double instance_scale = 0.5;
  double drift_scale = 1.5;
  double frame_noise = 0.3;
  double frame_noise_corr = 0.8;  // AR(1) coefficient of per-frame latent noise
  double patch_noise = 0.2;
  double motion_token_weight = 1.0;
};

struct CategoryLatent {
  std::uint32_t id = 0;
  std::vector<double> video_center;
  std::vector<double> drift;                  // latent displacement over the whole clip
  std::vector<double> token_profile;          // probability per vocabulary id
  std::vector<std::int32_t> support;          // ids with nonzero probability, ascending
};

// Per-pair latent offset shared by the video and its query.
struct Instance {
  std::vector<double> offset;
};

// Raw frame input: frames × patches × width, row-major.
struct Video {
  std::size_t frames = 0;
  std::size_t patches = 0;
  std::size_t width = 0;
  std::vector<double> data;

  const double* frame(std::size_t m) const { return data.data() + m * patches * width; }
};

struct Pair {
  std::uint32_t task = 0;  // 1-based; 0 marks the pretraining split
  std::uint32_t category = 0;
  std::uint64_t video_id = 0;
  std::vector<std::int32_t> query_tokens;  // ends with EOS
  std::uint64_t video_seed = 0;
  bool test = false;
};

struct Task {
  std::uint32_t index = 0;
  std::vector<std::uint32_t> categories;
  std::vector<Pair> pairs;

  std::vector<const Pair*> split(bool test) const;
};

// Fixed per-stream rendering: one latent -> patch-feature map per patch.
struct World {
  std::size_t latent_dim = 0, patches = 0, input_width = 0;
  std::vector<double> render;  // patches × input_width × latent_dim
};

struct TaskStream {
  StreamConfig config;
  World world;
  std::vector<CategoryLatent> categories;  // base categories first, then continual ones
  Task base;                               // pretraining split, disjoint categories
  std::vector<Task> tasks;

  const CategoryLatent& category(std::uint32_t id) const;
};

TaskStream generate_stream(const StreamConfig& config);

Instance sample_instance(const CategoryLatent& latent, const StreamConfig& config, Rng& rng);
// Frame m sees center + offset + drift·(m/(M-1) - 1/2) plus AR(1) noise,
// rendered per patch and perturbed by patch noise.
Video sample_video(const CategoryLatent& latent, const Instance& instance, const World& world,
                   const StreamConfig& config, Rng& rng);
// Draws query_len tokens from the category profile; appearance tokens take
// their magnitude bucket from the instance latent. Appends EOS.
std::vector<std::int32_t> sample_query(const CategoryLatent& latent, const Instance& instance,
                                       const StreamConfig& config, Rng& rng);

// Regenerates the video of a pair from its seed.
Video render_video(const TaskStream& stream, const Pair& pair);
// The same latents as render_video, before patch rendering (frames × latent).
std::vector<std::vector<double>> frame_latents(const TaskStream& stream, const Pair& pair);

// Token ids of the appearance and motion vocabularies.
std::int32_t appearance_token(const StreamConfig& config, std::size_t dim, bool negative, std::size_t bucket);
std::int32_t motion_token(const StreamConfig& config, std::size_t dim, bool negative);

// Line-delimited JSON manifest, one record per pair with fields
// task, category, video_id, query_tokens, video_seed.
void write_manifest(std::ostream& out, const TaskStream& stream);
std::vector<Pair> read_manifest(std::istream& in);

}  // namespace ctvr::data
