// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "json.hpp"

#include "ctvr/errors.hpp"

namespace ctvr::data {

namespace {

// Sub-stream tags for the per-pair generators.
constexpr std::uint64_t kInstanceStream = 1;
constexpr std::uint64_t kVideoStream = 2;
constexpr std::uint64_t kQueryStream = 3;

std::vector<std::size_t> top_dims(const std::vector<double>& v, std::size_t count) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) {
    return std::abs(v[a]) > std::abs(v[b]);
  });
  idx.resize(std::min(count, idx.size()));
  return idx;
}

std::size_t magnitude_bucket(double magnitude, std::size_t buckets) {
  // Thresholds at 1.2, 2.0, 2.8, ... in latent units.
  std::size_t b = 0;
  double edge = 1.2;
  while (b + 1 < buckets && magnitude >= edge) {
    ++b;
    edge += 0.8;
  }
  return b;
}

void validate(const StreamConfig& c) {
  if (c.tasks < 1 || c.cats_per_task < 1 || c.videos_per_cat < 1 || c.base_videos_per_cat < 1 || c.frames < 1 ||
      c.patches < 1 || c.input_width < 1 || c.latent_dim < 1 || c.query_len < 1) {
    throw ConfigError("stream counts must be >= 1");
  }
  if (c.test_per_cat >= c.videos_per_cat) throw ConfigError("test_per_cat must leave training videos");
  if (c.appearance_dims > c.latent_dim || c.motion_dims > c.latent_dim || c.appearance_dims < 1) {
    throw ConfigError("appearance/motion dims exceed latent_dim");
  }
  const std::size_t needed = 2 + c.latent_dim * 2 * c.magnitude_buckets + c.latent_dim * 2;
  if (c.vocab < needed) throw ConfigError("vocab too small: need " + std::to_string(needed));
}

CategoryLatent make_category(std::uint32_t id, const StreamConfig& c, Rng& rng,
                             const std::vector<CategoryLatent>& existing) {
  CategoryLatent cat;
  cat.id = id;
  for (int attempt = 0;; ++attempt) {
    cat.video_center.assign(c.latent_dim, 0.0);
    for (auto& v : cat.video_center) v = rng.normal();
    double closest = INFINITY;
    for (const auto& other : existing) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < c.latent_dim; ++i) {
        const double d = cat.video_center[i] - other.video_center[i];
        d2 += d * d;
      }
      closest = std::min(closest, std::sqrt(d2));
    }
    if (closest >= c.min_center_distance) break;
    if (attempt > 10000) throw ConfigError("cannot place categories at min_center_distance");
  }
  cat.drift.assign(c.latent_dim, 0.0);
  std::vector<std::size_t> dims(c.latent_dim);
  std::iota(dims.begin(), dims.end(), std::size_t{0});
  rng.shuffle(dims);
  for (std::size_t i = 0; i < c.motion_dims; ++i) {
    cat.drift[dims[i]] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * c.drift_scale * rng.uniform(0.75, 1.25);
  }

  cat.token_profile.assign(c.vocab, 0.0);
  for (std::size_t d : top_dims(cat.video_center, c.appearance_dims)) {
    const bool neg = cat.video_center[d] < 0.0;
    const double w = std::abs(cat.video_center[d]) / static_cast<double>(c.magnitude_buckets);
    for (std::size_t b = 0; b < c.magnitude_buckets; ++b) cat.token_profile[appearance_token(c, d, neg, b)] = w;
  }
  for (std::size_t d = 0; d < c.latent_dim; ++d) {
    if (cat.drift[d] != 0.0) {
      cat.token_profile[motion_token(c, d, cat.drift[d] < 0.0)] = c.motion_token_weight * std::abs(cat.drift[d]);
    }
  }
  const double z = std::accumulate(cat.token_profile.begin(), cat.token_profile.end(), 0.0);
  for (std::size_t t = 0; t < c.vocab; ++t) {
    cat.token_profile[t] /= z;
    if (cat.token_profile[t] > 0.0) cat.support.push_back(static_cast<std::int32_t>(t));
  }
  return cat;
}

Task make_task(std::uint32_t index, const std::vector<std::uint32_t>& cats, const TaskStream& stream,
               std::size_t videos_per_cat, std::uint64_t& next_video_id) {
  const auto& c = stream.config;
  Task task;
  task.index = index;
  task.categories = cats;
  for (auto cat_id : cats) {
    const auto& cat = stream.category(cat_id);
    for (std::size_t v = 0; v < videos_per_cat; ++v) {
      Pair p;
      p.task = index;
      p.category = cat_id;
      p.video_id = next_video_id++;
      p.video_seed = mix_seed(c.seed, p.video_id);
      p.test = v + c.test_per_cat >= videos_per_cat;
      Rng inst_rng(mix_seed(p.video_seed, kInstanceStream));
      Rng query_rng(mix_seed(p.video_seed, kQueryStream));
      const Instance inst = sample_instance(cat, c, inst_rng);
      p.query_tokens = sample_query(cat, inst, c, query_rng);
      task.pairs.push_back(std::move(p));
    }
  }
  return task;
}

}  // namespace

std::int32_t appearance_token(const StreamConfig& c, std::size_t dim, bool negative, std::size_t bucket) {
  return static_cast<std::int32_t>(2 + (dim * 2 + (negative ? 1 : 0)) * c.magnitude_buckets + bucket);
}

std::int32_t motion_token(const StreamConfig& c, std::size_t dim, bool negative) {
  return static_cast<std::int32_t>(2 + c.latent_dim * 2 * c.magnitude_buckets + dim * 2 + (negative ? 1 : 0));
}

std::vector<const Pair*> Task::split(bool test) const {
  std::vector<const Pair*> out;
  for (const auto& p : pairs)
    if (p.test == test) out.push_back(&p);
  return out;
}

const CategoryLatent& TaskStream::category(std::uint32_t id) const {
  for (const auto& c : categories)
    if (c.id == id) return c;
  throw UsageError("unknown category id " + std::to_string(id));
}

TaskStream generate_stream(const StreamConfig& config) {
  validate(config);
  TaskStream stream;
  stream.config = config;
  Rng rng(config.seed);

  auto& w = stream.world;
  w.latent_dim = config.latent_dim;
  w.patches = config.patches;
  w.input_width = config.input_width;
  w.render.resize(config.patches * config.input_width * config.latent_dim);
  const double rs = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
  for (auto& v : w.render) v = rng.normal(0.0, rs);

  const std::size_t total = config.base_categories + config.tasks * config.cats_per_task;
  for (std::uint32_t id = 0; id < total; ++id) {
    stream.categories.push_back(make_category(id, config, rng, stream.categories));
  }

  std::uint64_t next_video_id = 0;
  std::vector<std::uint32_t> base_ids;
  for (std::uint32_t id = 0; id < config.base_categories; ++id) base_ids.push_back(id);
  stream.base = make_task(0, base_ids, stream, config.base_videos_per_cat, next_video_id);
  for (auto& p : stream.base.pairs) p.test = false;

  std::vector<std::uint32_t> continual;
  for (auto id = static_cast<std::uint32_t>(config.base_categories); id < total; ++id) continual.push_back(id);
  rng.shuffle(continual);
  for (std::size_t t = 0; t < config.tasks; ++t) {
    std::vector<std::uint32_t> cats(continual.begin() + static_cast<long>(t * config.cats_per_task),
                                    continual.begin() + static_cast<long>((t + 1) * config.cats_per_task));
    std::sort(cats.begin(), cats.end());
    stream.tasks.push_back(make_task(static_cast<std::uint32_t>(t + 1), cats, stream, config.videos_per_cat, next_video_id));
  }
  return stream;
}

Instance sample_instance(const CategoryLatent& latent, const StreamConfig& config, Rng& rng) {
  Instance inst;
  inst.offset.resize(latent.video_center.size());
  for (auto& v : inst.offset) v = rng.normal(0.0, config.instance_scale);
  return inst;
}

namespace {

std::vector<std::vector<double>> latent_path(const CategoryLatent& latent, const Instance& instance,
                                             const StreamConfig& config, Rng& rng) {
  const std::size_t m_count = config.frames, dim = latent.video_center.size();
  std::vector<std::vector<double>> z(m_count, std::vector<double>(dim));
  std::vector<double> noise(dim);
  for (auto& n : noise) n = rng.normal(0.0, config.frame_noise);
  const double rho = config.frame_noise_corr;
  const double innov = std::sqrt(1.0 - rho * rho);
  for (std::size_t m = 0; m < m_count; ++m) {
    if (m > 0)
      for (auto& n : noise) n = rho * n + innov * rng.normal(0.0, config.frame_noise);
    const double phase = m_count > 1 ? static_cast<double>(m) / static_cast<double>(m_count - 1) - 0.5 : 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      z[m][d] = latent.video_center[d] + instance.offset[d] + phase * latent.drift[d] + noise[d];
    }
  }
  return z;
}

}  // namespace

Video sample_video(const CategoryLatent& latent, const Instance& instance, const World& world,
                   const StreamConfig& config, Rng& rng) {
  const auto z = latent_path(latent, instance, config, rng);
  Video video;
  video.frames = config.frames;
  video.patches = world.patches;
  video.width = world.input_width;
  video.data.resize(video.frames * video.patches * video.width);
  for (std::size_t m = 0; m < video.frames; ++m)
    for (std::size_t p = 0; p < video.patches; ++p)
      for (std::size_t i = 0; i < video.width; ++i) {
        const double* g = world.render.data() + (p * world.input_width + i) * world.latent_dim;
        double acc = 0.0;
        for (std::size_t d = 0; d < world.latent_dim; ++d) acc += g[d] * z[m][d];
        video.data[(m * video.patches + p) * video.width + i] = acc + rng.normal(0.0, config.patch_noise);
      }
  return video;
}

std::vector<std::int32_t> sample_query(const CategoryLatent& latent, const Instance& instance,
                                       const StreamConfig& config, Rng& rng) {
  std::discrete_distribution<std::size_t> pick(latent.token_profile.begin(), latent.token_profile.end());
  const std::int32_t motion_base = motion_token(config, 0, false);
  std::vector<std::int32_t> out;
  out.reserve(config.query_len + 1);
  std::mt19937_64 engine(rng.next());
  for (std::size_t i = 0; i < config.query_len; ++i) {
    auto tok = static_cast<std::int32_t>(pick(engine));
    if (tok < motion_base) {
      // Re-bucket appearance tokens by this instance's magnitude on the dim.
      const std::size_t rel = static_cast<std::size_t>(tok - 2);
      const std::size_t dim = rel / (2 * config.magnitude_buckets);
      const bool neg = (rel / config.magnitude_buckets) % 2 == 1;
      const double value = latent.video_center[dim] + instance.offset[dim];
      const double magnitude = neg ? std::max(0.0, -value) : std::max(0.0, value);
      tok = appearance_token(config, dim, neg, magnitude_bucket(magnitude, config.magnitude_buckets));
    }
    out.push_back(tok);
  }
  out.push_back(kEosToken);
  return out;
}

Video render_video(const TaskStream& stream, const Pair& pair) {
  const auto& cat = stream.category(pair.category);
  Rng inst_rng(mix_seed(pair.video_seed, kInstanceStream));
  Rng video_rng(mix_seed(pair.video_seed, kVideoStream));
  const Instance inst = sample_instance(cat, stream.config, inst_rng);
  return sample_video(cat, inst, stream.world, stream.config, video_rng);
}

std::vector<std::vector<double>> frame_latents(const TaskStream& stream, const Pair& pair) {
  const auto& cat = stream.category(pair.category);
  Rng inst_rng(mix_seed(pair.video_seed, kInstanceStream));
  Rng video_rng(mix_seed(pair.video_seed, kVideoStream));
  const Instance inst = sample_instance(cat, stream.config, inst_rng);
  return latent_path(cat, inst, stream.config, video_rng);
}

void write_manifest(std::ostream& out, const TaskStream& stream) {
  for (const auto& task : stream.tasks) {
    for (const auto& p : task.pairs) {
      nlohmann::ordered_json j;
      j["task"] = p.task;
      j["category"] = p.category;
      j["video_id"] = p.video_id;
      j["query_tokens"] = p.query_tokens;
      j["video_seed"] = p.video_seed;
      j["test"] = p.test;
      out << j.dump() << '\n';
    }
  }
}

std::vector<Pair> read_manifest(std::istream& in) {
  std::vector<Pair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Pair p;
      p.task = j.at("task").get<std::uint32_t>();
      p.category = j.at("category").get<std::uint32_t>();
      p.video_id = j.at("video_id").get<std::uint64_t>();
      p.query_tokens = j.at("query_tokens").get<std::vector<std::int32_t>>();
      p.video_seed = j.at("video_seed").get<std::uint64_t>();
      p.test = j.value("test", false);
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace ctvr::data
