// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/harness.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "ctvr/errors.hpp"
#include "ctvr/losses.hpp"
#include "ctvr/ops.hpp"
#include "ctvr/optim.hpp"

namespace ctvr::harness {

using nn::Tensor;

void RunConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive("epochs", static_cast<double>(epochs));
  positive("batch_size", static_cast<double>(batch_size));
  positive("lr", lr);
  positive("experts", static_cast<double>(experts));
  positive("top_k", static_cast<double>(top_k));
  positive("rank", static_cast<double>(rank));
  positive("tau", tau);
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for a contrastive batch");
  if (top_k > experts) throw ConfigError("top_k must not exceed experts");
  if (beta < 0 || beta > 1) throw ConfigError("beta must lie in [0, 1]");
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  if (stream.tasks == 0) throw ConfigError("tasks must be positive");
}

model::ModelConfig apply_ablation(const RunConfig& config) {
  model::ModelConfig m;
  m.attach_depth = config.no_ffa ? 0 : config.attach_depth;
  m.tame.experts = config.experts;
  m.tame.top_k = config.top_k;
  m.tame.rank = config.rank;
  m.tame.lambda = config.no_tame ? 0.0 : config.lambda;
  m.tame_enabled = !config.no_tame;
  m.prototypes_pinned = config.no_tp;
  m.seed = mix_seed(config.seed, 0x40DE1);
  return m;
}

model::Model build_model(const backbone::BackboneParams& frozen, const RunConfig& config) {
  backbone::BackboneParams copy;
  copy.config = frozen.config;
  // Fresh tensors so the run can never write into the caller's backbone.
  for (const auto& [name, t] : frozen.params.entries()) copy.params.add(name, t.detach());
  return model::Model(std::move(copy), apply_ablation(config));
}

double effective_beta(const RunConfig& config, std::size_t t) { return (t <= 1 || config.no_ct) ? 0.0 : config.beta; }

// ---- stream guard ----

void StreamAccess::open(Phase phase, std::size_t t) {
  if (t < 1 || t > stream_.tasks.size()) throw ProtocolError("no task " + std::to_string(t) + " in the stream");
  phase_ = phase;
  window_ = t;
}

void StreamAccess::check(std::uint32_t task) {
  const bool ok = phase_ == Phase::kEvaluation ? (task >= 1 && task <= window_) : (phase_ != Phase::kIdle && task == window_);
  if (!ok) {
    throw ProtocolError("restricted access: task " + std::to_string(task) + " data requested while task " +
                        std::to_string(window_) + " is open");
  }
  log_.push_back({phase_, window_, task});
}

const data::Task& StreamAccess::task(std::size_t t) {
  check(static_cast<std::uint32_t>(t));
  return stream_.tasks[t - 1];
}

data::Video StreamAccess::render(const data::Pair& pair) {
  if (phase_ == Phase::kEvaluation) throw ProtocolError("evaluation reads stored features, not raw videos");
  check(pair.task);
  return data::render_video(stream_, pair);
}

std::vector<const data::Pair*> StreamAccess::test_queries(std::size_t t) {
  if (phase_ != Phase::kEvaluation) throw ProtocolError("test queries are only served during evaluation");
  std::vector<const data::Pair*> out;
  for (std::size_t i = 1; i <= t; ++i) {
    check(static_cast<std::uint32_t>(i));
    for (const auto* p : stream_.tasks[i - 1].split(true)) out.push_back(p);
  }
  return out;
}

// ---- training ----

namespace {

std::map<std::string, std::vector<double>> snapshot(const nn::ParameterSet& params) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : params.entries()) out[name].assign(t.values().begin(), t.values().end());
  return out;
}

}  // namespace

TrainStats train_task(model::Model& model, StreamAccess& access, std::size_t t, const featuredb::FeatureStore& db,
                      const RunConfig& config) {
  if (model.bank().size() + 1 != t) {
    throw ProtocolError("train_task(" + std::to_string(t) + ") after " + std::to_string(model.bank().size()) +
                        " trained tasks");
  }
  if (db.max_task() + 1 != t) {
    throw ProtocolError("feature store holds tasks up to " + std::to_string(db.max_task()) + " before task " +
                        std::to_string(t));
  }
  const std::uint64_t backbone_before = model.backbone().checksum();
  model.begin_task(t);
  const auto before = snapshot(model.adapters());

  access.open(StreamAccess::Phase::kTraining, t);
  const data::Task& task = access.task(t);
  const auto pairs = task.split(false);
  std::vector<data::Video> videos;
  videos.reserve(pairs.size());
  for (const auto* p : pairs) videos.push_back(access.render(*p));
  access.close();
  if (pairs.size() < 2) throw ProtocolError("task " + std::to_string(t) + " has fewer than two training pairs");

  TrainStats stats;
  stats.task = t;
  stats.beta = effective_beta(config, t);

  // With no FFA the video path is frozen and can be encoded once.
  Tensor cached_video;
  if (model.ffa().attach_depth() == 0) {
    nn::NoGradGuard guard;
    std::vector<const data::Video*> all;
    for (const auto& v : videos) all.push_back(&v);
    cached_video = model.encode_videos(all);
  }
  featuredb::FeatureRange refs;
  if (stats.beta > 0.0) {
    refs = db.load_range(static_cast<std::uint32_t>(t - 1));
    stats.db_reads = 1;
    stats.references = refs.size();
  }

  const bool trainable = !model.adapters().trainable_names().empty();
  nn::Optimizer opt(nn::OptimizerScheme::kAdam);
  Rng rng(mix_seed(config.seed, 0x7A5C00 + t));
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::min(config.batch_size, pairs.size());
  const std::size_t steps_per_epoch = (pairs.size() + bs - 1) / bs;
  const std::size_t total = steps_per_epoch * config.epochs;
  std::vector<std::size_t> ref_order(refs.size());
  std::iota(ref_order.begin(), ref_order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) continue;
      std::vector<std::size_t> rows(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      std::vector<const std::vector<std::int32_t>*> qb;
      for (auto r : rows) qb.push_back(&pairs[r]->query_tokens);

      losses::SimilarityBatch batch;
      batch.tau = config.tau;
      if (cached_video.defined()) {
        batch.v = nn::gather_rows(cached_video, rows);
      } else {
        std::vector<const data::Video*> vb;
        for (auto r : rows) vb.push_back(&videos[r]);
        batch.v = model.encode_videos(vb);
      }
      batch.q = model.encode_queries(qb, t);
      if (stats.beta > 0.0 && refs.size() > 0) {
        const std::size_t n = std::min(config.ref_negatives, refs.size());
        for (std::size_t i = 0; i < n; ++i) std::swap(ref_order[i], ref_order[i + rng.index(refs.size() - i)]);
        std::vector<std::size_t> pick(ref_order.begin(), ref_order.begin() + static_cast<long>(n));
        batch.refs = nn::gather_rows(refs.features, pick);
      }
      const Tensor loss = losses::total_loss(batch, stats.beta);
      if (trainable) {
        const auto grads = nn::backward(loss, model.adapters());
        opt.step(model.adapters(), grads, nn::cosine_lr(config.lr, stats.steps, total));
      }
      ++stats.steps;
      epoch_loss += loss.item();
      ++batches;
    }
    stats.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  model.adapters().round_to_float();

  const auto after = snapshot(model.adapters());
  for (const auto& [name, values] : after) {
    auto it = before.find(name);
    if (it == before.end() || it->second != values) stats.changed.insert(name);
  }
  if (model.backbone().checksum() != backbone_before) throw ProtocolError("backbone changed during train_task");
  return stats;
}

std::vector<featuredb::VideoFeatureRecord> extract_and_store(const model::Model& model, StreamAccess& access,
                                                             std::size_t t, featuredb::FeatureStore& db,
                                                             ExtractionLog& log) {
  if (std::find(log.extracted.begin(), log.extracted.end(), t) != log.extracted.end()) {
    throw ProtocolError("task " + std::to_string(t) + " features were already extracted");
  }
  if (model.bank().size() != t) {
    throw ProtocolError("extract_and_store(" + std::to_string(t) + ") must follow train_task(" + std::to_string(t) + ")");
  }
  access.open(StreamAccess::Phase::kExtraction, t);
  const auto pairs = access.task(t).split(true);
  std::vector<data::Video> videos;
  for (const auto* p : pairs) {
    if (p->task < t) ++log.historical_reextractions;
    videos.push_back(access.render(*p));
  }
  access.close();

  std::vector<const data::Video*> ptrs;
  for (const auto& v : videos) ptrs.push_back(&v);
  Tensor features;
  {
    nn::NoGradGuard guard;
    features = model.encode_videos(ptrs);
  }
  const std::size_t width = model.width();
  std::vector<featuredb::VideoFeatureRecord> records;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    featuredb::VideoFeatureRecord r;
    r.task_id = static_cast<std::uint32_t>(t);
    r.video_id = pairs[i]->video_id;
    r.category_id = pairs[i]->category;
    r.feature.resize(width);
    for (std::size_t c = 0; c < width; ++c) r.feature[c] = static_cast<float>(features.at(i, c));
    records.push_back(std::move(r));
  }
  db.append_task_features(static_cast<std::uint32_t>(t), records);
  log.extracted.push_back(t);
  return records;
}

double RunResult::mean_bwf() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : ledger.reports)
    if (r.checkpoint >= 2) {
      total += r.bwf;
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

RunResult run_stream(const data::TaskStream& stream, const backbone::BackboneParams& frozen, const RunConfig& config,
                     const RunOptions& options) {
  config.validate();
  if (!frozen.frozen()) throw UsageError("run_stream expects a frozen backbone");
  RunResult result;
  result.backbone_checksum_before = frozen.checksum();
  model::Model model = build_model(frozen, config);
  result.db = featuredb::FeatureStore(static_cast<std::uint32_t>(model.width()));
  StreamAccess access(stream);

  std::filesystem::path store_path;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    store_path = *options.out_dir / "features.fdb";
    featuredb::write_store(store_path, result.db);
  }

  for (std::size_t t = 1; t <= stream.tasks.size(); ++t) {
    TrainStats stats = train_task(model, access, t, result.db, config);
    result.changed.insert(stats.changed.begin(), stats.changed.end());
    const auto records = extract_and_store(model, access, t, result.db, result.extraction);

    access.open(StreamAccess::Phase::kEvaluation, t);
    const auto queries = access.test_queries(t);
    access.close();
    result.final_report = eval::evaluate_checkpoint(model, result.db, queries, t, &result.ledger, config.scoring);

    if (options.out_dir) {
      const auto& dir = *options.out_dir;
      model::save_model(dir / ("model_t" + std::to_string(t) + ".ckpt"), model);
      featuredb::append_task_file(store_path, static_cast<std::uint32_t>(t), records);
      write_text(dir / "ledger.jsonl", result.ledger.to_jsonl());
      write_text(dir / ("report_t" + std::to_string(t) + ".json"), result.final_report.to_json());
    }
    if (options.progress) {
      char line[160];
      std::snprintf(line, sizeof line, "task %zu: loss %.4f -> %.4f, R@1 %.2f, BWF %.2f", t,
                    stats.epoch_loss.front(), stats.epoch_loss.back(), result.final_report.r1, result.final_report.bwf);
      options.progress(line);
    }
    result.training.push_back(std::move(stats));
  }
  result.backbone_checksum_after = model.backbone().checksum();
  result.access_log = access.log();
  return result;
}

}  // namespace ctvr::harness
