// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ctvr/backbone.hpp"
#include "ctvr/eval.hpp"
#include "ctvr/featuredb.hpp"
#include "ctvr/model.hpp"
#include "ctvr/taskgen.hpp"

namespace ctvr::harness {

struct RunConfig {
  data::StreamConfig stream;
  backbone::BackboneConfig backbone;
  backbone::PretrainConfig pretrain;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double beta = 0.6;
  std::size_t attach_depth = 2;
  std::size_t experts = 5;
  std::size_t top_k = 2;
  std::size_t rank = 4;
  double lambda = 1.0;
  double tau = 0.05;
  std::size_t ref_negatives = 64;  // cached features drawn per step for the cross-task loss
  bool no_ffa = false;
  bool no_tame = false;
  bool no_tp = false;
  bool no_ct = false;
  std::uint64_t seed = 3;
  eval::Scoring scoring = eval::Scoring::kTaskMatched;

  // Throws ConfigError naming the first offending field.
  void validate() const;
};

// Model settings after the ablation flags are applied.
model::ModelConfig apply_ablation(const RunConfig& config);
model::Model build_model(const backbone::BackboneParams& frozen, const RunConfig& config);

// Cross-task weight used while training task t.
double effective_beta(const RunConfig& config, std::size_t t);

// Gatekeeper over the raw task stream. While task t is open for training
// only D_t can be read; evaluation may read query tokens of seen tasks.
class StreamAccess {
 public:
  enum class Phase { kIdle, kTraining, kExtraction, kEvaluation };

  struct Read {
    Phase phase;
    std::size_t window;  // task open at the time
    std::uint32_t task;  // task whose data was read
  };

  explicit StreamAccess(const data::TaskStream& stream) : stream_(stream) {}

  void open(Phase phase, std::size_t t);
  void close() { phase_ = Phase::kIdle; }

  const data::Task& task(std::size_t t);
  data::Video render(const data::Pair& pair);
  // Test pairs of tasks 1..t; query tokens only are meant to be consumed.
  std::vector<const data::Pair*> test_queries(std::size_t t);

  const std::vector<Read>& log() const { return log_; }
  const data::TaskStream& stream() const { return stream_; }
  std::size_t tasks() const { return stream_.tasks.size(); }

 private:
  void check(std::uint32_t task);

  const data::TaskStream& stream_;
  Phase phase_ = Phase::kIdle;
  std::size_t window_ = 0;
  std::vector<Read> log_;
};

struct TrainStats {
  std::size_t task = 0;
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  double beta = 0.0;
  std::size_t references = 0;  // cached features available as extra negatives
  std::size_t db_reads = 0;
  std::set<std::string> changed;  // adapter entries whose values moved
};

TrainStats train_task(model::Model& model, StreamAccess& access, std::size_t t, const featuredb::FeatureStore& db,
                      const RunConfig& config);

struct ExtractionLog {
  std::vector<std::size_t> extracted;  // tasks, in order
  std::size_t historical_reextractions = 0;
};

// Encodes the test videos of task t with the current model and appends them
// to the store under task t.
std::vector<featuredb::VideoFeatureRecord> extract_and_store(const model::Model& model, StreamAccess& access,
                                                             std::size_t t, featuredb::FeatureStore& db,
                                                             ExtractionLog& log);

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // per-task checkpoint of model, store, ledger, report
  std::function<void(const std::string&)> progress;
};

struct RunResult {
  eval::RunLedger ledger;
  eval::MetricsReport final_report;
  std::vector<TrainStats> training;
  ExtractionLog extraction;
  featuredb::FeatureStore db;
  std::uint64_t backbone_checksum_before = 0;
  std::uint64_t backbone_checksum_after = 0;
  std::set<std::string> changed;  // union over tasks
  std::vector<StreamAccess::Read> access_log;

  double mean_bwf() const;  // mean of BWF_t over t >= 2
};

RunResult run_stream(const data::TaskStream& stream, const backbone::BackboneParams& frozen, const RunConfig& config,
                     const RunOptions& options = {});

}  // namespace ctvr::harness
