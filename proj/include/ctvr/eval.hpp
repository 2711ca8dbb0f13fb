// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctvr/featuredb.hpp"
#include "ctvr/taskgen.hpp"
#include "ctvr/tensor.hpp"

namespace ctvr::model {
class Model;
}

namespace ctvr::eval {

// Cosine similarity; 0 when either side has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

// Pool indices by descending cosine similarity to q, ties by ascending index.
std::vector<std::size_t> rank_videos(std::span<const double> q, const nn::Tensor& pool);

// Percentage of ranks (1-based) that are <= k.
double recall_at_k(std::span<const std::size_t> ranks, std::size_t k);

// (median, mean); an even count takes the mean of the two middle ranks.
std::pair<double, double> median_mean_rank(std::span<const std::size_t> ranks);

struct TaskRecall {
  std::uint32_t task = 0;
  std::size_t queries = 0;
  double r1 = 0.0;
};

struct MetricsReport {
  std::size_t checkpoint = 0;  // tasks trained so far
  std::size_t pool_size = 0;
  std::size_t queries = 0;
  double r1 = 0, r5 = 0, r10 = 0;
  double medr = 0, meanr = 0;
  double bwf = 0;
  std::vector<TaskRecall> per_task;
  std::size_t zero_norm_features = 0;
  std::string scoring = "task_matched";

  std::string to_json() const;
};

// Lower-triangular R@1 matrix: entry (t, i) is R@1 on task-i queries after
// training task t. A diagonal entry must exist before any entry below it.
class RunLedger {
 public:
  void set(std::size_t t, std::size_t i, double r1);
  bool has(std::size_t t, std::size_t i) const;
  double at(std::size_t t, std::size_t i) const;
  std::size_t rows() const { return rows_.size(); }
  std::size_t row_size(std::size_t t) const;

  std::vector<MetricsReport> reports;

  // One JSON object per line: {"t":..,"i":..,"r1":..}.
  std::string to_jsonl() const;

 private:
  std::vector<std::map<std::size_t, double>> rows_;
};

// Mean over i < t of R(i,i) - R(t,i); 0 for t = 1.
double backward_forgetting(const RunLedger& ledger, std::size_t t);

enum class Scoring { kTaskMatched, kMaxOverTasks };
std::string scoring_name(Scoring scoring);
Scoring parse_scoring(const std::string& name);

// Ground-truth rank of every query. conditional[i] holds the [n × O] query
// features under prototype i+1. Task-matched scoring compares a query with
// a pool video of task j through conditional[j-1]; max-over-tasks takes the
// best prototype per video. All scores are sorted globally.
std::vector<std::size_t> ground_truth_ranks(std::span<const nn::Tensor> conditional,
                                            const featuredb::FeatureRange& pool,
                                            std::span<const std::uint64_t> target_ids, Scoring scoring,
                                            std::size_t* zero_norm = nullptr);

// Aggregates ranks into a report. query_tasks gives each query's task.
MetricsReport summarize(std::span<const std::size_t> ranks, std::span<const std::uint32_t> query_tasks);

// Scores the test queries of tasks 1..t against every stored video of
// tasks 1..t. When a ledger is given, row t is filled and bwf computed.
MetricsReport evaluate_checkpoint(const model::Model& model, const featuredb::FeatureStore& db,
                                  std::span<const data::Pair* const> queries, std::size_t t,
                                  RunLedger* ledger = nullptr, Scoring scoring = Scoring::kTaskMatched);

}  // namespace ctvr::eval
