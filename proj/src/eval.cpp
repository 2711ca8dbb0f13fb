// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include "ctvr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "ctvr/errors.hpp"
#include "ctvr/model.hpp"
#include "json.hpp"

namespace ctvr::eval {

namespace {

// Unit-length copy of each row; zero rows stay zero and are counted.
std::vector<double> normalized_rows(std::span<const double> values, std::size_t width, std::size_t* zero_rows) {
  std::vector<double> out(values.begin(), values.end());
  for (std::size_t r = 0; r * width < out.size(); ++r) {
    double* row = out.data() + r * width;
    double ss = 0.0;
    for (std::size_t c = 0; c < width; ++c) ss += row[c] * row[c];
    if (ss == 0.0) {
      if (zero_rows) ++*zero_rows;
      continue;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t c = 0; c < width; ++c) row[c] *= inv;
  }
  return out;
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  const double s = scores[target];
  std::size_t ahead = 0;
  for (std::size_t v = 0; v < scores.size(); ++v)
    if (scores[v] > s || (scores[v] == s && v < target)) ++ahead;
  return ahead + 1;
}

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  const auto na = normalized_rows(a, a.size(), nullptr);
  const auto nb = normalized_rows(b, b.size(), nullptr);
  return dot(na.data(), nb.data(), a.size());
}

std::vector<std::size_t> rank_videos(std::span<const double> q, const nn::Tensor& pool) {
  if (!pool.defined() || pool.rank() != 2 || pool.dim(0) == 0) throw DimensionError("rank_videos: empty pool");
  const std::size_t width = pool.dim(1);
  if (q.size() != width) throw DimensionError("rank_videos: query width differs from pool width");
  const auto qn = normalized_rows(q, width, nullptr);
  const auto pn = normalized_rows(pool.values(), width, nullptr);
  std::vector<double> scores(pool.dim(0));
  for (std::size_t v = 0; v < scores.size(); ++v) scores[v] = dot(qn.data(), pn.data() + v * width, width);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (auto r : ranks) {
    if (r < 1) throw UsageError("ranks are 1-based");
    if (r <= k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

std::pair<double, double> median_mean_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw UsageError("median_mean_rank: no ranks");
  std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? static_cast<double>(sorted[n / 2])
                                   : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
  double total = 0.0;
  for (auto r : sorted) total += static_cast<double>(r);
  return {median, total / static_cast<double>(n)};
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["scoring"] = scoring;
  j["pool_size"] = pool_size;
  j["queries"] = queries;
  j["r1"] = r1;
  j["r5"] = r5;
  j["r10"] = r10;
  j["medr"] = medr;
  j["meanr"] = meanr;
  j["bwf"] = bwf;
  j["zero_norm_features"] = zero_norm_features;
  auto per = nlohmann::ordered_json::array();
  for (const auto& tr : per_task) {
    nlohmann::ordered_json e;
    e["task"] = tr.task;
    e["queries"] = tr.queries;
    e["r1"] = tr.r1;
    per.push_back(e);
  }
  j["per_task"] = per;
  return j.dump(2) + "\n";
}

void RunLedger::set(std::size_t t, std::size_t i, double r1) {
  if (i < 1 || i > t) throw ProtocolError("ledger entry (" + std::to_string(t) + "," + std::to_string(i) + ") outside the lower triangle");
  if (i < t && !has(i, i)) {
    throw ProtocolError("ledger entry (" + std::to_string(t) + "," + std::to_string(i) + ") before diagonal (" +
                        std::to_string(i) + "," + std::to_string(i) + ")");
  }
  if (rows_.size() < t) rows_.resize(t);
  rows_[t - 1][i] = r1;
}

bool RunLedger::has(std::size_t t, std::size_t i) const {
  return t >= 1 && t <= rows_.size() && rows_[t - 1].count(i) > 0;
}

double RunLedger::at(std::size_t t, std::size_t i) const {
  if (!has(t, i)) throw ProtocolError("ledger entry (" + std::to_string(t) + "," + std::to_string(i) + ") not populated");
  return rows_[t - 1].at(i);
}

std::size_t RunLedger::row_size(std::size_t t) const {
  return t >= 1 && t <= rows_.size() ? rows_[t - 1].size() : 0;
}

std::string RunLedger::to_jsonl() const {
  std::string out;
  for (std::size_t t = 1; t <= rows_.size(); ++t)
    for (const auto& [i, r1] : rows_[t - 1]) {
      nlohmann::ordered_json j;
      j["t"] = t;
      j["i"] = i;
      j["r1"] = r1;
      out += j.dump() + "\n";
    }
  return out;
}

double backward_forgetting(const RunLedger& ledger, std::size_t t) {
  if (t <= 1) return 0.0;
  double total = 0.0;
  for (std::size_t i = 1; i < t; ++i) total += ledger.at(i, i) - ledger.at(t, i);
  return total / static_cast<double>(t - 1);
}

std::string scoring_name(Scoring scoring) {
  return scoring == Scoring::kTaskMatched ? "task_matched" : "max_over_tasks";
}

Scoring parse_scoring(const std::string& name) {
  if (name == "task_matched") return Scoring::kTaskMatched;
  if (name == "max_over_tasks") return Scoring::kMaxOverTasks;
  throw ConfigError("unknown scoring '" + name + "' (expected task_matched or max_over_tasks)");
}

std::vector<std::size_t> ground_truth_ranks(std::span<const nn::Tensor> conditional, const featuredb::FeatureRange& pool,
                                            std::span<const std::uint64_t> target_ids, Scoring scoring,
                                            std::size_t* zero_norm) {
  if (conditional.empty()) throw ProtocolError("ground_truth_ranks: no conditional query features");
  if (pool.size() == 0) throw ProtocolError("ground_truth_ranks: empty pool");
  const std::size_t width = pool.features.dim(1);
  const std::size_t nq = target_ids.size();
  std::vector<std::vector<double>> qn;
  for (const auto& c : conditional) {
    if (c.rank() != 2 || c.dim(0) != nq || c.dim(1) != width) {
      throw DimensionError("ground_truth_ranks: conditional features " + nn::shape_str(c.shape()) + " for " +
                           std::to_string(nq) + " queries of width " + std::to_string(width));
    }
    qn.push_back(normalized_rows(c.values(), width, zero_norm));
  }
  const auto pn = normalized_rows(pool.features.values(), width, zero_norm);
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t v = 0; v < pool.size(); ++v) index.emplace(pool.video_ids[v], v);
  if (scoring == Scoring::kTaskMatched)
    for (auto task : pool.task_ids)
      if (task < 1 || task > conditional.size()) {
        throw ProtocolError("pool holds task " + std::to_string(task) + " but only " +
                            std::to_string(conditional.size()) + " prototypes exist");
      }

  std::vector<std::size_t> ranks(nq);
  std::vector<double> scores(pool.size());
  for (std::size_t j = 0; j < nq; ++j) {
    auto it = index.find(target_ids[j]);
    if (it == index.end()) throw ProtocolError("video " + std::to_string(target_ids[j]) + " is not in the pool");
    for (std::size_t v = 0; v < pool.size(); ++v) {
      const double* pv = pn.data() + v * width;
      if (scoring == Scoring::kTaskMatched) {
        scores[v] = dot(qn[pool.task_ids[v] - 1].data() + j * width, pv, width);
      } else {
        double best = dot(qn[0].data() + j * width, pv, width);
        for (std::size_t i = 1; i < qn.size(); ++i) best = std::max(best, dot(qn[i].data() + j * width, pv, width));
        scores[v] = best;
      }
    }
    ranks[j] = rank_of(scores, it->second);
  }
  return ranks;
}

MetricsReport summarize(std::span<const std::size_t> ranks, std::span<const std::uint32_t> query_tasks) {
  if (ranks.size() != query_tasks.size()) throw DimensionError("summarize: one task per rank expected");
  MetricsReport r;
  r.queries = ranks.size();
  if (ranks.empty()) return r;
  r.r1 = recall_at_k(ranks, 1);
  r.r5 = recall_at_k(ranks, 5);
  r.r10 = recall_at_k(ranks, 10);
  std::tie(r.medr, r.meanr) = median_mean_rank(ranks);
  std::map<std::uint32_t, std::vector<std::size_t>> by_task;
  for (std::size_t j = 0; j < ranks.size(); ++j) by_task[query_tasks[j]].push_back(ranks[j]);
  for (const auto& [task, rs] : by_task) r.per_task.push_back({task, rs.size(), recall_at_k(rs, 1)});
  return r;
}

MetricsReport evaluate_checkpoint(const model::Model& model, const featuredb::FeatureStore& db,
                                  std::span<const data::Pair* const> queries, std::size_t t, RunLedger* ledger,
                                  Scoring scoring) {
  if (t < 1) throw ProtocolError("evaluate_checkpoint: t must be >= 1");
  if (db.max_task() < t) {
    throw ProtocolError("feature store holds tasks up to " + std::to_string(db.max_task()) + ", evaluation needs " +
                        std::to_string(t));
  }
  std::vector<const std::vector<std::int32_t>*> tokens;
  std::vector<std::uint64_t> targets;
  std::vector<std::uint32_t> tasks;
  for (const auto* p : queries) {
    if (p->task < 1 || p->task > t) continue;
    tokens.push_back(&p->query_tokens);
    targets.push_back(p->video_id);
    tasks.push_back(p->task);
  }
  if (tokens.empty()) throw ProtocolError("evaluate_checkpoint: no queries for tasks 1.." + std::to_string(t));

  const featuredb::FeatureRange pool = db.load_range(static_cast<std::uint32_t>(t));
  std::vector<nn::Tensor> conditional;
  {
    nn::NoGradGuard guard;
    conditional = model.conditional_query_sweep(std::span<const std::vector<std::int32_t>* const>(tokens));
  }
  std::size_t zero = 0;
  const auto ranks = ground_truth_ranks(conditional, pool, targets, scoring, &zero);
  MetricsReport report = summarize(ranks, tasks);
  report.checkpoint = t;
  report.pool_size = pool.size();
  report.zero_norm_features = zero;
  report.scoring = scoring_name(scoring);
  if (ledger) {
    for (std::size_t i = 1; i <= t; ++i) {
      double r1 = 0.0;
      for (const auto& tr : report.per_task)
        if (tr.task == i) r1 = tr.r1;
      ledger->set(t, i, r1);
    }
    report.bwf = backward_forgetting(*ledger, t);
    ledger->reports.push_back(report);
  }
  return report;
}

}  // namespace ctvr::eval
