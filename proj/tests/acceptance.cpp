// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Thresholds are fixed below.

#include <malloc.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ctvr/backbone.hpp"
#include "ctvr/eval.hpp"
#include "ctvr/featuredb.hpp"
#include "ctvr/ffa.hpp"
#include "ctvr/harness.hpp"
#include "ctvr/losses.hpp"
#include "ctvr/model.hpp"
#include "ctvr/ops.hpp"
#include "ctvr/tame.hpp"
#include "test_util.hpp"

namespace ctvr {
namespace {

using nn::Tensor;
using Clock = std::chrono::steady_clock;

// Pinned thresholds.
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kMinProbes = 20;
constexpr double kGradSuiteSeconds = 120.0;
constexpr double kIdentityTol = 1e-6;
constexpr std::size_t kOracleTrials = 200;
constexpr std::size_t kMaxOracleSize = 64;
constexpr double kLogNTol = 1e-9;
constexpr double kEmptyRefTol = 1e-12;
constexpr double kGateSumTol = 1e-12;
constexpr double kChanceMultiple = 3.0;
constexpr double kSeedRunSeconds = 600.0;
const std::vector<std::uint64_t> kTrendSeeds = {1, 2, 3};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int failures = 0;

void report(int n, const char* name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", n, name, detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---- shared default-stream runs -------------------------------------------

harness::RunConfig seed_config(std::uint64_t seed) {
  harness::RunConfig c;
  c.seed = c.stream.seed = c.backbone.seed = c.pretrain.seed = seed;
  return c;
}

struct SeedWorld {
  data::TaskStream stream;
  backbone::BackboneParams frozen;
  double pretrain_seconds = 0;
};

const SeedWorld& world(std::uint64_t seed) {
  static std::map<std::uint64_t, SeedWorld> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  const auto cfg = seed_config(seed);
  const auto t0 = Clock::now();
  SeedWorld w;
  w.stream = data::generate_stream(cfg.stream);
  w.frozen = backbone::init_backbone(cfg.backbone);
  backbone::pretrain_backbone(w.frozen, w.stream, cfg.pretrain);
  w.pretrain_seconds = seconds_since(t0);
  return cache.emplace(seed, std::move(w)).first->second;
}

struct VariantRun {
  harness::RunResult result;
  double seconds = 0;
};

harness::RunConfig variant_config(std::uint64_t seed, const std::string& variant) {
  auto c = seed_config(seed);
  c.no_ffa = variant == "no_ffa";
  c.no_tame = variant == "no_tame";
  return c;
}

std::filesystem::path run_dir(std::uint64_t seed, const std::string& variant) {
  return std::filesystem::temp_directory_path() / ("ctvr_acceptance_" + std::to_string(::getpid())) /
         (variant + "_" + std::to_string(seed));
}

const VariantRun& variant_run(std::uint64_t seed, const std::string& variant) {
  static std::map<std::pair<std::uint64_t, std::string>, VariantRun> cache;
  const auto key = std::make_pair(seed, variant);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const auto& w = world(seed);
  const auto dir = run_dir(seed, variant);
  std::filesystem::remove_all(dir);
  const auto t0 = Clock::now();
  VariantRun r;
  r.result = harness::run_stream(w.stream, w.frozen, variant_config(seed, variant), harness::RunOptions{dir, {}});
  r.seconds = seconds_since(t0);
  return cache.emplace(key, std::move(r)).first->second;
}

// ---- 1 ----------------------------------------------------------------------

losses::SimilarityBatch sim_batch(Tensor q, Tensor v, Tensor refs, double tau) {
  losses::SimilarityBatch b;
  b.q = std::move(q);
  b.v = std::move(v);
  b.refs = std::move(refs);
  b.tau = tau;
  return b;
}

void gradient_fidelity() {
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, testing::GradCheck>> checks;

  {
    Rng rng(101);
    auto stack = ffa::make_stack(1, 8, 2, rng, 0.4);
    auto& layer = stack.layers[0];
    layer.alpha = Tensor::scalar(0.7);
    Tensor prev = rng.normal_tensor({10, 8}, 1.0), cur = rng.normal_tensor({10, 8}, 1.0);
    const Tensor sa = rng.normal_tensor({10, 8}, 1.0), target = rng.normal_tensor({10, 8}, 1.0);
    auto f = [&] { return nn::sum(nn::mul(ffa::fuse_frame(layer, sa, ffa::cross_attend(layer, prev, cur, 2)), target)); };
    checks.emplace_back("ffa", testing::check_gradient(f, {layer.wq, layer.wk, layer.wv, layer.alpha, prev, cur}, 60, 102));
  }
  {
    Rng rng(103);
    tame::TameConfig c;
    c.experts = 4;
    c.top_k = 2;
    c.rank = 3;
    c.init_std = 0.5;
    auto a = tame::make_adapter(6, c, rng);
    for (auto& b : a.b) b = rng.normal_tensor({6, 3}, 0.4);
    a.lambda = 0.8;
    Tensor x = rng.normal_tensor({8, 6}, 1.0), w = rng.normal_tensor({6, 6}, 1.0);
    Tensor eos = rng.normal_tensor({2, 6}, 1.0), proto = rng.normal_tensor({6}, 0.3);
    const Tensor target = rng.normal_tensor({8, 6}, 1.0);
    auto f = [&] { return nn::sum(nn::mul(tame::adapted_linear(a, w, x, tame::route(a, eos, &proto), 4), target)); };
    std::vector<Tensor> leaves = {a.a, a.router, x, eos, proto};
    for (auto& b : a.b) leaves.push_back(b);
    checks.emplace_back("tame", testing::check_gradient(f, leaves, 90, 104));
  }
  {
    Rng rng(105);
    Tensor q = rng.normal_tensor({5, 6}, 1.0), v = rng.normal_tensor({5, 6}, 1.0), r = rng.normal_tensor({7, 6}, 1.0);
    auto v2t = [&] { return losses::infonce_pair(sim_batch(q, v, {}, 0.1)).v2t; };
    auto t2v = [&] { return losses::infonce_pair(sim_batch(q, v, {}, 0.1)).t2v; };
    auto ct = [&] { return losses::ct_loss(sim_batch(q, v, r, 0.1)); };
    auto total = [&] { return losses::total_loss(sim_batch(q, v, r, 0.05), 0.6); };
    checks.emplace_back("v2t", testing::check_gradient(v2t, {q, v}, 40, 106));
    checks.emplace_back("t2v", testing::check_gradient(t2v, {q, v}, 40, 107));
    checks.emplace_back("ct", testing::check_gradient(ct, {q, v, r}, 45, 108));
    checks.emplace_back("total", testing::check_gradient(total, {q, v, r}, 45, 109));
  }

  const double secs = seconds_since(t0);
  bool pass = secs < kGradSuiteSeconds;
  std::string detail;
  for (const auto& [name, c] : checks) {
    pass = pass && c.max_rel <= kGradRelTol && c.probes >= kMinProbes;
    detail += name + " " + fmt("%.1e", c.max_rel) + "/" + std::to_string(c.probes) + "p, ";
  }
  report(1, "gradient fidelity", pass, detail + fmt("%.1f s", secs));
}

// ---- 2 ----------------------------------------------------------------------

double max_f32_gap(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double gap = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    gap = std::max(gap, std::abs(static_cast<double>(static_cast<float>(a.values()[i])) -
                                 static_cast<double>(static_cast<float>(b.values()[i]))));
  return gap;
}

void identity_knobs() {
  const auto cfg = seed_config(1);
  const auto stream = data::generate_stream(cfg.stream);
  auto bb = backbone::init_backbone(cfg.backbone);
  bb.params.freeze_all();
  std::vector<data::Video> videos;
  std::vector<const std::vector<std::int32_t>*> queries;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& p = stream.tasks[0].pairs[i * 5];
    videos.push_back(data::render_video(stream, p));
    queries.push_back(&p.query_tokens);
  }
  std::vector<const data::Video*> vp;
  for (const auto& v : videos) vp.push_back(&v);
  Rng rng(201);
  nn::NoGradGuard guard;
  const Tensor plain_v = backbone::video_features(backbone::encode_video_batch(vp, bb));
  const Tensor plain_q = backbone::encode_text_batch(queries, bb).eos;

  auto mc = harness::apply_ablation(cfg);
  mc.attach_depth = 0;
  const double depth0 = max_f32_gap(model::Model(bb, mc).encode_videos(vp), plain_v);

  mc = harness::apply_ablation(cfg);
  model::Model zero_alpha(bb, mc);
  for (const auto& name : zero_alpha.adapters().names())
    if (name.rfind("ffa.", 0) == 0 && name.find("alpha") == std::string::npos)
      for (auto& v : zero_alpha.adapters().at(name).mutable_values()) v = rng.normal(0.0, 0.5);
  const double alpha0 = max_f32_gap(zero_alpha.encode_videos(vp), plain_v);

  mc = harness::apply_ablation(cfg);
  mc.tame.lambda = 0.0;
  model::Model zero_lambda(bb, mc);
  zero_lambda.begin_task(1);
  for (const auto& name : zero_lambda.adapters().names())
    if (name.find(".B.") != std::string::npos || name.rfind("proto.", 0) == 0)
      for (auto& v : zero_lambda.adapters().at(name).mutable_values()) v = rng.normal(0.0, 0.5);
  const double lambda0 = max_f32_gap(zero_lambda.encode_queries(queries, 1), plain_q);

  const bool pass = depth0 <= kIdentityTol && alpha0 <= kIdentityTol && lambda0 <= kIdentityTol;
  report(2, "identity knobs", pass,
         "depth=0 gap " + fmt("%.1e", depth0) + ", alpha=0 gap " + fmt("%.1e", alpha0) + ", lambda=0 gap " +
             fmt("%.1e", lambda0));
}

// ---- 3 ----------------------------------------------------------------------

void frozen_backbone() {
  const auto& w = world(1);
  const std::uint64_t before = w.frozen.checksum();
  const auto& r = variant_run(1, "full").result;
  bool prefixes = !r.changed.empty();
  std::string stray;
  for (const auto& name : r.changed) {
    const bool ok = name.rfind("ffa.", 0) == 0 || name.rfind("tame.", 0) == 0 || name.rfind("proto.", 0) == 0;
    if (!ok && stray.empty()) stray = name;
    prefixes = prefixes && ok;
  }
  const bool same = r.backbone_checksum_before == before && r.backbone_checksum_after == before &&
                    w.frozen.checksum() == before;
  report(3, "frozen backbone", same && prefixes && r.ledger.rows() == 5,
         std::string("checksum ") + (same ? "unchanged" : "CHANGED") + ", " + std::to_string(r.changed.size()) +
             " changed entries" + (stray.empty() ? "" : ", stray " + stray));
}

// ---- 4 ----------------------------------------------------------------------

double oracle_cos(const double* a, const double* b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  if (aa == 0 || bb == 0) return 0.0;
  return (ab / std::sqrt(aa)) / std::sqrt(bb);
}

std::vector<std::size_t> oracle_order(const std::vector<double>& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  return order;
}

void metric_oracles() {
  Rng rng(401);
  std::size_t mismatches = 0;
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial) {
    const std::size_t nq = 1 + rng.index(kMaxOracleSize), nv = nq + rng.index(kMaxOracleSize + 1 - nq);
    const std::size_t o = 2 + rng.index(7);
    // Continuous features plus exact duplicate rows, so every tie is a
    // bit-level tie under any evaluation order.
    std::vector<double> pv(nv * o);
    for (std::size_t v = 0; v < nv; ++v) {
      if (v > 0 && rng.uniform() < 0.2) {
        const std::size_t src = rng.index(v);
        std::copy_n(pv.begin() + src * o, o, pv.begin() + v * o);
      } else {
        for (std::size_t d = 0; d < o; ++d) pv[v * o + d] = rng.normal();
      }
    }
    const Tensor pool = Tensor::from({nv, o}, pv), q = rng.normal_tensor({nq, o}, 1.0);
    featuredb::FeatureRange range;
    range.features = pool;
    std::vector<std::uint64_t> targets(nq);
    std::vector<std::size_t> tix(nq);
    for (std::size_t v = 0; v < nv; ++v) {
      range.video_ids.push_back(7000 + v);
      range.task_ids.push_back(1);
      range.category_ids.push_back(0);
    }
    for (std::size_t j = 0; j < nq; ++j) targets[j] = 7000 + (tix[j] = rng.index(nv));
    const Tensor cond[] = {q};
    const auto ranks = eval::ground_truth_ranks(cond, range, targets, eval::Scoring::kTaskMatched);

    std::vector<std::size_t> want(nq);
    for (std::size_t j = 0; j < nq; ++j) {
      std::vector<double> s(nv);
      for (std::size_t v = 0; v < nv; ++v) s[v] = oracle_cos(q.values().data() + j * o, pv.data() + v * o, o);
      const auto order = oracle_order(s);
      want[j] = std::find(order.begin(), order.end(), tix[j]) - order.begin() + 1;
      if (j == 0 && eval::rank_videos(q.values().subspan(0, o), pool) != order) ++mismatches;
    }
    if (ranks != want) ++mismatches;
    for (std::size_t k : {1u, 5u, 10u}) {
      const auto hits = std::count_if(want.begin(), want.end(), [k](std::size_t r) { return r <= k; });
      if (eval::recall_at_k(ranks, k) != 100.0 * static_cast<double>(hits) / static_cast<double>(nq)) ++mismatches;
    }
    auto sorted = want;
    std::sort(sorted.begin(), sorted.end());
    const double med = nq % 2 ? static_cast<double>(sorted[nq / 2])
                              : 0.5 * static_cast<double>(sorted[nq / 2 - 1] + sorted[nq / 2]);
    const double mean = static_cast<double>(std::accumulate(want.begin(), want.end(), std::size_t{0})) /
                        static_cast<double>(nq);
    if (eval::median_mean_rank(ranks) != std::make_pair(med, mean)) ++mismatches;

    const std::size_t T = 1 + rng.index(6);
    eval::RunLedger ledger;
    std::vector<std::vector<double>> r(T + 1, std::vector<double>(T + 1));
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t i = 1; i <= t; ++i) ledger.set(t, i, r[t][i] = 1.25 * static_cast<double>(rng.index(81)));
    double drop = 0;
    for (std::size_t i = 1; i < T; ++i) drop += r[i][i] - r[T][i];
    if (eval::backward_forgetting(ledger, T) != (T == 1 ? 0.0 : drop / static_cast<double>(T - 1))) ++mismatches;
  }
  eval::RunLedger a, b;
  a.set(1, 1, 20);
  a.set(2, 2, 30);
  a.set(2, 1, 18);
  b.set(1, 1, 20);
  b.set(2, 2, 30);
  b.set(2, 1, 21);
  const double bwf_a = eval::backward_forgetting(a, 2), bwf_b = eval::backward_forgetting(b, 2);
  report(4, "metric oracles", mismatches == 0 && bwf_a == 2.0 && bwf_b == -1.0,
         std::to_string(kOracleTrials) + " trials, " + std::to_string(mismatches) + " mismatches, BWF examples " +
             fmt("%g", bwf_a) + " and " + fmt("%g", bwf_b));
}

// ---- 5 ----------------------------------------------------------------------

void feature_db_contract() {
  const auto& r = variant_run(1, "full").result;
  const auto file = run_dir(1, "full") / "features.fdb";
  const auto scratch = testing::scratch_dir("acceptance_fdb");

  const auto loaded = featuredb::read_store(file);
  featuredb::write_store(scratch / "rewrite.fdb", loaded);
  const bool round_trip = loaded.records() == r.db.records() && slurp(scratch / "rewrite.fdb") == slurp(file);

  bool prefix_kept = true;
  const auto path = scratch / "append.fdb";
  featuredb::write_store(path, featuredb::FeatureStore(r.db.width()));
  for (std::uint32_t t = 1; t <= r.db.max_task(); ++t) {
    std::vector<featuredb::VideoFeatureRecord> recs;
    for (const auto& rec : r.db.records())
      if (rec.task_id == t) recs.push_back(rec);
    const std::string before = slurp(path);
    featuredb::append_task_file(path, t, recs);
    const std::string after = slurp(path);
    prefix_kept = prefix_kept && after.size() == before.size() + recs.size() * r.db.record_bytes() &&
                  after.compare(0, featuredb::kCountOffset, before, 0, featuredb::kCountOffset) == 0 &&
                  after.compare(featuredb::kHeaderBytes, before.size() - featuredb::kHeaderBytes, before,
                                featuredb::kHeaderBytes) == 0;
  }
  prefix_kept = prefix_kept && slurp(path) == slurp(file);

  std::vector<std::size_t> expect(5);
  std::iota(expect.begin(), expect.end(), 1);
  const bool once = r.extraction.historical_reextractions == 0 && r.extraction.extracted == expect;
  report(5, "feature database contract", round_trip && prefix_kept && once,
         std::string("round trip ") + (round_trip ? "bit-equal" : "DIFFERS") + ", appends " +
             (prefix_kept ? "preserve prior bytes" : "ALTER prior bytes") + ", re-extractions " +
             std::to_string(r.extraction.historical_reextractions));
}

// ---- 6 ----------------------------------------------------------------------

void loss_identities() {
  Rng rng(601);
  bool pass = true;
  std::string detail;

  const Tensor one = rng.normal_tensor({1, 6}, 1.0), other = rng.normal_tensor({1, 6}, 1.0);
  const auto single = losses::infonce_pair(sim_batch(one, other, {}, 0.05));
  pass = pass && single.v2t.item() == 0.0 && single.t2v.item() == 0.0;

  const Tensor uq = Tensor::matrix({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  const Tensor uv = Tensor::matrix({{0, 1, 0}, {0, 1, 0}, {0, 1, 0}, {0, 1, 0}});
  const auto uniform = losses::infonce_pair(sim_batch(uq, uv, {}, 0.05));
  const double log_gap = std::max(std::abs(uniform.v2t.item() - std::log(4.0)), std::abs(uniform.t2v.item() - std::log(4.0)));
  pass = pass && log_gap <= kLogNTol;
  detail += "ln4 gap " + fmt("%.1e", log_gap);

  const Tensor q = rng.normal_tensor({5, 8}, 1.0), v = rng.normal_tensor({5, 8}, 1.0);
  const double empty_gap = std::abs(losses::ct_loss(sim_batch(q, v, {}, 0.05)).item() -
                                    losses::infonce_pair(sim_batch(q, v, {}, 0.05)).t2v.item());
  pass = pass && empty_gap <= kEmptyRefTol;
  detail += ", empty-ref gap " + fmt("%.1e", empty_gap);

  std::size_t decreases = 0;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const Tensor tq = rng.normal_tensor({4, 6}, 1.0), tv = rng.normal_tensor({4, 6}, 1.0);
    double prev = losses::ct_loss(sim_batch(tq, tv, {}, 0.2)).item();
    std::vector<double> rows;
    for (std::size_t h = 1; h <= 5; ++h) {
      for (std::size_t d = 0; d < 6; ++d) rows.push_back(rng.normal());
      const double cur = losses::ct_loss(sim_batch(tq, tv, Tensor::from({h, 6}, rows), 0.2)).item();
      if (cur < prev) ++decreases;
      prev = cur;
    }
  }
  pass = pass && decreases == 0;
  detail += ", " + std::to_string(decreases) + " decreases over 250 reference additions";

  const Tensor r = rng.normal_tensor({3, 8}, 1.0);
  const auto b = sim_batch(q, v, r, 0.05);
  const auto p = losses::infonce_pair(b);
  const bool endpoints = losses::total_loss(b, 0.0).item() == 0.5 * (p.v2t.item() + p.t2v.item()) &&
                         losses::total_loss(b, 1.0).item() == losses::ct_loss(b).item();
  pass = pass && endpoints;
  detail += endpoints ? ", beta endpoints exact" : ", beta endpoints DIFFER";
  report(6, "loss identities", pass, detail);
}

// ---- 7 ----------------------------------------------------------------------

void learning_trend() {
  double r1_full = 0, r1_no_ffa = 0, bwf_full = 0, bwf_no_tame = 0, chance = 0, slowest = 0;
  std::string per_seed;
  for (std::uint64_t seed : kTrendSeeds) {
    const auto& w = world(seed);
    const auto& full = variant_run(seed, "full");
    const auto& no_tame = variant_run(seed, "no_tame");
    const auto& no_ffa = variant_run(seed, "no_ffa");
    r1_full += full.result.final_report.r1;
    r1_no_ffa += no_ffa.result.final_report.r1;
    bwf_full += full.result.mean_bwf();
    bwf_no_tame += no_tame.result.mean_bwf();
    chance += 100.0 / static_cast<double>(full.result.final_report.pool_size);
    slowest = std::max(slowest, w.pretrain_seconds + full.seconds);
    per_seed += " s" + std::to_string(seed) + " " + fmt("%.2f", full.result.final_report.r1);
  }
  const double n = static_cast<double>(kTrendSeeds.size());
  r1_full /= n, r1_no_ffa /= n, bwf_full /= n, bwf_no_tame /= n, chance /= n;
  const bool a = r1_full >= kChanceMultiple * chance;
  const bool b = bwf_full <= bwf_no_tame;
  const bool c = r1_full >= r1_no_ffa;
  const bool fast = slowest <= kSeedRunSeconds;
  report(7, "learning-signal trend", a && b && c && fast,
         std::string("(a) ") + (a ? "ok" : "FAIL") + " R@1 " + fmt("%.2f", r1_full) + " vs 3x chance " +
             fmt("%.2f", kChanceMultiple * chance) + " [" + per_seed.substr(1) + "]; (b) " + (b ? "ok" : "FAIL") +
             " BWF full " + fmt("%.2f", bwf_full) + " vs no_tame " + fmt("%.2f", bwf_no_tame) + "; (c) " +
             (c ? "ok" : "FAIL") + " R@1 full " + fmt("%.2f", r1_full) + " vs no_ffa " + fmt("%.2f", r1_no_ffa) +
             "; slowest seed " + fmt("%.0f s", slowest));
}

// ---- 8 ----------------------------------------------------------------------

void router_contract() {
  Rng rng(801);
  std::size_t bad_gates = 0, bad_perm = 0;
  double worst_sum = 0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    tame::TameConfig c;
    c.experts = 2 + rng.index(7);
    c.top_k = 1 + rng.index(c.experts);
    c.rank = 1 + rng.index(3);
    c.init_std = 0.5;
    const std::size_t width = 4 + rng.index(5), seqs = 1 + rng.index(3);
    auto a = tame::make_adapter(width, c, rng);
    for (auto& b : a.b) b = rng.normal_tensor({width, c.rank}, 0.5);
    a.lambda = 0.7;
    const Tensor eos = rng.normal_tensor({seqs, width}, 1.0), proto = rng.normal_tensor({width}, 0.3);
    const Tensor g = tame::route(a, eos, trial % 2 ? &proto : nullptr);
    for (std::size_t s = 0; s < seqs; ++s) {
      std::size_t nonzero = 0;
      double sum = 0;
      for (std::size_t i = 0; i < c.experts; ++i) nonzero += g.at(s, i) != 0.0, sum += g.at(s, i);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      if (nonzero != c.top_k || std::abs(sum - 1.0) > kGateSumTol) ++bad_gates;
    }

    std::vector<std::size_t> perm(c.experts);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    tame::TAMEAdapter p = a;
    p.b.clear();
    std::vector<double> router(c.experts * width);
    for (std::size_t i = 0; i < c.experts; ++i) {
      p.b.push_back(a.b[perm[i]]);
      for (std::size_t d = 0; d < width; ++d) router[i * width + d] = a.router.at(perm[i], d);
    }
    p.router = Tensor::from({c.experts, width}, router);
    const Tensor x = rng.normal_tensor({3 * seqs, width}, 1.0), w = rng.normal_tensor({width, width}, 1.0);
    const Tensor ga = tame::route(a, eos, &proto), gp = tame::route(p, eos, &proto);
    const Tensor oa = tame::adapted_linear(a, w, x, ga, 3), op = tame::adapted_linear(p, w, x, gp, 3);
    bool same = true;
    for (std::size_t s = 0; s < seqs; ++s)
      for (std::size_t i = 0; i < c.experts; ++i) same = same && gp.at(s, i) == ga.at(s, perm[i]);
    for (std::size_t i = 0; i < oa.numel(); ++i) same = same && oa.values()[i] == op.values()[i];
    bad_perm += !same;
  }
  report(8, "router contract", bad_gates == 0 && bad_perm == 0,
         std::to_string(bad_gates) + " bad gate rows (worst sum error " + fmt("%.1e", worst_sum) + "), " +
             std::to_string(bad_perm) + "/200 permutation mismatches");
}

// ---- 9 ----------------------------------------------------------------------

void determinism() {
  const auto& w = world(1);
  variant_run(1, "full");
  const auto again = run_dir(1, "full_again");
  std::filesystem::remove_all(again);
  harness::run_stream(w.stream, w.frozen, variant_config(1, "full"), harness::RunOptions{again, {}});
  const auto first = run_dir(1, "full");
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : std::filesystem::directory_iterator(first)) {
    const auto name = entry.path().filename().string();
    if (name != "ledger.jsonl" && name.rfind("report", 0) != 0) continue;
    ++compared;
    differing += slurp(entry.path()) != slurp(again / name);
  }
  report(9, "determinism", compared >= 2 && differing == 0,
         std::to_string(compared) + " ledger/report files compared, " + std::to_string(differing) + " differ");
}

}  // namespace
}  // namespace ctvr

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  try {
    ctvr::gradient_fidelity();
    ctvr::identity_knobs();
    ctvr::frozen_backbone();
    ctvr::metric_oracles();
    ctvr::feature_db_contract();
    ctvr::loss_identities();
    ctvr::learning_trend();
    ctvr::router_contract();
    ctvr::determinism();
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d of 9 criteria failed\n", ctvr::failures);
  return ctvr::failures == 0 ? 0 : 1;
}
