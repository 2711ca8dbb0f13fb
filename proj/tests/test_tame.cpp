// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "ctvr/backbone.hpp"
#include "ctvr/errors.hpp"
#include "ctvr/ffa.hpp"
#include "ctvr/losses.hpp"
#include "ctvr/model.hpp"
#include "ctvr/ops.hpp"
#include "ctvr/tame.hpp"
#include "test_util.hpp"

namespace ctvr {
namespace {

using nn::Tensor;

tame::TAMEAdapter adapter(std::size_t width, std::size_t experts, std::size_t k, std::size_t rank, Rng& rng,
                          double b_std = 0.0) {
  tame::TameConfig c;
  c.experts = experts;
  c.top_k = k;
  c.rank = rank;
  c.init_std = 0.5;
  auto a = tame::make_adapter(width, c, rng);
  if (b_std > 0)
    for (auto& b : a.b) b = rng.normal_tensor({width, rank}, b_std);
  return a;
}

TEST(Route, SingleExpertGetsEverything) {
  Rng rng(1);
  const auto a = adapter(4, 1, 1, 2, rng);
  const Tensor g = tame::route(a, rng.normal_tensor({4}, 1.0), nullptr);
  ASSERT_EQ(g.numel(), 1u);
  EXPECT_EQ(g.values()[0], 1.0);
}

TEST(Route, TiesGoToLowerExperts) {
  Rng rng(2);
  auto a = adapter(4, 4, 2, 2, rng);
  a.router = Tensor::zeros({4, 4});
  const Tensor g = tame::route(a, rng.normal_tensor({4}, 1.0), nullptr);
  EXPECT_EQ(g.values()[0], 0.5);
  EXPECT_EQ(g.values()[1], 0.5);
  EXPECT_EQ(g.values()[2], 0.0);
  EXPECT_EQ(g.values()[3], 0.0);
}

TEST(Route, ExactlyKNonzeroGatesSummingToOne) {
  Rng rng(3);
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t ne = 1 + rng.index(8), k = 1 + rng.index(ne);
    const auto a = adapter(6, ne, k, 2, rng);
    const Tensor eos = rng.normal_tensor({5, 6}, 2.0), proto = rng.normal_tensor({6}, 1.0);
    const Tensor g = tame::route(a, eos, trial % 2 ? &proto : nullptr);
    for (std::size_t r = 0; r < 5; ++r) {
      std::size_t nonzero = 0;
      double s = 0;
      for (std::size_t i = 0; i < ne; ++i) {
        const double v = g.at(r, i);
        if (v != 0.0) ++nonzero;
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_EQ(nonzero, k);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Route, KAboveExpertsRejected) {
  Rng rng(4);
  tame::TameConfig c;
  c.experts = 3;
  c.top_k = 4;
  EXPECT_THROW(tame::make_adapter(4, c, rng), ConfigError);
  c.top_k = 2;
  c.rank = 0;
  EXPECT_THROW(tame::make_adapter(4, c, rng), ConfigError);
}

TEST(Route, ZeroPrototypeMatchesNoPrototype) {
  Rng rng(5);
  const auto a = adapter(6, 5, 2, 2, rng);
  const Tensor eos = rng.normal_tensor({3, 6}, 1.0), zero = Tensor::zeros({6});
  const Tensor g0 = tame::route(a, eos, nullptr), g1 = tame::route(a, eos, &zero);
  for (std::size_t i = 0; i < g0.numel(); ++i) EXPECT_EQ(g0.values()[i], g1.values()[i]);
}

TEST(Experts, ZeroDecodersGiveZero) {
  Rng rng(6);
  const auto a = adapter(6, 4, 2, 3, rng);
  const Tensor x = rng.normal_tensor({5, 6}, 1.0);
  const Tensor out = tame::experts_apply(a, x, tame::route(a, x, nullptr));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Experts, SingleGateIsThatExpert) {
  Rng rng(7);
  const auto a = adapter(6, 3, 1, 2, rng, 0.5);
  const Tensor x = rng.normal_tensor({4, 6}, 1.0);
  const Tensor gates = Tensor::from({3}, {0.0, 1.0, 0.0});
  const Tensor out = tame::experts_apply(a, x, gates);
  const Tensor want = nn::linear(nn::linear(x, a.a), a.b[1]);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.values()[i], want.values()[i]);
}

TEST(Experts, EqualDecodersAtHalfGates) {
  Rng rng(8);
  auto a = adapter(6, 2, 2, 2, rng, 0.5);
  a.b[1] = a.b[0].clone();
  const Tensor x = rng.normal_tensor({4, 6}, 1.0);
  const Tensor out = tame::experts_apply(a, x, Tensor::from({2}, {0.5, 0.5}));
  const Tensor want = nn::linear(nn::linear(x, a.a), a.b[0]);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.values()[i], want.values()[i], 1e-15);
}

TEST(Experts, PerSequenceGates) {
  Rng rng(9);
  const auto a = adapter(4, 3, 2, 2, rng, 0.5);
  const Tensor x = rng.normal_tensor({6, 4}, 1.0);
  const Tensor gates = Tensor::matrix({{1, 0, 0}, {0, 0, 1}});
  const Tensor out = tame::experts_apply(a, x, gates, 3);
  const Tensor h = nn::linear(x, a.a);
  const Tensor e0 = nn::linear(h, a.b[0]), e2 = nn::linear(h, a.b[2]);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at(r, c), r < 3 ? e0.at(r, c) : e2.at(r, c));
  EXPECT_THROW(tame::experts_apply(a, x, gates, 4), DimensionError);
}

TEST(AdaptedLinear, ZeroLambdaIsFrozenLinear) {
  Rng rng(10);
  auto a = adapter(5, 3, 2, 2, rng, 0.5);
  a.lambda = 0.0;
  const Tensor w = rng.normal_tensor({5, 5}, 1.0), x = rng.normal_tensor({3, 5}, 1.0);
  const Tensor out = tame::adapted_linear(a, w, x, tame::route(a, x, nullptr));
  const Tensor want = nn::linear(x, w);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.values()[i], want.values()[i]);
}

TEST(AdaptedLinear, ZeroDecodersIsFrozenLinear) {
  Rng rng(11);
  const auto a = adapter(5, 3, 2, 2, rng);
  const Tensor w = rng.normal_tensor({5, 5}, 1.0), x = rng.normal_tensor({3, 5}, 1.0);
  const Tensor out = tame::adapted_linear(a, w, x, tame::route(a, x, nullptr));
  const Tensor want = nn::linear(x, w);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.values()[i], want.values()[i]);
}

TEST(AdaptedLinear, TwoByTwoByHand) {
  tame::TAMEAdapter a;
  a.a = Tensor::matrix({{1, 2}});             // r=1
  a.b = {Tensor::matrix({{3}, {-1}})};        // O=2
  a.router = Tensor::matrix({{0.1, 0.2}});
  a.lambda = 0.5;
  a.k = 1;
  const Tensor w = Tensor::matrix({{2, 0}, {1, 1}});
  const Tensor x = Tensor::matrix({{1, 1}, {0, 2}});
  const Tensor out = tame::adapted_linear(a, w, x, Tensor::from({1}, {1.0}));
  // x·wᵀ = [[2,2],[0,2]]; A x = [3, 4]; B·(A x) = [[9,-3],[12,-4]]
  EXPECT_DOUBLE_EQ(out.at(0, 0), 2 + 0.5 * 9);
  EXPECT_DOUBLE_EQ(out.at(0, 1), 2 - 0.5 * 3);
  EXPECT_DOUBLE_EQ(out.at(1, 0), 0 + 0.5 * 12);
  EXPECT_DOUBLE_EQ(out.at(1, 1), 2 - 0.5 * 4);
}

// Relabelling experts (router rows and decoders together) must not change
// the adapted output at all.
TEST(Experts, PermutationEquivariantBitExact) {
  Rng rng(12);
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t ne = 2 + rng.index(6), k = 1 + rng.index(ne), seqs = 1 + rng.index(2);
    auto a = adapter(6, ne, k, 3, rng, 0.5);
    const Tensor x = rng.normal_tensor({4 * seqs, 6}, 1.0), w = rng.normal_tensor({6, 6}, 1.0);
    std::vector<std::size_t> perm(ne);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    tame::TAMEAdapter p = a;
    p.b.clear();
    std::vector<double> router(ne * 6);
    for (std::size_t i = 0; i < ne; ++i) {
      p.b.push_back(a.b[perm[i]]);
      for (std::size_t d = 0; d < 6; ++d) router[i * 6 + d] = a.router.at(perm[i], d);
    }
    p.router = Tensor::from({ne, 6}, router);
    const Tensor eos = rng.normal_tensor({seqs, 6}, 1.0);
    const Tensor ga = tame::route(a, eos, nullptr), gp = tame::route(p, eos, nullptr);
    for (std::size_t r = 0; r < seqs; ++r)
      for (std::size_t i = 0; i < ne; ++i) ASSERT_EQ(gp.at(r, i), ga.at(r, perm[i]));
    const Tensor oa = tame::adapted_linear(a, w, x, ga, 4), op = tame::adapted_linear(p, w, x, gp, 4);
    for (std::size_t i = 0; i < oa.numel(); ++i) ASSERT_EQ(oa.values()[i], op.values()[i]);
  }
}

TEST(TameGradient, RoutedExpertPathMatchesFiniteDifferences) {
  Rng rng(13);
  auto a = adapter(6, 4, 2, 3, rng, 0.4);
  a.lambda = 0.8;
  Tensor x = rng.normal_tensor({8, 6}, 1.0), w = rng.normal_tensor({6, 6}, 1.0);
  Tensor eos = rng.normal_tensor({2, 6}, 1.0), proto = rng.normal_tensor({6}, 0.3);
  const Tensor target = rng.normal_tensor({8, 6}, 1.0);
  auto f = [&] {
    const Tensor g = tame::route(a, eos, &proto);
    return nn::sum(nn::mul(tame::adapted_linear(a, w, x, g, 4), target));
  };
  std::vector<Tensor> leaves = {a.a, a.router, x, eos, proto};
  for (auto& b : a.b) leaves.push_back(b);
  const auto res = testing::check_gradient(f, leaves, 90, 14);
  EXPECT_GE(res.probes, 20u);
  EXPECT_LE(res.max_rel, 1e-4);
}

TEST(PrototypeBank, GrowsAndFreezesEarlierEntries) {
  nn::ParameterSet params;
  tame::PrototypeBank bank(6, false);
  bank.begin_task(1, &params);
  bank.begin_task(2, &params);
  bank.begin_task(3, &params);
  EXPECT_EQ(bank.size(), 3u);
  EXPECT_TRUE(params.is_frozen("proto.1"));
  EXPECT_TRUE(params.is_frozen("proto.2"));
  EXPECT_FALSE(params.is_frozen("proto.3"));
  for (double v : bank.prototype(3).values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(bank.begin_task(5, &params), ProtocolError);
}

TEST(PrototypeBank, PinnedNeverTrains) {
  nn::ParameterSet params;
  tame::PrototypeBank bank(6, true);
  bank.begin_task(1, &params);
  EXPECT_TRUE(params.trainable_names().empty());
}

class TameModel : public ::testing::Test {
 protected:
  model::Model make(double lambda, bool enabled = true) {
    auto bp = backbone::init_backbone(testing::tiny_backbone(testing::tiny_stream()));
    model::ModelConfig mc;
    mc.tame.experts = 3;
    mc.tame.top_k = 2;
    mc.tame.rank = 2;
    mc.tame.lambda = lambda;
    mc.tame_enabled = enabled;
    return model::Model(std::move(bp), mc);
  }
  std::vector<std::vector<std::int32_t>> queries() const {
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& p : testing::tiny_stream_data().tasks[0].pairs) out.push_back(p.query_tokens);
    out.resize(4);
    return out;
  }
};

TEST_F(TameModel, ZeroLambdaMatchesFrozenTower) {
  auto m = make(0.0);
  m.begin_task(1);
  for (const auto& name : m.adapters().names())
    if (name.find(".B.") != std::string::npos)
      for (auto& v : m.adapters().at(name).mutable_values()) v = 0.3;
  for (const auto& q : queries()) {
    const std::vector<std::int32_t>* one[] = {&q};
    const Tensor adapted = m.encode_queries(one, 1);
    const Tensor plain = backbone::encode_text(q, m.backbone()).eos_feature;
    for (std::size_t d = 0; d < plain.numel(); ++d) ASSERT_NEAR(adapted.values()[d], plain.values()[d], 1e-6);
  }
}

TEST_F(TameModel, SweepHasOneFeaturePerTask) {
  auto m = make(1.0);
  m.begin_task(1);
  const auto q = queries()[0];
  auto sweep = m.conditional_query_sweep(q);
  ASSERT_EQ(sweep.size(), 1u);
  EXPECT_EQ(sweep[0].first, 1u);
  const std::vector<std::int32_t>* one[] = {&q};
  const Tensor direct = m.encode_queries(one, 1);
  for (std::size_t d = 0; d < direct.numel(); ++d) EXPECT_EQ(sweep[0].second.values()[d], direct.values()[d]);
  m.begin_task(2);
  m.begin_task(3);
  sweep = m.conditional_query_sweep(q);
  ASSERT_EQ(sweep.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(sweep[i].first, i + 1);
}

TEST_F(TameModel, EmptyBankSweepRejected) {
  const auto m = make(1.0);
  EXPECT_THROW(m.conditional_query_sweep(queries()[0]), ProtocolError);
}

// One graph through FFA video encoding, TAME query encoding and the mixed
// loss with cached references.
TEST(FullGraph, AdapterGradientsMatchFiniteDifferences) {
  const auto& stream = testing::tiny_stream_data();
  auto bp = backbone::init_backbone(testing::tiny_backbone(stream.config));
  model::ModelConfig mc;
  mc.attach_depth = 1;
  mc.tame.experts = 3;
  mc.tame.top_k = 2;
  mc.tame.rank = 2;
  model::Model m(std::move(bp), mc);
  m.begin_task(1);
  m.begin_task(2);
  Rng rng(15);
  for (const auto& name : m.adapters().trainable_names()) {
    auto& t = m.adapters().at(name);
    for (auto& v : t.mutable_values()) v = rng.normal(0.0, name.find("alpha") != std::string::npos ? 0.5 : 0.2);
  }
  std::vector<data::Video> videos;
  std::vector<const std::vector<std::int32_t>*> qs;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& p = stream.tasks[1].pairs[i * 2];
    videos.push_back(data::render_video(stream, p));
    qs.push_back(&p.query_tokens);
  }
  std::vector<const data::Video*> vp;
  for (const auto& v : videos) vp.push_back(&v);
  const Tensor refs = rng.normal_tensor({4, m.width()}, 1.0);
  auto f = [&] {
    losses::SimilarityBatch b;
    b.q = m.encode_queries(qs, 2);
    b.v = m.encode_videos(vp);
    b.refs = refs;
    b.tau = 0.5;
    return losses::total_loss(b, 0.6);
  };
  std::vector<Tensor> leaves;
  for (const auto& name : m.adapters().trainable_names()) leaves.push_back(m.adapters().at(name));
  const auto res = testing::check_gradient(f, leaves, 2 * leaves.size(), 16);
  EXPECT_GE(res.probes, 20u);
  EXPECT_LE(res.max_rel, 1e-4);
}

}  // namespace
}  // namespace ctvr
