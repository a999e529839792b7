// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "moeroute/moeroute.hpp"
#include "test_util.hpp"

namespace moeroute {
namespace {

ExpertSet set_on(ExpertGrid grid, std::vector<ExpertId> ids, SetLabel label = SetLabel::kDomain) {
  ExpertSet s;
  s.label = label;
  s.grid = grid;
  for (auto id : ids) s.insert(id);
  return s;
}

TEST(Soft, WorkedExample) {
  const std::vector<double> r{1.0, 2.0, 3.0};
  const std::vector<int> t{0};
  const auto out = adjust_logits_soft(r, t, 0.5);
  EXPECT_NEAR(out[0], 1.0 + 0.5 * std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(out[0], 1.408248, 1e-6);
  EXPECT_EQ(out[1], 2.0);
  EXPECT_EQ(out[2], 3.0);
}

TEST(Soft, PopulationStdDividesByCount) {
  EXPECT_NEAR(population_std(std::vector<double>{1.0, 2.0, 3.0}), std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_EQ(population_std(std::vector<double>{4.0}), 0.0);
  EXPECT_EQ(population_std(std::vector<double>{}), 0.0);
}

TEST(Soft, RejectsOutOfRangeTargets) {
  const std::vector<double> r{1.0, 2.0};
  EXPECT_THROW(adjust_logits_soft(r, std::vector<int>{2}, 0.5), Error);
}

TEST(SoftProperty, LambdaZeroIsBitwiseIdentity) {
  Rng rng(81);
  for (int trial = 0; trial < 500; ++trial) {
    const int e = 1 + static_cast<int>(rng.below(64));
    const auto r = testing::random_logits(rng, e);
    std::vector<int> t{static_cast<int>(rng.below(static_cast<std::uint64_t>(e)))};
    EXPECT_EQ(adjust_logits_soft(r, t, 0.0), r);
  }
}

TEST(SoftProperty, NonTargetsUntouchedAndTargetMassMonotone) {
  Rng rng(82);
  const std::vector<double> lambdas{0.0, 0.2, 0.5, 1.0, 2.0};
  for (int trial = 0; trial < 500; ++trial) {
    const int e = 2 + static_cast<int>(rng.below(63));
    const auto r = testing::random_logits(rng, e);
    std::vector<int> targets;
    for (int i = 0; i < e; ++i)
      if (rng.uniform() < 0.2) targets.push_back(i);
    std::vector<double> prev_mass(static_cast<std::size_t>(e), -1.0);
    for (double lambda : lambdas) {
      const auto out = adjust_logits_soft(r, targets, lambda);
      const auto p = softmax(out);
      for (int i = 0; i < e; ++i) {
        const bool target = std::find(targets.begin(), targets.end(), i) != targets.end();
        if (!target) {
          EXPECT_EQ(out[i], r[i]);  // relative order of non-targets preserved exactly
        } else {
          EXPECT_GE(p[i], prev_mass[i] - 1e-15);
          prev_mass[i] = p[i];
        }
      }
    }
  }
}

TEST(Hard, WorkedExample) {
  const std::vector<double> r{1.0, 2.0, 3.0};
  Rng rng(5);
  for (int n = 0; n < 10000; ++n) {
    const auto out = adjust_logits_hard(r, std::vector<int>{0}, rng);
    EXPECT_LT(std::abs(out[0] - 3.0), 0.05);
    EXPECT_EQ(out[1], 2.0);
    EXPECT_EQ(out[2], 3.0);
  }
}

TEST(Hard, TwoTargetsGetDistinctDraws) {
  Rng rng(6);
  const auto out = adjust_logits_hard(std::vector<double>{1.0, 2.0, 3.0}, std::vector<int>{0, 1}, rng);
  EXPECT_NE(out[0], out[1]);
}

TEST(Hard, EmptyTargetsAreRejected) {
  Rng rng(1);
  EXPECT_THROW(adjust_logits_hard(std::vector<double>{1.0}, std::vector<int>{}, rng), Error);
}

TEST(Hard, ArgmaxRankRetentionMatchesNormalTail) {
  // Target at 1.0 is the argmax, runner-up at 0.99. The target keeps rank 1
  // iff delta > -0.01 = -1 sigma, so the rate should be Phi(1) = 0.841345.
  const std::vector<double> r{1.0, 0.99, 0.0, -1.0};
  Rng rng(123);
  const int draws = 100000;
  int kept = 0;
  for (int n = 0; n < draws; ++n) {
    const auto out = adjust_logits_hard(r, std::vector<int>{0}, rng);
    if (select_top_k(out, 1).front() == 0) ++kept;
  }
  const double rate = static_cast<double>(kept) / draws;
  const double expected = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  EXPECT_NEAR(expected, 0.841345, 1e-6);
  EXPECT_NEAR(rate, expected, 0.005);  // ~4 binomial standard errors
}

TEST(HardProperty, TargetsEnterTopKWhenDrawsAreNonNegative) {
  Rng rng(91);
  for (int trial = 0; trial < 5000; ++trial) {
    const int e = 2 + static_cast<int>(rng.below(30));
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(e)));
    const auto r = testing::random_logits(rng, e);
    std::vector<int> pool(static_cast<std::size_t>(e));
    for (int i = 0; i < e; ++i) pool[i] = i;
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const std::vector<int> targets(pool.begin(), pool.begin() + count);
    const double peak = *std::max_element(r.begin(), r.end());
    const auto out = adjust_logits_hard(r, targets, rng);
    bool non_negative = true;
    for (int t : targets) non_negative = non_negative && out[t] >= peak;
    if (!non_negative) continue;  // outside the guaranteed regime
    const auto top = select_top_k(softmax(out), k);
    for (int t : targets) EXPECT_NE(std::find(top.begin(), top.end(), t), top.end());
  }
}

TEST(RandomControl, MatchesPerLayerCountsAndAvoidsDomain) {
  const ExpertGrid grid{6, 8};
  const ExpertSet empty = set_on(grid, {});
  Rng rng(1);
  EXPECT_TRUE(select_random_targets(empty, grid, rng).empty());

  const ExpertSet dom = set_on(grid, {{3, 1}, {3, 5}, {4, 0}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a(seed), b(seed);
    const auto ctl = select_random_targets(dom, grid, a);
    EXPECT_EQ(ctl.members, select_random_targets(dom, grid, b).members);
    EXPECT_EQ(ctl.label, SetLabel::kRandomControl);
    EXPECT_EQ(ctl.at_layer(3).size(), 2u);
    EXPECT_EQ(ctl.at_layer(4).size(), 1u);
    EXPECT_EQ(ctl.size(), 3u);
    EXPECT_TRUE(overlap(ctl, dom).empty());
  }
  const ExpertSet full = set_on({1, 2}, {{0, 0}});
  Rng c(0);
  EXPECT_NO_THROW(select_random_targets(full, {1, 2}, c));  // one free expert suffices
  const ExpertSet crowded = set_on({1, 3}, {{0, 0}, {0, 1}});
  EXPECT_THROW(select_random_targets(crowded, {1, 3}, c), Error);
}

TEST(Config, Validation) {
  const ExpertGrid grid{4, 8};
  InterventionConfig c;
  c.target_set = set_on(grid, {});
  c.layers = {2, 1};
  EXPECT_THROW(c.validate(grid), Error);
  c.layers = {0, 4};
  EXPECT_THROW(c.validate(grid), Error);
  c.layers = {0, 3};
  c.lambda = -0.1;
  EXPECT_THROW(c.validate(grid), Error);
  c.lambda = 0.5;
  c.strategy = Strategy::kHard;
  c.delta_std = 0.0;
  EXPECT_THROW(c.validate(grid), Error);
  c.delta_std = 1e-2;
  EXPECT_NO_THROW(c.validate(grid));
  c.target_set = set_on({4, 9}, {});
  EXPECT_THROW(c.validate(grid), Error);
  EXPECT_EQ(parse_strategy("hard"), Strategy::kHard);
  EXPECT_THROW(parse_strategy("medium"), Error);
}

TEST(Presets, InterventionDefaults) {
  const auto kimi = intervention_preset("kimi-like");
  EXPECT_EQ(kimi.layers, (LayerRange{0, 20}));
  EXPECT_EQ(kimi.tau, 0.3);
  EXPECT_EQ(kimi.lambda, 0.5);
  const auto qwen = intervention_preset("qwen-like");
  EXPECT_EQ(qwen.layers, (LayerRange{6, 42}));
  EXPECT_EQ(qwen.lambda, 0.5);
  const auto llama = intervention_preset("llama-like");
  EXPECT_EQ(llama.layers, (LayerRange{8, 40}));
  EXPECT_EQ(llama.lambda, 0.2);
  EXPECT_THROW(intervention_preset("other"), Error);
}

TEST(Forward, SoftLambdaZeroMatchesUnintervenedRun) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Model m = build_model(preset_config("desk", seed));
    InterventionConfig c;
    c.lambda = 0.0;
    c.layers = {0, 3};
    c.target_set = set_on(m.grid(), {{0, 1}, {2, 3}});
    Rng rng(seed);
    const auto seq = testing::random_sequence(rng, 12, 6);
    ForwardOptions opts;
    opts.max_new_tokens = 3;
    opts.capture_hidden = true;
    EXPECT_EQ(run_intervened_forward(m, seq, c, 0, opts), forward(m, seq, {}, opts));
  }
}

TEST(Forward, EmptyTargetSetDegradesToIdentity) {
  const Model m = build_model(preset_config("desk", 2));
  for (Strategy s : {Strategy::kSoft, Strategy::kHard, Strategy::kRandom}) {
    InterventionConfig c;
    c.strategy = s;
    c.layers = {0, 3};
    c.target_set = set_on(m.grid(), {});
    const auto seq = make_prompt(std::vector<int>{1, 5, 7});
    EXPECT_EQ(run_intervened_forward(m, seq, c), forward(m, seq));
  }
}

TEST(Forward, LayerRangeOnQwenLikePreset) {
  const auto preset = intervention_preset("qwen-like");
  const ToyMoEConfig config = preset_config("qwen-like", 3);
  const Model m = build_model(config);
  ExpertSet targets = set_on(m.grid(), {});
  for (int l = 0; l < config.num_layers; ++l) targets.insert({l, l % 128});
  InterventionConfig c;
  c.lambda = preset.lambda;
  c.layers = preset.layers;
  c.target_set = targets;
  const auto seq = make_prompt(std::vector<int>{3, 9, 27});
  const auto base = forward(m, seq);
  const auto edited = run_intervened_forward(m, seq, c);
  ASSERT_EQ(base.routing.size(), edited.routing.size());
  for (std::size_t n = 0; n < base.routing.size(); ++n) {
    const auto& a = base.routing[n];
    const auto& b = edited.routing[n];
    if (a.layer < c.layers.lo) {
      EXPECT_EQ(a, b) << "layer " << a.layer;  // layer 5 and below untouched
    } else if (c.layers.contains(a.layer)) {
      EXPECT_FALSE(b.adjusted_logits.empty());
    } else {
      EXPECT_TRUE(b.adjusted_logits.empty()) << "hook edited layer " << a.layer;
    }
  }
}

TEST(Forward, LayerRangeOnPlantedModelLeavesOutsideLayersBitIdentical) {
  const ToyMoEConfig config = planted_config(preset_config("qwen-like", 3));
  const PlantedSpec spec = default_planted_spec(config, 3, 0.5);
  const Model m = plant_specialization(config, spec);
  InterventionConfig c;
  c.lambda = 0.5;
  c.layers = intervention_preset("qwen-like").layers;
  c.target_set = spec.planted_experts;
  Rng rng(3);
  const auto tasks = domain_task_instances(spec, config.vocab_size, 5, 4, Modality::kImage, rng);
  for (const auto& t : tasks) {
    const auto base = forward(m, t.prompt);
    const auto edited = run_intervened_forward(m, t.prompt, c);
    for (std::size_t n = 0; n < base.routing.size(); ++n)
      if (!c.layers.contains(base.routing[n].layer)) {
        EXPECT_EQ(base.routing[n], edited.routing[n]);
      }
  }
}

TEST(Forward, HooksApplyDuringGeneration) {
  const Model m = build_model(preset_config("desk", 4));
  InterventionConfig c;
  c.layers = {1, 2};
  c.target_set = set_on(m.grid(), {{1, 0}, {2, 0}});
  const RouterIntervention iv(c, m.grid());
  InterventionAudit audit;
  ForwardOptions opts;
  opts.max_new_tokens = 3;
  const auto out = forward(m, make_prompt(std::vector<int>{1, 2}), iv.hooks(0, &audit), opts);
  // 2 prompt tokens + 2 fed-back generated tokens, each adjusted at layers 1 and 2.
  EXPECT_EQ(audit.adjusted_calls, (std::vector<std::int64_t>{0, 4, 4, 0}));
  for (const auto& r : out.routing)
    if (r.phase == Phase::kGeneration && c.layers.contains(r.layer)) {
      EXPECT_FALSE(r.adjusted_logits.empty());
    }
}

TEST(Forward, HardNoiseStreamIsPerSequence) {
  const Model m = build_model(preset_config("desk", 4));
  InterventionConfig c;
  c.strategy = Strategy::kHard;
  c.layers = {0, 3};
  c.seed = 77;
  c.target_set = set_on(m.grid(), {{0, 0}, {1, 1}});
  const auto seq = make_prompt(std::vector<int>{1, 2, 3});
  EXPECT_EQ(run_intervened_forward(m, seq, c, 5), run_intervened_forward(m, seq, c, 5));
  EXPECT_NE(run_intervened_forward(m, seq, c, 5).routing[0].adjusted_logits,
            run_intervened_forward(m, seq, c, 6).routing[0].adjusted_logits);
}

TEST(Forward, TopOneRoutingNeedsNoSpecialCase) {
  const ToyMoEConfig config = planted_config(preset_config("llama-like", 2));
  const PlantedSpec spec = default_planted_spec(config, 2, 0.0);
  const Model m = plant_specialization(config, spec);
  InterventionConfig c;
  c.lambda = intervention_preset("llama-like").lambda;
  c.layers = intervention_preset("llama-like").layers;
  c.target_set = spec.planted_experts;
  Rng rng(2);
  const auto tasks = domain_task_instances(spec, config.vocab_size, 20, 3, Modality::kText, rng);
  const RouterIntervention iv(c, m.grid());
  EXPECT_EQ(task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t id) {
              return forward(m, q, iv.hooks(id));
            }),
            1.0);
}

TEST(Monotonicity, SelectionRateNonDecreasingOverLambdaSweep) {
  const std::vector<double> lambdas{0.0, 0.2, 0.5, 1.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyMoEConfig config = preset_config("desk", seed);
    const PlantedSpec spec = default_planted_spec(config, seed, kDistractionOffset);
    const Model m = plant_specialization(config, spec);
    Rng rng(derive_seed(seed, 9));
    const auto tasks = domain_task_instances(spec, config.vocab_size, 30, 4, Modality::kImage, rng);
    double prev = -1.0;
    for (double lambda : lambdas) {
      InterventionConfig c;
      c.lambda = lambda;
      c.layers = intervention_preset("desk").layers;
      c.target_set = spec.planted_experts;
      std::vector<RoutingRecord> recs;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto out = run_intervened_forward(m, tasks[i].prompt, c, i);
        recs.insert(recs.end(), out.routing.begin(), out.routing.end());
      }
      const double rate = target_selection_rate(recs, spec.planted_experts, c.layers);
      EXPECT_GE(rate, prev) << "seed " << seed << " lambda " << lambda;
      prev = rate;
    }
  }
}

TEST(Distraction, SoftRecoversAndRandomControlDoesNot) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyMoEConfig config = preset_config("desk", seed);
    const PlantedSpec spec = default_planted_spec(config, seed, kDistractionOffset);
    const Model m = plant_specialization(config, spec);
    Rng rng(derive_seed(seed, 10));
    const auto tasks = domain_task_instances(spec, config.vocab_size, 100, 4, Modality::kImage, rng);
    const double base = task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t) {
      return forward(m, q);
    });
    auto run = [&](Strategy s) {
      InterventionConfig c;
      c.strategy = s;
      c.lambda = 0.5;
      c.layers = intervention_preset("desk").layers;
      c.seed = seed;
      c.target_set = spec.planted_experts;
      const RouterIntervention iv(c, m.grid());
      return task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t id) {
        return forward(m, q, iv.hooks(id));
      });
    };
    EXPECT_LT(base, 0.5);
    EXPECT_GE(run(Strategy::kSoft), 0.95) << "seed " << seed;
    EXPECT_NEAR(run(Strategy::kRandom), base, 0.05) << "seed " << seed;
  }
}

}  // namespace
}  // namespace moeroute
