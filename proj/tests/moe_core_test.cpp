// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "moeroute/moeroute.hpp"
#include "test_util.hpp"

namespace moeroute {
namespace {

bool same_weights(const Model& a, const Model& b) {
  auto eq = [](const FeedForward& x, const FeedForward& y) {
    return x.up == y.up && x.up_bias == y.up_bias && x.down == y.down;
  };
  if (a.embedding != b.embedding || a.image_offset != b.image_offset ||
      a.unembedding != b.unembedding || a.layers.size() != b.layers.size())
    return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    if (!eq(x.mixer, y.mixer) || x.router != y.router) return false;
    for (std::size_t e = 0; e < x.experts.size(); ++e)
      if (!eq(x.experts[e], y.experts[e])) return false;
    for (std::size_t s = 0; s < x.shared.size(); ++s)
      if (!eq(x.shared[s], y.shared[s])) return false;
  }
  return true;
}

TEST(Presets, DeskSeedSevenIsBitReproducible) {
  const Model a = build_model(preset_config("desk", 7));
  const Model b = build_model(preset_config("desk", 7));
  EXPECT_TRUE(same_weights(a, b));
  const Model c = build_model(preset_config("desk", 8));
  EXPECT_FALSE(same_weights(a, c));
}

TEST(Presets, ArchitectureGeometryIsPerLayer) {
  const auto kimi = preset_config("kimi-like");
  EXPECT_EQ(kimi.num_layers, 27);
  EXPECT_EQ(kimi.num_routed_experts, 64);
  EXPECT_EQ(kimi.top_k, 6);
  EXPECT_EQ(kimi.num_shared_experts, 2);
  const auto qwen = preset_config("qwen-like");
  EXPECT_EQ(qwen.num_layers, 48);
  EXPECT_EQ(qwen.num_routed_experts, 128);
  EXPECT_EQ(qwen.top_k, 8);
  EXPECT_EQ(qwen.num_shared_experts, 0);
  const auto llama = preset_config("llama-like");
  EXPECT_EQ(llama.num_layers, 48);
  EXPECT_EQ(llama.num_routed_experts, 16);
  EXPECT_EQ(llama.top_k, 1);
  EXPECT_EQ(llama.num_shared_experts, 1);

  const Model m = build_model(qwen);
  ASSERT_EQ(m.layers.size(), 48u);
  for (const auto& layer : m.layers) {
    EXPECT_EQ(layer.router.rows(), 128);
    EXPECT_EQ(layer.experts.size(), 128u);
  }
}

TEST(Presets, UnknownNameIsRejected) { EXPECT_THROW(preset_config("nope"), Error); }

TEST(Config, TopKAboveExpertCountIsRejected) {
  ToyMoEConfig c;
  c.num_routed_experts = 8;
  c.top_k = 9;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(build_model(c), Error);
}

TEST(TokenSequenceChecks, MismatchedTagListsAreRejected) {
  TokenSequence s = make_prompt(std::vector<int>{1, 2});
  s.phase_tags.pop_back();
  EXPECT_THROW(s.validate(), Error);
  const Model m = build_model(preset_config("desk", 1));
  EXPECT_THROW(forward(m, s), Error);
}

TEST(Forward, RejectsEmptyAndOutOfVocabularyInput) {
  const Model m = build_model(preset_config("desk", 1));
  EXPECT_THROW(forward(m, TokenSequence{}), Error);
  EXPECT_THROW(forward(m, make_prompt(std::vector<int>{0, 12})), Error);
  EXPECT_THROW(forward(m, make_prompt(std::vector<int>{-1})), Error);
}

TEST(TopK, TiesResolveToLowestIndex) {
  const std::vector<double> s{0.25, 0.25, 0.25, 0.25};
  EXPECT_EQ(select_top_k(s, 2), (std::vector<int>{0, 1}));
  const std::vector<double> t{0.1, 0.3, 0.3, 0.3};
  EXPECT_EQ(select_top_k(t, 2), (std::vector<int>{1, 2}));

  RoutingRecord r;
  r.logits = {0.0, 0.0, 0.0, 0.0};
  complete_routing(r, 3);
  EXPECT_EQ(r.topk_indices, (std::vector<int>{0, 1, 2}));
  for (double w : r.topk_weights) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);
}

TEST(Forward, GreedyDecodeTiesResolveToLowestToken) {
  Model m = build_model(preset_config("desk", 3));
  m.unembedding.setZero();
  const auto out = forward(m, make_prompt(std::vector<int>{5, 6}));
  ASSERT_EQ(out.outputs.size(), 1u);
  EXPECT_EQ(out.outputs[0].token_id, 0);
}

// Independent recomputation of the routing pipeline from recorded logits:
// unshifted softmax, selection by counting strictly larger (or equal and
// lower-indexed) competitors, renormalization.
void check_record_against_oracle(const RoutingRecord& r, int top_k) {
  const auto& z = r.effective_logits();
  const std::size_t e = z.size();
  std::vector<double> p(e);
  double total = 0.0;
  for (std::size_t i = 0; i < e; ++i) total += std::exp(z[i]);
  for (std::size_t i = 0; i < e; ++i) p[i] = std::exp(z[i]) / total;

  double psum = 0.0;
  for (std::size_t i = 0; i < e; ++i) {
    EXPECT_GE(r.probabilities[i], 0.0);
    EXPECT_NEAR(r.probabilities[i], p[i], 1e-12);
    psum += r.probabilities[i];
  }
  EXPECT_NEAR(psum, 1.0, 1e-9);

  std::set<int> expected;
  for (std::size_t i = 0; i < e; ++i) {
    int ahead = 0;
    for (std::size_t j = 0; j < e; ++j) {
      if (r.probabilities[j] > r.probabilities[i] ||
          (r.probabilities[j] == r.probabilities[i] && j < i))
        ++ahead;
    }
    if (ahead < top_k) expected.insert(static_cast<int>(i));
  }
  const std::set<int> got(r.topk_indices.begin(), r.topk_indices.end());
  EXPECT_EQ(got.size(), r.topk_indices.size()) << "duplicate Top-K index";
  EXPECT_EQ(got, expected);

  double mass = 0.0;
  for (int i : r.topk_indices) mass += r.probabilities[i];
  double wsum = 0.0;
  for (std::size_t j = 0; j < r.topk_indices.size(); ++j) {
    EXPECT_NEAR(r.topk_weights[j], r.probabilities[r.topk_indices[j]] / mass, 1e-12);
    wsum += r.topk_weights[j];
  }
  EXPECT_NEAR(wsum, 1.0, 1e-9);
}

TEST(ForwardProperty, RoutingPipelineMatchesOracleOnRandomModels) {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const ToyMoEConfig c = testing::random_config(rng);
    const Model m = build_model(c);
    const int len = 1 + static_cast<int>(rng.below(6));
    const TokenSequence seq = testing::random_sequence(rng, c.vocab_size, len);
    ForwardOptions opts;
    opts.max_new_tokens = static_cast<int>(rng.below(4));
    const ForwardRecord out = forward(m, seq, {}, opts);

    const int decoded = std::max(0, opts.max_new_tokens - 1);
    ASSERT_EQ(out.routing.size(), static_cast<std::size_t>((len + decoded) * c.num_layers));
    ASSERT_EQ(out.outputs.size(), static_cast<std::size_t>(opts.max_new_tokens));
    for (std::size_t n = 0; n < out.routing.size(); ++n) {
      const RoutingRecord& r = out.routing[n];
      EXPECT_EQ(r.token_position, static_cast<int>(n) / c.num_layers);
      EXPECT_EQ(r.layer, static_cast<int>(n) % c.num_layers);
      EXPECT_EQ(r.phase, r.token_position < len ? Phase::kPrompt : Phase::kGeneration);
      EXPECT_TRUE(r.adjusted_logits.empty());
      ASSERT_EQ(static_cast<int>(r.topk_indices.size()), c.top_k);
      for (int idx : r.topk_indices) {
        EXPECT_GE(idx, 0);
        EXPECT_LT(idx, c.num_routed_experts);  // shared experts never appear
      }
      check_record_against_oracle(r, c.top_k);
    }
  }
}

TEST(Forward, GeneratedTokensAreFedBackAsText) {
  const Model m = build_model(preset_config("desk", 11));
  ForwardOptions opts;
  opts.max_new_tokens = 3;
  opts.capture_hidden = true;
  const TokenSequence prompt = make_prompt(std::vector<int>{1, 2}, Modality::kImage);
  const ForwardRecord out = forward(m, prompt, {}, opts);
  ASSERT_EQ(out.outputs.size(), 3u);
  ASSERT_EQ(out.hidden.size(), 4u);

  // Replaying the first decoded token as a text prompt token reproduces its
  // hidden states, since positions do not interact.
  TokenSequence replay;
  replay.push_back(out.outputs[0].token_id, Modality::kText, Phase::kGeneration);
  ForwardOptions one;
  one.max_new_tokens = 0;
  one.capture_hidden = true;
  const ForwardRecord alone = forward(m, replay, {}, one);
  EXPECT_EQ(alone.hidden[0], out.hidden[2]);
}

TEST(Hooks, EmptyHooksAreDeterministic) {
  const Model m = build_model(preset_config("desk", 5));
  const TokenSequence seq = make_prompt(std::vector<int>{3, 1, 4, 1, 5});
  ForwardOptions opts;
  opts.capture_hidden = true;
  opts.max_new_tokens = 2;
  EXPECT_EQ(forward(m, seq, {}, opts), forward(m, seq, {}, opts));
}

TEST(Hooks, ZeroAddRouterHookIsIdentity) {
  const Model m = build_model(preset_config("desk", 5));
  const TokenSequence seq = make_prompt(std::vector<int>{3, 1, 4, 1, 5}, Modality::kImage);
  HookBundle zero;
  zero.router = [](const HookSite&, std::span<double> r) {
    for (double& v : r) v += 0.0;
  };
  zero.hidden = [](const HookSite&, std::span<double> h) {
    for (double& v : h) v += 0.0;
  };
  ForwardOptions opts;
  opts.capture_hidden = true;
  opts.max_new_tokens = 2;
  EXPECT_EQ(forward(m, seq, zero, opts), forward(m, seq, {}, opts));
}

TEST(Hooks, RouterHookEditsFeedTheSoftmax) {
  const Model m = build_model(preset_config("desk", 5));
  HookBundle pin;
  pin.router = [](const HookSite&, std::span<double> r) { r[7] += 100.0; };
  const ForwardRecord out = forward(m, make_prompt(std::vector<int>{2}), pin);
  for (const auto& r : out.routing) {
    ASSERT_FALSE(r.adjusted_logits.empty());
    EXPECT_EQ(r.adjusted_logits[7], r.logits[7] + 100.0);
    EXPECT_EQ(r.topk_indices.front(), 7);
  }
}

TEST(Hooks, HiddenEditWithActualSourceYieldsTarget) {
  const Model m = build_model(preset_config("desk", 9));
  ForwardOptions opts;
  opts.capture_hidden = true;
  opts.max_new_tokens = 0;
  const TokenSequence src = make_prompt(std::vector<int>{4});
  const TokenSequence tgt = make_prompt(std::vector<int>{9});
  const ForwardRecord a = forward(m, src, {}, opts);
  const ForwardRecord b = forward(m, tgt, {}, opts);
  const int layer = 2;
  const auto& h_src = a.hidden[0][layer];
  const auto& h_tgt = b.hidden[0][layer];
  HookBundle edit;
  edit.hidden = [&](const HookSite& site, std::span<double> h) {
    if (site.layer != layer) return;
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = h[i] - 1.0 * h_src[i] + 1.0 * h_tgt[i];
  };
  const ForwardRecord edited = forward(m, src, edit, opts);
  // x - x + y is exact when x is the value being edited.
  EXPECT_EQ(edited.hidden[0][layer], h_tgt);
}

TEST(SharedExperts, AffectOutputsButNotEarlierRouting) {
  ToyMoEConfig c = preset_config("desk", 4);
  const Model with = build_model(c);
  Model without = with;
  for (auto& layer : without.layers)
    for (auto& s : layer.shared) s = FeedForward::zeros(c.hidden_dim, c.ffn_dim);
  const TokenSequence seq = make_prompt(std::vector<int>{1, 2, 3});
  const auto a = forward(with, seq);
  const auto b = forward(without, seq);
  // Layer 0 routing happens before any shared expert contributes.
  for (std::size_t n = 0; n < a.routing.size(); n += c.num_layers)
    EXPECT_EQ(a.routing[n], b.routing[n]);
  EXPECT_NE(a.outputs[0].logits, b.outputs[0].logits);
}

// ---------------------------------------------------------------------------
// Planted models

TEST(Planted, DomainTokensAlwaysRouteToPlantedExperts) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyMoEConfig c = preset_config("desk", seed);
    const PlantedSpec spec = default_planted_spec(c, seed, 0.0);
    const Model m = plant_specialization(c, spec);
    for (Modality mod : {Modality::kText, Modality::kImage}) {
      for (int t : spec.domain_token_ids) {
        const auto out = forward(m, make_prompt(std::vector<int>{t}, mod));
        for (const auto& r : out.routing) {
          for (int i : spec.planted_experts.at_layer(r.layer)) {
            EXPECT_NE(std::find(r.topk_indices.begin(), r.topk_indices.end(), i),
                      r.topk_indices.end())
                << "seed " << seed << " token " << t << " layer " << r.layer;
          }
        }
      }
    }
  }
}

TEST(Planted, PlantedFrequencyOnDomainStreamIsExactlyOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const char* preset : {"desk", "kimi-like", "llama-like"}) {
      const ToyMoEConfig c = planted_config(preset_config(preset, seed));
      const PlantedSpec spec = default_planted_spec(c, seed, 0.0);
      const Model m = plant_specialization(c, spec);
      Rng rng(seed);
      FrequencyCounter counter(m.grid());
      for (const auto& p : permutation_stream(spec.domain_token_ids, 4, Modality::kText, rng))
        for (const auto& r : forward(m, p).routing) counter.add(r);
      const auto table = counter.table("domain");
      for (const auto& id : spec.planted_experts.members) EXPECT_EQ(table.at(id), 1.0);
    }
  }
}

TEST(Planted, TaskAccuracyIsPerfectWithoutOffset) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyMoEConfig c = preset_config("desk", seed);
    const PlantedSpec spec = default_planted_spec(c, seed, 0.0);
    const Model m = plant_specialization(c, spec);
    Rng rng(seed + 100);
    for (Modality mod : {Modality::kText, Modality::kImage}) {
      const auto tasks = domain_task_instances(spec, c.vocab_size, 50, 4, mod, rng);
      EXPECT_EQ(task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t) {
                  return forward(m, q);
                }),
                1.0);
    }
  }
}

TEST(Planted, DistractionOffsetDropsAccuracyBelowHalf) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyMoEConfig c = preset_config("desk", seed);
    const PlantedSpec spec = default_planted_spec(c, seed, kDistractionOffset);
    const Model m = plant_specialization(c, spec);
    Rng rng(seed + 100);
    const auto tasks = domain_task_instances(spec, c.vocab_size, 50, 4, Modality::kImage, rng);
    EXPECT_LT(task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t) {
                return forward(m, q);
              }),
              0.5);
    // Text prompts carry no offset and stay correct.
    const auto text = domain_task_instances(spec, c.vocab_size, 50, 4, Modality::kText, rng);
    EXPECT_EQ(task_accuracy(text, [&](const TokenSequence& q, std::uint64_t) {
                return forward(m, q);
              }),
              1.0);
  }
}

TEST(Planted, ValidationRejectsBadSpecs) {
  const ToyMoEConfig c = preset_config("desk", 0);
  PlantedSpec spec = default_planted_spec(c, 0);
  PlantedSpec noisy = spec;
  noisy.background_noise = 2.0;
  EXPECT_THROW(plant_specialization(c, noisy), Error);

  PlantedSpec crowded = spec;
  for (int i = 0; i < 3; ++i) crowded.planted_experts.members.insert({0, i});
  EXPECT_THROW(plant_specialization(c, crowded), Error);

  PlantedSpec all_domain = spec;
  all_domain.domain_token_ids.clear();
  for (int t = 0; t < c.vocab_size; ++t) all_domain.domain_token_ids.push_back(t);
  EXPECT_THROW(plant_specialization(c, all_domain), Error);

  PlantedSpec overlap = spec;
  overlap.visual_experts.members.insert(*spec.planted_experts.members.begin());
  EXPECT_THROW(plant_specialization(c, overlap), Error);
}

TEST(Planted, SpecJsonRoundTrips) {
  const ToyMoEConfig c = planted_config(preset_config("kimi-like", 3));
  const PlantedSpec spec = default_planted_spec(c, 3, 0.7);
  const PlantedSpec back = planted_spec_from_json(
      nlohmann::json::parse(planted_spec_to_json(spec).dump()), c.grid());
  EXPECT_EQ(back.planted_experts, spec.planted_experts);
  EXPECT_EQ(back.visual_experts, spec.visual_experts);
  EXPECT_EQ(back.domain_token_ids, spec.domain_token_ids);
  EXPECT_EQ(back.modality_offset_strength, spec.modality_offset_strength);
  EXPECT_THROW(planted_spec_from_json(nlohmann::json::parse("{}"), c.grid()), Error);
}

}  // namespace
}  // namespace moeroute
