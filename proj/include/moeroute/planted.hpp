// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Models with known ground truth.
//
// plant_specialization() builds a norm-free toy whose residual stream is laid
// out in fixed coordinate blocks (V = vocab size):
//
//   [0, V)      token one-hot                       (embedding)
//   [V, 2V)     answer votes, read by the vocabulary head
//   2V          domain flag: +1 for domain tokens, -1 otherwise
//   2V + 1      modality: IMAGE adds modality_offset_strength here
//
// Router rows:
//   planted expert   (margin + noise) * flag, and -1 * modality on layers
//                    that also host visual experts
//   visual expert    +1 * modality
//   background       uniform[-noise, noise] per (layer, expert, token class)
//
// A token's class is its rank inside its own group (domain or general), so
// the k-th domain token and the k-th general token share background logits.
// On text, a domain token therefore ranks its background experts exactly like
// its general partner does, but with one fewer free Top-K slot per planted
// expert, which keeps Delta Phi <= 0 for every non-planted expert on balanced
// streams (each sample a permutation of its group).
//
// Planted experts vote for (t + 1) mod V with weight 1; every other routed
// expert votes for (t + 2) mod V with weight 1/4. Shared experts and mixers
// are zero.

#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moeroute/expert_set.hpp"
#include "moeroute/model.hpp"
#include "moeroute/rng.hpp"

namespace moeroute {

inline constexpr double kWrongVoteScale = 0.25;

/// Image offset strength placing the default planted layout in the
/// distraction regime: visual experts push the planted expert out of the
/// Top-K on image prompts, and a soft boost of 0.5 std restores it.
inline constexpr double kDistractionOffset = 1.19;

inline int correct_answer(int token, int vocab) { return (token + 1) % vocab; }
inline int wrong_answer(int token, int vocab) { return (token + 2) % vocab; }

struct PlantedSpec {
  ExpertSet planted_experts;
  ExpertSet visual_experts;
  std::vector<int> domain_token_ids;
  double logit_margin = 2.0;
  double background_noise = 0.25;
  double modality_offset_strength = 0.0;

  std::vector<int> general_token_ids(int vocab) const {
    std::set<int> dom(domain_token_ids.begin(), domain_token_ids.end());
    std::vector<int> out;
    for (int t = 0; t < vocab; ++t)
      if (!dom.count(t)) out.push_back(t);
    return out;
  }

  std::set<int> visual_layers() const {
    std::set<int> out;
    for (const auto& id : visual_experts.members) out.insert(id.layer);
    return out;
  }
};

inline void validate_planted(const ToyMoEConfig& config, const PlantedSpec& spec) {
  config.validate();
  const int v = config.vocab_size;
  if (config.hidden_dim < 2 * v + 2)
    throw Error("planted model needs hidden_dim >= 2 * vocab_size + 2");
  if (config.ffn_dim < v) throw Error("planted model needs ffn_dim >= vocab_size");
  if (v < 3) throw Error("planted model needs vocab_size >= 3");
  if (!(spec.background_noise >= 0.0)) throw Error("background_noise must be >= 0");
  if (!(spec.logit_margin > spec.background_noise))
    throw Error("logit_margin must exceed the background noise amplitude");
  if (!(spec.modality_offset_strength >= 0.0))
    throw Error("modality_offset_strength must be >= 0");
  const ExpertGrid grid = config.grid();
  if (!(spec.planted_experts.grid == grid) || !(spec.visual_experts.grid == grid))
    throw Error("planted expert sets do not match the model grid");
  std::set<int> dom;
  for (int t : spec.domain_token_ids) {
    if (t < 0 || t >= v) throw Error("domain token id outside the vocabulary");
    if (!dom.insert(t).second) throw Error("duplicate domain token id");
  }
  if (dom.empty() || static_cast<int>(dom.size()) == v)
    throw Error("domain tokens must be a non-empty proper subset of the vocabulary");
  for (int l = 0; l < grid.num_layers; ++l) {
    const auto planted = spec.planted_experts.at_layer(l);
    const auto visual = spec.visual_experts.at_layer(l);
    if (static_cast<int>(planted.size()) > config.top_k)
      throw Error("layer " + std::to_string(l) + " plants more experts than top_k");
    if (grid.experts_per_layer - static_cast<int>(planted.size()) < config.top_k)
      throw Error("layer " + std::to_string(l) +
                  " leaves fewer than top_k non-planted experts");
    for (int i : visual)
      if (spec.planted_experts.contains({l, i}))
        throw Error("an expert cannot be both planted and visual");
  }
}

/// `config` with the vocabulary shrunk until the planted layout fits, and
/// rounded down to an even size so domain and general halves pair up.
inline ToyMoEConfig planted_config(ToyMoEConfig config) {
  config.vocab_size = std::min({config.vocab_size, (config.hidden_dim - 2) / 2, config.ffn_dim});
  config.vocab_size -= config.vocab_size % 2;
  return config;
}

/// Builds the planted toy described at the top of this file.
inline Model plant_specialization(const ToyMoEConfig& config, const PlantedSpec& spec) {
  validate_planted(config, spec);
  const int v = config.vocab_size;
  const int d = config.hidden_dim;
  const int f = config.ffn_dim;
  const int e = config.num_routed_experts;
  const int vote = v;
  const int flag = 2 * v;
  const int modality = 2 * v + 1;

  std::vector<int> token_class(static_cast<std::size_t>(v));
  std::vector<int> dom(spec.domain_token_ids);
  std::sort(dom.begin(), dom.end());
  const std::vector<int> gen = spec.general_token_ids(v);
  for (std::size_t r = 0; r < dom.size(); ++r) token_class[dom[r]] = static_cast<int>(r);
  for (std::size_t r = 0; r < gen.size(); ++r) token_class[gen[r]] = static_cast<int>(r);
  const int classes = static_cast<int>(std::max(dom.size(), gen.size()));

  Model m;
  m.config = config;
  m.label = "planted";
  m.normalize_inputs = false;
  m.embedding = Eigen::MatrixXd::Zero(v, d);
  for (int t = 0; t < v; ++t) {
    m.embedding(t, t) = 1.0;
    m.embedding(t, flag) = std::binary_search(dom.begin(), dom.end(), t) ? 1.0 : -1.0;
  }
  m.image_offset = Eigen::VectorXd::Zero(d);
  m.image_offset(modality) = spec.modality_offset_strength;
  m.unembedding = Eigen::MatrixXd::Zero(v, d);
  for (int t = 0; t < v; ++t) m.unembedding(t, vote + t) = 1.0;

  Rng rng(config.seed);
  const std::set<int> visual_layers = spec.visual_layers();
  const double planted_weight = spec.logit_margin + spec.background_noise;
  m.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (int l = 0; l < config.num_layers; ++l) {
    MoELayer& layer = m.layers[l];
    layer.mixer = FeedForward::zeros(d, f);
    layer.router = Eigen::MatrixXd::Zero(e, d);
    // Noise is drawn for every (expert, class) so the draw order is fixed.
    for (int i = 0; i < e; ++i) {
      std::vector<double> noise(static_cast<std::size_t>(classes));
      for (double& n : noise) n = rng.uniform(-spec.background_noise, spec.background_noise);
      const ExpertId id{l, i};
      if (spec.planted_experts.contains(id)) {
        layer.router(i, flag) = planted_weight;
        if (visual_layers.count(l)) layer.router(i, modality) = -1.0;
      } else if (spec.visual_experts.contains(id)) {
        layer.router(i, modality) = 1.0;
      } else {
        for (int t = 0; t < v; ++t) layer.router(i, t) = noise[token_class[t]];
      }
    }
    for (int i = 0; i < e; ++i) {
      FeedForward ffn = FeedForward::zeros(d, f);
      const bool planted = spec.planted_experts.contains({l, i});
      for (int t = 0; t < v; ++t) {
        ffn.up(t, t) = 1.0;
        if (planted) {
          ffn.down(vote + correct_answer(t, v), t) = 1.0;
        } else {
          ffn.down(vote + wrong_answer(t, v), t) = kWrongVoteScale;
        }
      }
      layer.experts.push_back(std::move(ffn));
    }
    for (int s = 0; s < config.num_shared_experts; ++s)
      layer.shared.push_back(FeedForward::zeros(d, f));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Streams and task instances

/// One prompt per sample, each a random permutation of `tokens`.
inline std::vector<TokenSequence> permutation_stream(const std::vector<int>& tokens,
                                                     int samples, Modality modality,
                                                     Rng& rng) {
  std::vector<TokenSequence> out;
  for (int s = 0; s < samples; ++s) {
    std::vector<int> perm(tokens);
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::swap(perm[i - 1], perm[rng.below(i)]);
    }
    out.push_back(make_prompt(perm, modality));
  }
  return out;
}

struct TaskInstance {
  TokenSequence prompt;
  int answer = 0;
};

/// Prompts of `length` random domain tokens; the answer belongs to the last one.
inline std::vector<TaskInstance> domain_task_instances(const PlantedSpec& spec, int vocab,
                                                       int count, int length,
                                                       Modality modality, Rng& rng) {
  if (length <= 0) throw Error("task prompts need at least one token");
  std::vector<TaskInstance> out;
  for (int c = 0; c < count; ++c) {
    std::vector<int> tokens;
    for (int j = 0; j < length; ++j)
      tokens.push_back(spec.domain_token_ids[rng.below(spec.domain_token_ids.size())]);
    out.push_back({make_prompt(tokens, modality), correct_answer(tokens.back(), vocab)});
  }
  return out;
}

/// Fraction of instances whose first greedy token equals the answer.
template <typename RunFn>
double task_accuracy(const std::vector<TaskInstance>& instances, RunFn&& run) {
  if (instances.empty()) throw Error("accuracy over zero task instances");
  int hits = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const ForwardRecord rec = run(instances[i].prompt, static_cast<std::uint64_t>(i));
    if (!rec.outputs.empty() && rec.outputs.front().token_id == instances[i].answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(instances.size());
}

/// Default planted layout for a grid: one planted expert on each middle layer
/// (all layers when there are fewer than three), drawn from `seed`, and
/// `top_k` visual experts on the same layers. Domain tokens are the lower
/// half of the vocabulary.
inline PlantedSpec default_planted_spec(const ToyMoEConfig& config, std::uint64_t seed,
                                        double offset_strength = 0.0) {
  PlantedSpec spec;
  const ExpertGrid grid = config.grid();
  spec.planted_experts.grid = grid;
  spec.planted_experts.label = SetLabel::kDomain;
  spec.visual_experts.grid = grid;
  spec.visual_experts.label = SetLabel::kVisual;
  const int lo = config.num_layers < 3 ? 0 : config.num_layers / 4;
  const int hi = config.num_layers < 3 ? config.num_layers - 1
                                       : config.num_layers - 1 - config.num_layers / 4;
  Rng rng(derive_seed(seed, 0x706c616e74ULL));
  for (int l = lo; l <= hi; ++l) {
    std::vector<int> experts(static_cast<std::size_t>(grid.experts_per_layer));
    for (int i = 0; i < grid.experts_per_layer; ++i) experts[i] = i;
    for (std::size_t i = experts.size(); i > 1; --i)
      std::swap(experts[i - 1], experts[rng.below(i)]);
    spec.planted_experts.insert({l, experts[0]});
    const int visual = std::min(config.top_k, grid.experts_per_layer - 1 - config.top_k);
    for (int j = 0; j < visual; ++j) spec.visual_experts.insert({l, experts[1 + j]});
  }
  for (int t = 0; t < config.vocab_size / 2; ++t) spec.domain_token_ids.push_back(t);
  spec.modality_offset_strength = offset_strength;
  return spec;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json planted_spec_to_json(const PlantedSpec& spec) {
  auto ids = [](const ExpertSet& s) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& id : s.members) arr.push_back({{"layer", id.layer}, {"index", id.index}});
    return arr;
  };
  nlohmann::ordered_json j;
  j["planted_experts"] = ids(spec.planted_experts);
  j["visual_experts"] = ids(spec.visual_experts);
  j["domain_token_ids"] = spec.domain_token_ids;
  j["logit_margin"] = spec.logit_margin;
  j["background_noise"] = spec.background_noise;
  j["modality_offset_strength"] = spec.modality_offset_strength;
  return j;
}

inline PlantedSpec planted_spec_from_json(const nlohmann::json& j, ExpertGrid grid) {
  try {
    PlantedSpec spec;
    spec.planted_experts.grid = grid;
    spec.planted_experts.label = SetLabel::kDomain;
    spec.visual_experts.grid = grid;
    spec.visual_experts.label = SetLabel::kVisual;
    for (const auto& m : j.at("planted_experts"))
      spec.planted_experts.insert({m.at("layer").get<int>(), m.at("index").get<int>()});
    if (j.contains("visual_experts")) {
      for (const auto& m : j.at("visual_experts"))
        spec.visual_experts.insert({m.at("layer").get<int>(), m.at("index").get<int>()});
    }
    spec.domain_token_ids = j.at("domain_token_ids").get<std::vector<int>>();
    spec.logit_margin = j.value("logit_margin", spec.logit_margin);
    spec.background_noise = j.value("background_noise", spec.background_noise);
    spec.modality_offset_strength =
        j.value("modality_offset_strength", spec.modality_offset_strength);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed planted spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Concept read-out toy

/// Layers are numbered by the hidden hook point (residual entering the MoE
/// block). A hidden-state edit at layer l changes the answer of an image
/// token exactly when concept_layer <= l <= commit_layer.
struct ConceptToySpec {
  int concept_layer = 1;
  int commit_layer = -1;  // -1: last layer
};

inline int concept_answer(int token, int vocab) { return (token + 1) % vocab; }

/// `config` adjusted to host the read-out toy: vocabulary shrunk to fit
/// 4V + 1 hidden coordinates and 2V ffn units, at least one shared expert.
inline ToyMoEConfig concept_toy_config(ToyMoEConfig config) {
  config.vocab_size =
      std::min({config.vocab_size, (config.hidden_dim - 1) / 4, config.ffn_dim / 2});
  config.num_shared_experts = std::max(config.num_shared_experts, 1);
  return config;
}

// Layout (V = vocab): token T [0,V), visual P [V,2V), concept C [2V,3V),
// answer A [3V,4V), modality 4V. IMAGE adds 1 on the modality coordinate.
//
//   layer 0 mixer        image only: T -> P
//   shared, layer c-1    text: T -> C; image: P -> C (T ignored)
//   shared, layer a      C -> A with gain 1 for text, 3 for image
//
// An edit h - h_src + h_tgt taken from text prompts therefore swaps the
// concept only while the image token holds it in C; earlier it sits in P
// (the text-space subtraction misses it), later the amplified image answer
// outvotes the transplanted text answer.
inline Model plant_concept_toy(const ToyMoEConfig& config, ConceptToySpec spec) {
  config.validate();
  const int v = config.vocab_size;
  const int d = config.hidden_dim;
  const int f = config.ffn_dim;
  const int num_layers = config.num_layers;
  if (spec.commit_layer < 0) spec.commit_layer = num_layers - 1;
  if (config.num_shared_experts < 1)
    throw Error("concept toy needs at least one shared expert per layer");
  if (d < 4 * v + 1) throw Error("concept toy needs hidden_dim >= 4 * vocab_size + 1");
  if (f < 2 * v) throw Error("concept toy needs ffn_dim >= 2 * vocab_size");
  if (v < 2) throw Error("concept toy needs vocab_size >= 2");
  if (spec.concept_layer < 1 || spec.concept_layer > spec.commit_layer ||
      spec.commit_layer >= num_layers) {
    throw Error("concept toy needs 1 <= concept_layer <= commit_layer < num_layers");
  }
  const int tok = 0, vis = v, con = 2 * v, ans = 3 * v, mod = 4 * v;

  Model m;
  m.config = config;
  m.label = "concept-toy";
  m.normalize_inputs = false;
  m.embedding = Eigen::MatrixXd::Zero(v, d);
  for (int t = 0; t < v; ++t) m.embedding(t, tok + t) = 1.0;
  m.image_offset = Eigen::VectorXd::Zero(d);
  m.image_offset(mod) = 1.0;
  m.unembedding = Eigen::MatrixXd::Zero(v, d);
  for (int t = 0; t < v; ++t) m.unembedding(t, ans + t) = 1.0;

  m.layers.resize(static_cast<std::size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l) {
    MoELayer& layer = m.layers[l];
    layer.mixer = FeedForward::zeros(d, f);
    layer.router = Eigen::MatrixXd::Zero(config.num_routed_experts, d);
    for (int i = 0; i < config.num_routed_experts; ++i)
      layer.experts.push_back(FeedForward::zeros(d, f));
    for (int s = 0; s < config.num_shared_experts; ++s)
      layer.shared.push_back(FeedForward::zeros(d, f));
  }

  FeedForward& encode = m.layers[0].mixer;
  for (int j = 0; j < v; ++j) {
    encode.up(j, tok + j) = 1.0;
    encode.up(j, mod) = 1.0;
    encode.up_bias(j) = -1.0;
    encode.down(vis + j, j) = 1.0;
    encode.down(tok + j, j) = -1.0;
  }

  FeedForward& form = m.layers[spec.concept_layer - 1].shared[0];
  for (int j = 0; j < v; ++j) {
    form.up(j, tok + j) = 1.0;
    form.up(j, mod) = -2.0;
    form.down(con + j, j) = 1.0;
    form.down(tok + j, j) = -1.0;
    form.up(v + j, vis + j) = 1.0;
    form.down(con + j, v + j) = 1.0;
    form.down(vis + j, v + j) = -1.0;
  }

  FeedForward& read = m.layers[spec.commit_layer].shared[0];
  for (int j = 0; j < v; ++j) {
    const int a = ans + concept_answer(j, v);
    read.up(j, con + j) = 1.0;
    read.down(a, j) = 1.0;
    read.down(con + j, j) = -1.0;
    read.up(v + j, con + j) = 1.0;
    read.up(v + j, mod) = 1.0;
    read.up_bias(v + j) = -1.0;
    read.down(a, v + j) = 2.0;
  }
  return m;
}

}  // namespace moeroute
