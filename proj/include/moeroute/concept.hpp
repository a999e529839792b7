// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Cross-modal concept edits on hidden states: h <- h - alpha*h_src + alpha*h_tgt,
// applied at image-token positions of one layer at a time.

#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

#include "moeroute/model.hpp"
#include "moeroute/planted.hpp"
#include "moeroute/rng.hpp"

namespace moeroute {

struct ConceptVectorBank {
  std::map<int, std::vector<double>> per_layer_src;
  std::map<int, std::vector<double>> per_layer_tgt;
  double alpha = 1.0;

  bool has_layer(int layer) const {
    return per_layer_src.count(layer) > 0 && per_layer_tgt.count(layer) > 0;
  }
  bool operator==(const ConceptVectorBank&) const = default;
};

/// Captures the hidden hook value at `position` of both prompts on every layer.
inline ConceptVectorBank extract_concept_vectors(const Model& model,
                                                 const TokenSequence& src_prompt,
                                                 const TokenSequence& tgt_prompt,
                                                 int position, double alpha = 1.0) {
  auto in_range = [&](const TokenSequence& s) {
    return position >= 0 && position < static_cast<int>(s.size());
  };
  if (!in_range(src_prompt) || !in_range(tgt_prompt))
    throw Error("concept position " + std::to_string(position) + " outside the prompt");
  ForwardOptions opts;
  opts.capture_hidden = true;
  opts.max_new_tokens = 0;
  const ForwardRecord src = forward(model, src_prompt, {}, opts);
  const ForwardRecord tgt = forward(model, tgt_prompt, {}, opts);
  ConceptVectorBank bank;
  bank.alpha = alpha;
  for (int l = 0; l < model.config.num_layers; ++l) {
    bank.per_layer_src[l] = src.hidden[position][l];
    bank.per_layer_tgt[l] = tgt.hidden[position][l];
  }
  return bank;
}

/// In-place affine edit. alpha = 0 leaves `hidden` untouched.
inline void apply_concept_edit_in_place(std::span<double> hidden,
                                        const ConceptVectorBank& bank, int layer,
                                        double alpha) {
  if (!bank.has_layer(layer))
    throw Error("concept bank has no vectors for layer " + std::to_string(layer));
  const auto& src = bank.per_layer_src.at(layer);
  const auto& tgt = bank.per_layer_tgt.at(layer);
  if (src.size() != hidden.size() || tgt.size() != hidden.size())
    throw Error("concept vector dimension does not match the hidden state");
  if (alpha == 0.0) return;
  for (std::size_t i = 0; i < hidden.size(); ++i)
    hidden[i] = hidden[i] - alpha * src[i] + alpha * tgt[i];
}

inline std::vector<double> apply_concept_edit(std::span<const double> hidden,
                                              const ConceptVectorBank& bank, int layer,
                                              double alpha) {
  std::vector<double> out(hidden.begin(), hidden.end());
  apply_concept_edit_in_place(out, bank, layer, alpha);
  return out;
}

/// Hidden hook that edits image-modality positions at a single layer.
inline HookBundle concept_edit_hooks(const ConceptVectorBank& bank, int layer) {
  HookBundle hooks;
  hooks.hidden = [&bank, layer](const HookSite& site, std::span<double> h) {
    if (site.layer != layer || site.modality != Modality::kImage) return;
    apply_concept_edit_in_place(h, bank, layer, bank.alpha);
  };
  return hooks;
}

struct ConceptTask {
  TokenSequence prompt;    // contains the image-tagged concept tokens
  ConceptVectorBank bank;  // source -> target vectors
  int target_answer = 0;
};

struct SweepResult {
  std::vector<double> per_layer_success_rate;
  int trials = 0;
};

using SuccessPredicate = std::function<bool(const ForwardRecord&, int target_answer)>;

/// Exact match of the first greedy token.
inline bool first_token_matches(const ForwardRecord& out, int target_answer) {
  return !out.outputs.empty() && out.outputs.front().token_id == target_answer;
}

/// For every layer independently, edits image positions at that layer only
/// and records the fraction of tasks judged successful.
inline SweepResult sweep_layers(const Model& model, const std::vector<ConceptTask>& tasks,
                                const SuccessPredicate& success = first_token_matches) {
  if (tasks.empty()) throw Error("concept sweep over an empty task list");
  SweepResult result;
  result.trials = static_cast<int>(tasks.size());
  for (int l = 0; l < model.config.num_layers; ++l) {
    int hits = 0;
    for (const auto& task : tasks) {
      const ForwardRecord out = forward(model, task.prompt, concept_edit_hooks(task.bank, l));
      if (success(out, task.target_answer)) ++hits;
    }
    result.per_layer_success_rate.push_back(static_cast<double>(hits) /
                                            static_cast<double>(tasks.size()));
  }
  return result;
}

/// Random source/target concept pairs for the read-out toy. Each prompt is
/// `prefix` text tokens followed by the concept token; the concept vectors
/// come from the all-text version of the prompt at the concept position.
inline std::vector<ConceptTask> make_concept_tasks(const Model& model, int trials,
                                                   std::uint64_t seed, int prefix = 1,
                                                   double alpha = 1.0) {
  const int vocab = model.config.vocab_size;
  if (vocab < 2) throw Error("concept tasks need at least two tokens");
  Rng rng(seed);
  std::vector<ConceptTask> tasks;
  for (int n = 0; n < trials; ++n) {
    std::vector<int> tokens;
    for (int j = 0; j < prefix; ++j) tokens.push_back(static_cast<int>(rng.below(vocab)));
    const int src = static_cast<int>(rng.below(vocab));
    int tgt = static_cast<int>(rng.below(vocab - 1));
    if (tgt >= src) ++tgt;
    const int position = prefix;

    std::vector<int> src_tokens(tokens), tgt_tokens(tokens);
    src_tokens.push_back(src);
    tgt_tokens.push_back(tgt);
    ConceptTask task;
    task.prompt = make_prompt(src_tokens, Modality::kText);
    task.prompt.modality_tags[position] = Modality::kImage;
    task.bank = extract_concept_vectors(model, make_prompt(src_tokens),
                                        make_prompt(tgt_tokens), position, alpha);
    task.target_answer = concept_answer(tgt, vocab);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

}  // namespace moeroute
