// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Plants a domain expert, identifies it from two routing streams, then
// shows soft activation recovering accuracy on distracting image prompts.

#include <cstdio>
#include <vector>

#include "moeroute/moeroute.hpp"

using namespace moeroute;

int main() {
  const std::uint64_t seed = 7;
  const ToyMoEConfig config = preset_config("desk", seed);
  const PlantedSpec spec = default_planted_spec(config, seed, kDistractionOffset);
  const Model model = plant_specialization(config, spec);

  Rng rng(derive_seed(seed, 1));
  FrequencyCounter domain(model.grid(), PhaseFilter::kPromptOnly);
  FrequencyCounter general(model.grid(), PhaseFilter::kPromptOnly);
  for (const auto& p : permutation_stream(spec.domain_token_ids, 20, Modality::kText, rng))
    for (const auto& r : forward(model, p).routing) domain.add(r);
  for (const auto& p :
       permutation_stream(spec.general_token_ids(config.vocab_size), 20, Modality::kText, rng))
    for (const auto& r : forward(model, p).routing) general.add(r);
  const ExpertSet found = identify(domain.table("domain"), general.table("general"), 0.3,
                                   SetLabel::kDomain, 20);
  std::printf("identified %zu experts (planted %zu, exact match: %s)\n", found.size(),
              spec.planted_experts.size(),
              found.members == spec.planted_experts.members ? "yes" : "no");

  const auto tasks = domain_task_instances(spec, config.vocab_size, 200, 4, Modality::kImage, rng);
  const double base = task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t) {
    return forward(model, q);
  });
  for (Strategy strategy : {Strategy::kSoft, Strategy::kRandom, Strategy::kHard}) {
    InterventionConfig ic;
    ic.strategy = strategy;
    ic.layers = intervention_preset("desk").layers;
    ic.seed = seed;
    ic.target_set = found;
    const RouterIntervention iv(ic, model.grid());
    const double acc = task_accuracy(tasks, [&](const TokenSequence& q, std::uint64_t id) {
      return forward(model, q, iv.hooks(id));
    });
    std::printf("%-6s accuracy %.3f (baseline %.3f)\n", std::string(to_string(strategy)).c_str(),
                acc, base);
  }
  return 0;
}
