// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Routing-guided expert activation: router-logit edits that raise the
// activation of a target expert set on a contiguous range of layers.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moeroute/expert_set.hpp"
#include "moeroute/model.hpp"
#include "moeroute/rng.hpp"

namespace moeroute {

enum class Strategy : std::uint8_t { kSoft, kHard, kRandom };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kSoft: return "soft";
    case Strategy::kHard: return "hard";
    case Strategy::kRandom: return "random";
  }
  return "soft";
}

inline Strategy parse_strategy(std::string_view text) {
  if (text == "soft") return Strategy::kSoft;
  if (text == "hard") return Strategy::kHard;
  if (text == "random") return Strategy::kRandom;
  throw Error("unknown strategy '" + std::string(text) + "'");
}

/// Inclusive layer range.
struct LayerRange {
  int lo = 0;
  int hi = 0;

  bool contains(int layer) const { return layer >= lo && layer <= hi; }
  bool operator==(const LayerRange&) const = default;
};

struct InterventionConfig {
  Strategy strategy = Strategy::kSoft;
  double lambda = 0.5;
  double delta_std = 1e-2;
  LayerRange layers;
  std::uint64_t seed = 0;
  ExpertSet target_set;

  void validate(ExpertGrid grid) const {
    if (layers.lo > layers.hi) throw Error("layer range must satisfy lo <= hi");
    if (layers.lo < 0 || layers.hi >= grid.num_layers)
      throw Error("layer range [" + std::to_string(layers.lo) + ", " +
                  std::to_string(layers.hi) + "] outside the model's layers");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (strategy == Strategy::kHard && !(delta_std > 0.0))
      throw Error("hard intervention needs delta_std > 0");
    if (!(target_set.grid == grid)) throw Error("target expert set grid does not match the model");
  }
};

/// Per-model defaults: inclusive layer range, tau and lambda.
struct InterventionPreset {
  LayerRange layers;
  double tau = 0.3;
  double lambda = 0.5;
};

inline InterventionPreset intervention_preset(std::string_view name) {
  if (name == "kimi-like") return {{0, 20}, 0.3, 0.5};
  if (name == "qwen-like") return {{6, 42}, 0.3, 0.5};
  if (name == "llama-like") return {{8, 40}, 0.3, 0.2};
  if (name == "desk") return {{1, 2}, 0.3, 0.5};
  throw Error("no intervention preset for '" + std::string(name) + "'");
}

/// Population standard deviation (divides by n).
inline double population_std(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(values.size()));
}

namespace detail {

inline void check_targets(std::span<const int> targets, std::size_t n) {
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= n)
      throw Error("target expert index " + std::to_string(t) + " out of range");
  }
}

}  // namespace detail

/// r_k += lambda * s(r) for every target, s taken once from the original r.
inline void soft_adjust_in_place(std::span<double> logits, std::span<const int> targets,
                                 double lambda) {
  detail::check_targets(targets, logits.size());
  const double boost = lambda * population_std(logits);
  for (int t : targets) logits[t] += boost;
}

inline std::vector<double> adjust_logits_soft(std::span<const double> logits,
                                              std::span<const int> targets, double lambda) {
  std::vector<double> out(logits.begin(), logits.end());
  soft_adjust_in_place(out, targets, lambda);
  return out;
}

/// r_k = max_j r_j + delta_k, delta_k ~ N(0, delta_std^2) drawn per target.
inline void hard_adjust_in_place(std::span<double> logits, std::span<const int> targets,
                                 Rng& rng, double delta_std = 1e-2) {
  if (targets.empty()) throw Error("hard intervention needs at least one target");
  detail::check_targets(targets, logits.size());
  const double peak = *std::max_element(logits.begin(), logits.end());
  for (int t : targets) logits[t] = peak + rng.normal(0.0, delta_std);
}

inline std::vector<double> adjust_logits_hard(std::span<const double> logits,
                                              std::span<const int> targets, Rng& rng,
                                              double delta_std = 1e-2) {
  std::vector<double> out(logits.begin(), logits.end());
  hard_adjust_in_place(out, targets, rng, delta_std);
  return out;
}

/// For each layer, samples without replacement as many experts as the domain
/// set holds there, drawn from the experts outside the domain set.
inline ExpertSet select_random_targets(const ExpertSet& domain_set, ExpertGrid grid, Rng& rng) {
  if (!(domain_set.grid == grid)) throw Error("domain set grid does not match");
  ExpertSet out;
  out.label = SetLabel::kRandomControl;
  out.grid = grid;
  out.tau = domain_set.tau;
  out.source_datasets = domain_set.source_datasets;
  out.sample_count = domain_set.sample_count;
  for (int l = 0; l < grid.num_layers; ++l) {
    const auto chosen = domain_set.at_layer(l);
    if (chosen.empty()) continue;
    std::vector<int> pool;
    for (int i = 0; i < grid.experts_per_layer; ++i)
      if (!domain_set.contains({l, i})) pool.push_back(i);
    if (pool.size() < chosen.size())
      throw Error("layer " + std::to_string(l) + " has too few non-domain experts for a control set");
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      const std::size_t pick = j + rng.below(pool.size() - j);
      std::swap(pool[j], pool[pick]);
      out.members.insert({l, pool[j]});
    }
  }
  return out;
}

/// Per-layer count of routing calls the hook actually edited.
struct InterventionAudit {
  std::vector<std::int64_t> adjusted_calls;
};

/// Router-logit hook for one sequence. The control set for RANDOM is drawn
/// once per run from `config.seed`; the HARD noise stream is derived from
/// (seed, sequence_id) so sequences can run independently.
class RouterIntervention {
 public:
  RouterIntervention(const InterventionConfig& config, ExpertGrid grid)
      : config_(config), grid_(grid) {
    config_.validate(grid);
    if (config_.strategy == Strategy::kRandom) {
      Rng pick(derive_seed(config_.seed, 0x72616e646f6dULL));
      targets_ = select_random_targets(config_.target_set, grid, pick);
    } else {
      targets_ = config_.target_set;
    }
    per_layer_.resize(static_cast<std::size_t>(grid.num_layers));
    for (int l = 0; l < grid.num_layers; ++l) per_layer_[l] = targets_.at_layer(l);
    if (targets_.empty()) log_warning("intervention target set is empty; running unmodified");
  }

  const ExpertSet& targets() const { return targets_; }
  const InterventionConfig& config() const { return config_; }

  /// Hook bundle bound to one sequence; `audit` (optional) is incremented.
  HookBundle hooks(std::uint64_t sequence_id, InterventionAudit* audit = nullptr) const {
    auto rng = std::make_shared<Rng>(derive_seed(config_.seed, sequence_id));
    if (audit && audit->adjusted_calls.empty())
      audit->adjusted_calls.assign(static_cast<std::size_t>(grid_.num_layers), 0);
    HookBundle bundle;
    bundle.router = [this, rng, audit](const HookSite& site, std::span<double> logits) {
      if (!config_.layers.contains(site.layer)) return;
      const auto& targets = per_layer_[site.layer];
      if (targets.empty()) return;
      if (config_.strategy == Strategy::kHard) {
        hard_adjust_in_place(logits, targets, *rng, config_.delta_std);
      } else {
        soft_adjust_in_place(logits, targets, config_.lambda);
      }
      if (audit) ++audit->adjusted_calls[site.layer];
    };
    return bundle;
  }

 private:
  InterventionConfig config_;
  ExpertGrid grid_;
  ExpertSet targets_;
  std::vector<std::vector<int>> per_layer_;
};

inline ForwardRecord run_intervened_forward(const Model& model, const TokenSequence& seq,
                                            const InterventionConfig& config,
                                            std::uint64_t sequence_id = 0,
                                            const ForwardOptions& options = {},
                                            InterventionAudit* audit = nullptr) {
  const RouterIntervention intervention(config, model.grid());
  return forward(model, seq, intervention.hooks(sequence_id, audit), options);
}

/// Fraction of routing calls (within `layers`) in which each target expert
/// was in the Top-K, pooled over all targets.
template <typename Range>
double target_selection_rate(const Range& records, const ExpertSet& targets,
                             LayerRange layers) {
  std::int64_t hits = 0, total = 0;
  for (const RoutingRecord& r : records) {
    if (!layers.contains(r.layer)) continue;
    for (int t : targets.at_layer(r.layer)) {
      ++total;
      if (std::find(r.topk_indices.begin(), r.topk_indices.end(), t) != r.topk_indices.end())
        ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace moeroute
