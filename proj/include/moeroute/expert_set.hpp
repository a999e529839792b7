// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "moeroute/stats.hpp"
#include "moeroute/types.hpp"

namespace moeroute {

enum class SetLabel : std::uint8_t { kDomain, kVisual, kRandomControl, kOverlap };

inline std::string_view to_string(SetLabel label) {
  switch (label) {
    case SetLabel::kDomain: return "domain";
    case SetLabel::kVisual: return "visual";
    case SetLabel::kRandomControl: return "random_control";
    case SetLabel::kOverlap: return "overlap";
  }
  return "domain";
}

inline SetLabel parse_set_label(std::string_view text) {
  if (text == "domain") return SetLabel::kDomain;
  if (text == "visual") return SetLabel::kVisual;
  if (text == "random_control") return SetLabel::kRandomControl;
  if (text == "overlap") return SetLabel::kOverlap;
  throw Error("unknown expert-set label '" + std::string(text) + "'");
}

/// A labelled collection of routed experts plus the provenance that produced it.
struct ExpertSet {
  SetLabel label = SetLabel::kDomain;
  ExpertGrid grid;
  std::set<ExpertId> members;
  double tau = 0.3;
  std::pair<std::string, std::string> source_datasets;
  int sample_count = 0;

  bool empty() const { return members.empty(); }
  std::size_t size() const { return members.size(); }
  bool contains(ExpertId id) const { return members.count(id) > 0; }

  /// Member indices at one layer, ascending.
  std::vector<int> at_layer(int layer) const {
    std::vector<int> out;
    for (auto it = members.lower_bound({layer, 0});
         it != members.end() && it->layer == layer; ++it) {
      out.push_back(it->index);
    }
    return out;
  }

  void insert(ExpertId id) {
    if (!grid.contains(id)) {
      throw Error("expert (" + std::to_string(id.layer) + "," +
                  std::to_string(id.index) + ") outside the grid");
    }
    members.insert(id);
  }

  bool operator==(const ExpertSet&) const = default;
};

inline void check_same_grid(const ExpertSet& a, const ExpertSet& b) {
  if (!(a.grid == b.grid)) throw Error("expert sets use different grids");
}

/// Members are experts whose frequency difference strictly exceeds tau.
/// An empty result is legal and reported with a warning.
inline ExpertSet identify(const ActivationFrequencyTable& domain_table,
                          const ActivationFrequencyTable& general_table, double tau,
                          SetLabel label, int sample_count = 0) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error("tau must lie in (0, 1)");
  const FrequencyDelta delta = frequency_difference(domain_table, general_table);
  ExpertSet out;
  out.label = label;
  out.grid = delta.grid;
  out.tau = tau;
  out.source_datasets = {domain_table.dataset_label, general_table.dataset_label};
  out.sample_count = sample_count;
  for (int l = 0; l < delta.grid.num_layers; ++l) {
    for (int i = 0; i < delta.grid.experts_per_layer; ++i) {
      if (delta.at({l, i}) > tau) out.members.insert({l, i});
    }
  }
  if (out.empty()) {
    log_warning("no expert exceeds tau=" + std::to_string(tau) + " for " +
                std::string(to_string(label)) + " identification");
  }
  return out;
}

inline ExpertSet overlap(const ExpertSet& a, const ExpertSet& b) {
  check_same_grid(a, b);
  ExpertSet out;
  out.label = SetLabel::kOverlap;
  out.grid = a.grid;
  out.tau = a.tau;
  out.source_datasets = {std::string(to_string(a.label)), std::string(to_string(b.label))};
  out.sample_count = std::min(a.sample_count, b.sample_count);
  for (const auto& id : a.members)
    if (b.contains(id)) out.members.insert(id);
  return out;
}

struct LayerHistogram {
  std::vector<int> counts;
  std::vector<int> overlap_counts;  // empty unless a second set was given
};

inline LayerHistogram layer_histogram(const ExpertSet& set,
                                      const ExpertSet* other = nullptr) {
  LayerHistogram h;
  h.counts.assign(static_cast<std::size_t>(set.grid.num_layers), 0);
  for (const auto& id : set.members) ++h.counts[id.layer];
  if (other != nullptr) {
    check_same_grid(set, *other);
    h.overlap_counts.assign(h.counts.size(), 0);
    for (const auto& id : set.members)
      if (other->contains(id)) ++h.overlap_counts[id.layer];
  }
  return h;
}

// ---------------------------------------------------------------------------
// JSON: {label, tau, members:[{layer,index}], source_datasets, sample_count,
//        num_layers, experts_per_layer}

inline nlohmann::ordered_json to_json(const ExpertSet& set) {
  nlohmann::ordered_json j;
  j["label"] = to_string(set.label);
  j["tau"] = set.tau;
  auto members = nlohmann::ordered_json::array();
  for (const auto& id : set.members) {
    nlohmann::ordered_json m;
    m["layer"] = id.layer;
    m["index"] = id.index;
    members.push_back(std::move(m));
  }
  j["members"] = std::move(members);
  j["source_datasets"] = {set.source_datasets.first, set.source_datasets.second};
  j["sample_count"] = set.sample_count;
  j["num_layers"] = set.grid.num_layers;
  j["experts_per_layer"] = set.grid.experts_per_layer;
  return j;
}

inline ExpertSet expert_set_from_json(const nlohmann::json& j) {
  try {
    ExpertSet set;
    set.label = parse_set_label(j.at("label").get<std::string>());
    set.tau = j.at("tau").get<double>();
    set.grid = {j.at("num_layers").get<int>(), j.at("experts_per_layer").get<int>()};
    const auto& src = j.at("source_datasets");
    if (!src.is_array() || src.size() != 2)
      throw Error("source_datasets must be a two-element array");
    set.source_datasets = {src[0].get<std::string>(), src[1].get<std::string>()};
    set.sample_count = j.at("sample_count").get<int>();
    for (const auto& m : j.at("members")) {
      ExpertId id{m.at("layer").get<int>(), m.at("index").get<int>()};
      if (set.contains(id)) throw Error("duplicate member in expert set");
      set.insert(id);
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed expert set: ") + e.what());
  }
}

}  // namespace moeroute
