// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "moeroute/types.hpp"

namespace moeroute {

/// Routing decision for one token at one layer.
///
/// `logits` are the raw router outputs. When a router hook ran,
/// `adjusted_logits` holds the edited vector that actually fed the softmax;
/// otherwise it is empty. `probabilities` may be empty for records read
/// from traces that carry no logits.
struct RoutingRecord {
  int token_position = 0;
  int layer = 0;
  Phase phase = Phase::kPrompt;
  std::vector<double> logits;
  std::vector<double> adjusted_logits;
  std::vector<double> probabilities;
  std::vector<int> topk_indices;
  std::vector<double> topk_weights;

  const std::vector<double>& effective_logits() const {
    return adjusted_logits.empty() ? logits : adjusted_logits;
  }
  bool has_probabilities() const { return !probabilities.empty(); }
  bool operator==(const RoutingRecord&) const = default;
};

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

/// Indices of the k largest scores; equal scores resolve to the lower index.
inline std::vector<int> select_top_k(std::span<const double> scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[a] > scores[b];
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

/// softmax over all routed experts -> Top-K -> renormalize over the selection.
/// `record.logits` / `adjusted_logits` must already be filled.
inline void complete_routing(RoutingRecord& record, int top_k) {
  const auto& used = record.effective_logits();
  if (top_k <= 0 || static_cast<std::size_t>(top_k) > used.size()) {
    throw Error("top_k must lie in [1, number of experts]");
  }
  record.probabilities = softmax(used);
  record.topk_indices = select_top_k(record.probabilities, top_k);
  record.topk_weights.resize(record.topk_indices.size());
  double mass = 0.0;
  for (int idx : record.topk_indices) mass += record.probabilities[idx];
  for (std::size_t j = 0; j < record.topk_indices.size(); ++j) {
    record.topk_weights[j] = record.probabilities[record.topk_indices[j]] / mass;
  }
}

}  // namespace moeroute
