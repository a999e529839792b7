// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Routing statistics: Gini specialization over mean expert probabilities,
// Top-K activation frequency, frequency differences, and Jensen-Shannon
// routing divergence between paired text/image samples.
//
// Every statistic is computed by an accumulator fed one record at a time;
// the range-based helpers are thin loops over the same accumulators, so
// streaming and in-memory results agree bit for bit for a fixed order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moeroute/routing.hpp"
#include "moeroute/types.hpp"

namespace moeroute {

enum class PhaseFilter : std::uint8_t { kAll, kPromptOnly };

inline bool accepts(PhaseFilter filter, Phase phase) {
  return filter == PhaseFilter::kAll || phase == Phase::kPrompt;
}

// ---------------------------------------------------------------------------
// Gini

/// sum_i sum_j |q_i - q_j| / (2 E sum_k q_k), evaluated pairwise.
inline double gini_coefficient(std::span<const double> q) {
  if (q.empty()) throw Error("gini of an empty vector");
  double total = 0.0;
  for (double v : q) {
    if (v < 0.0) throw Error("gini requires non-negative importances");
    total += v;
  }
  if (total <= 0.0) throw Error("gini requires a positive total importance");
  double diff = 0.0;
  for (double a : q)
    for (double b : q) diff += std::abs(a - b);
  return diff / (2.0 * static_cast<double>(q.size()) * total);
}

/// Mean expert probability q_l over the records of one layer.
class GiniAccumulator {
 public:
  explicit GiniAccumulator(int num_experts = 0)
      : sums_(static_cast<std::size_t>(num_experts), 0.0) {}

  void add(std::span<const double> probabilities) {
    if (probabilities.empty()) {
      throw CapabilityError("gini requires logits (record has no probabilities)");
    }
    if (sums_.empty()) sums_.assign(probabilities.size(), 0.0);
    if (probabilities.size() != sums_.size()) {
      throw Error("inconsistent probability vector length: expected " +
                  std::to_string(sums_.size()) + ", got " +
                  std::to_string(probabilities.size()));
    }
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += probabilities[i];
    ++count_;
  }

  void add(const RoutingRecord& record) { add(record.probabilities); }

  std::int64_t count() const { return count_; }

  std::vector<double> mean_importance() const {
    if (count_ == 0) throw Error("gini over an empty record stream");
    std::vector<double> q(sums_);
    for (double& v : q) v /= static_cast<double>(count_);
    return q;
  }

  double value() const { return gini_coefficient(mean_importance()); }

 private:
  std::vector<double> sums_;
  std::int64_t count_ = 0;
};

/// G_l for a stream of records that all belong to one layer.
template <typename Range>
double gini_per_layer(const Range& records) {
  GiniAccumulator acc;
  for (const RoutingRecord& r : records) acc.add(r);
  return acc.value();
}

/// One Gini accumulator per layer.
class GiniProfileBuilder {
 public:
  explicit GiniProfileBuilder(ExpertGrid grid, PhaseFilter filter = PhaseFilter::kAll)
      : grid_(grid), filter_(filter),
        layers_(static_cast<std::size_t>(grid.num_layers),
                GiniAccumulator(grid.experts_per_layer)) {}

  void add(const RoutingRecord& r) {
    if (!accepts(filter_, r.phase)) return;
    check_layer(r.layer);
    layers_[r.layer].add(r);
  }

  std::vector<double> profile() const {
    std::vector<double> out;
    out.reserve(layers_.size());
    for (const auto& acc : layers_) out.push_back(acc.value());
    return out;
  }

 private:
  void check_layer(int layer) const {
    if (layer < 0 || layer >= grid_.num_layers)
      throw Error("record layer " + std::to_string(layer) + " outside the grid");
  }

  ExpertGrid grid_;
  PhaseFilter filter_;
  std::vector<GiniAccumulator> layers_;
};

// ---------------------------------------------------------------------------
// Top-K activation frequency

/// Phi(E_{l,i}, D) for every expert of a grid.
struct ActivationFrequencyTable {
  ExpertGrid grid;
  std::vector<double> values;  // layer-major
  std::int64_t token_count = 0;
  std::string dataset_label;

  double at(ExpertId id) const {
    return values[static_cast<std::size_t>(id.layer * grid.experts_per_layer + id.index)];
  }
  std::span<const double> layer(int l) const {
    return std::span<const double>(values).subspan(
        static_cast<std::size_t>(l * grid.experts_per_layer),
        static_cast<std::size_t>(grid.experts_per_layer));
  }
  bool operator==(const ActivationFrequencyTable&) const = default;
};

/// Counts Top-K memberships per expert and tokens per layer.
class FrequencyCounter {
 public:
  explicit FrequencyCounter(ExpertGrid grid, PhaseFilter filter = PhaseFilter::kAll)
      : grid_(grid), filter_(filter),
        hits_(static_cast<std::size_t>(grid.num_layers * grid.experts_per_layer), 0),
        tokens_(static_cast<std::size_t>(grid.num_layers), 0) {}

  void add(const RoutingRecord& r) {
    if (!accepts(filter_, r.phase)) return;
    if (r.layer < 0 || r.layer >= grid_.num_layers)
      throw Error("record layer " + std::to_string(r.layer) + " outside the grid");
    for (int idx : r.topk_indices) {
      if (idx < 0 || idx >= grid_.experts_per_layer)
        throw Error("expert index " + std::to_string(idx) + " outside the grid");
      ++hits_[static_cast<std::size_t>(r.layer * grid_.experts_per_layer + idx)];
    }
    ++tokens_[static_cast<std::size_t>(r.layer)];
  }

  std::int64_t tokens_at(int layer) const { return tokens_[layer]; }
  std::int64_t hits(ExpertId id) const {
    return hits_[static_cast<std::size_t>(id.layer * grid_.experts_per_layer + id.index)];
  }

  ActivationFrequencyTable table(std::string label) const {
    const std::int64_t n = tokens_.empty() ? 0 : tokens_.front();
    if (n == 0) throw Error("activation frequency over an empty record stream");
    for (std::int64_t t : tokens_) {
      if (t != n) throw Error("layers saw different token counts");
    }
    ActivationFrequencyTable out{grid_, {}, n, std::move(label)};
    out.values.reserve(hits_.size());
    for (std::int64_t h : hits_)
      out.values.push_back(static_cast<double>(h) / static_cast<double>(n));
    return out;
  }

 private:
  ExpertGrid grid_;
  PhaseFilter filter_;
  std::vector<std::int64_t> hits_;
  std::vector<std::int64_t> tokens_;
};

template <typename Range>
ActivationFrequencyTable activation_frequency(const Range& records, ExpertGrid grid,
                                              std::string label,
                                              PhaseFilter filter = PhaseFilter::kAll) {
  FrequencyCounter counter(grid, filter);
  for (const RoutingRecord& r : records) counter.add(r);
  return counter.table(std::move(label));
}

/// Delta Phi = Phi(domain) - Phi(general), laid out like the tables.
struct FrequencyDelta {
  ExpertGrid grid;
  std::vector<double> values;

  double at(ExpertId id) const {
    return values[static_cast<std::size_t>(id.layer * grid.experts_per_layer + id.index)];
  }
};

inline FrequencyDelta frequency_difference(const ActivationFrequencyTable& domain,
                                           const ActivationFrequencyTable& general) {
  if (!(domain.grid == general.grid) || domain.values.size() != general.values.size()) {
    throw Error("frequency tables cover different expert grids");
  }
  FrequencyDelta out{domain.grid, std::vector<double>(domain.values.size())};
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = domain.values[i] - general.values[i];
  return out;
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence

namespace detail {

inline void check_distribution(std::span<const double> p, const char* name) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw Error(std::string("distribution ") + name + " has a negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw Error(std::string("distribution ") + name + " does not sum to 1 (sum=" +
                std::to_string(total) + ")");
}

// sum_i p_i log2(p_i / m_i), with 0 log 0 = 0.
inline double kl_to_mixture(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double m = 0.5 * (p[i] + q[i]);
    acc += p[i] * std::log2(p[i] / m);
  }
  return acc;
}

}  // namespace detail

/// Base-2 Jensen-Shannon divergence, in [0, 1].
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("jsd over vectors of different length");
  detail::check_distribution(p, "p");
  detail::check_distribution(q, "q");
  // Adding the smaller term first makes the result bitwise symmetric.
  const double a = detail::kl_to_mixture(p, q);
  const double b = detail::kl_to_mixture(q, p);
  const double v = 0.5 * (std::min(a, b) + std::max(a, b));
  return std::clamp(v, 0.0, 1.0);
}

/// Per-layer Top-K selection counts over prompt tokens of one sample,
/// normalized to sum to 1 (Phi_l of the divergence measure).
class SelectionDistribution {
 public:
  explicit SelectionDistribution(ExpertGrid grid)
      : grid_(grid),
        counts_(static_cast<std::size_t>(grid.num_layers * grid.experts_per_layer), 0),
        tokens_(static_cast<std::size_t>(grid.num_layers), 0) {}

  void add(const RoutingRecord& r) {
    if (r.phase != Phase::kPrompt) return;
    if (r.layer < 0 || r.layer >= grid_.num_layers)
      throw Error("record layer " + std::to_string(r.layer) + " outside the grid");
    for (int idx : r.topk_indices) {
      if (idx < 0 || idx >= grid_.experts_per_layer)
        throw Error("expert index " + std::to_string(idx) + " outside the grid");
      ++counts_[static_cast<std::size_t>(r.layer * grid_.experts_per_layer + idx)];
    }
    ++tokens_[static_cast<std::size_t>(r.layer)];
  }

  ExpertGrid grid() const { return grid_; }

  /// L x E matrix of normalized counts.
  std::vector<std::vector<double>> distributions() const {
    std::vector<std::vector<double>> out;
    for (int l = 0; l < grid_.num_layers; ++l) {
      if (tokens_[l] == 0) throw Error("sample has no prompt-phase tokens at layer " +
                                       std::to_string(l));
      std::int64_t total = 0;
      for (int i = 0; i < grid_.experts_per_layer; ++i)
        total += counts_[l * grid_.experts_per_layer + i];
      std::vector<double> row(static_cast<std::size_t>(grid_.experts_per_layer));
      for (int i = 0; i < grid_.experts_per_layer; ++i)
        row[i] = static_cast<double>(counts_[l * grid_.experts_per_layer + i]) /
                 static_cast<double>(total);
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  ExpertGrid grid_;
  std::vector<std::int64_t> counts_;
  std::vector<std::int64_t> tokens_;
};

template <typename Range>
std::vector<std::vector<double>> selection_distribution(const Range& records,
                                                        ExpertGrid grid) {
  SelectionDistribution acc(grid);
  for (const RoutingRecord& r : records) acc.add(r);
  return acc.distributions();
}

struct DivergenceProfile {
  std::vector<double> per_layer;
  int sample_count = 0;
};

/// Mean per-sample JSD per layer; samples are reduced in insertion order.
class DivergenceAccumulator {
 public:
  explicit DivergenceAccumulator(ExpertGrid grid)
      : grid_(grid), sums_(static_cast<std::size_t>(grid.num_layers), 0.0) {}

  void add_pair(const SelectionDistribution& text, const SelectionDistribution& image) {
    if (!(text.grid() == grid_) || !(image.grid() == grid_))
      throw Error("paired samples have a different expert geometry");
    const auto a = text.distributions();
    const auto b = image.distributions();
    for (int l = 0; l < grid_.num_layers; ++l) sums_[l] += jsd(a[l], b[l]);
    ++samples_;
  }

  DivergenceProfile profile() const {
    if (samples_ == 0) throw Error("divergence profile over zero samples");
    DivergenceProfile out{sums_, samples_};
    for (double& v : out.per_layer) v /= static_cast<double>(samples_);
    return out;
  }

 private:
  ExpertGrid grid_;
  std::vector<double> sums_;
  int samples_ = 0;
};

struct TracePair {
  std::vector<RoutingRecord> text;
  std::vector<RoutingRecord> image;
};

inline DivergenceProfile divergence_profile(std::span<const TracePair> pairs,
                                            ExpertGrid grid) {
  DivergenceAccumulator acc(grid);
  for (const auto& pair : pairs) {
    SelectionDistribution t(grid), i(grid);
    for (const auto& r : pair.text) t.add(r);
    for (const auto& r : pair.image) i.add(r);
    acc.add_pair(t, i);
  }
  return acc.profile();
}

}  // namespace moeroute
