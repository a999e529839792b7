// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// A small deterministic mixture-of-experts stack used as a test bed for the
// routing statistics and interventions. Each layer is
//
//   h <- h + mixer(norm(h))                 position-wise stand-in for attention
//   [hidden hook on h]                       residual stream entering the MoE block
//   x  = norm(h)
//   r  = router * x                          [router hook on r]
//   p  = softmax(r); S = TopK(p); w = p_S / sum(p_S)
//   h <- h + sum_{i in S} w_i expert_i(x) + sum_j shared_j(x)
//
// and the vocabulary head reads norm(h) after the last layer. Experts are
// two-layer ReLU blocks. Positions do not exchange information.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moeroute/rng.hpp"
#include "moeroute/routing.hpp"
#include "moeroute/types.hpp"

namespace moeroute {

struct ToyMoEConfig {
  int num_layers = 4;
  int num_routed_experts = 8;
  int top_k = 2;
  int num_shared_experts = 1;
  int hidden_dim = 32;
  int ffn_dim = 32;
  int vocab_size = 12;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_layers <= 0 || num_routed_experts <= 0 || top_k <= 0 ||
        hidden_dim <= 0 || ffn_dim <= 0 || vocab_size <= 0) {
      throw Error("model geometry fields must be positive");
    }
    if (num_shared_experts < 0) throw Error("num_shared_experts must be >= 0");
    if (top_k > num_routed_experts) {
      throw Error("top_k (" + std::to_string(top_k) +
                  ") exceeds routed experts per layer (" +
                  std::to_string(num_routed_experts) + ")");
    }
  }

  ExpertGrid grid() const { return {num_layers, num_routed_experts}; }
  bool operator==(const ToyMoEConfig&) const = default;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"desk", "kimi-like",
                                                 "qwen-like", "llama-like"};
  return names;
}

/// Built-in geometries. Expert counts are per layer.
inline ToyMoEConfig preset_config(std::string_view name, std::uint64_t seed = 0) {
  ToyMoEConfig c;
  if (name == "desk") {
    c = {4, 8, 2, 1, 32, 32, 12, seed};
  } else if (name == "kimi-like") {
    c = {27, 64, 6, 2, 32, 32, 32, seed};
  } else if (name == "qwen-like") {
    c = {48, 128, 8, 0, 32, 16, 32, seed};
  } else if (name == "llama-like") {
    c = {48, 16, 1, 1, 32, 32, 32, seed};
  } else {
    throw Error("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<Modality> modality_tags;
  std::vector<Phase> phase_tags;

  std::size_t size() const { return token_ids.size(); }

  void validate() const {
    if (modality_tags.size() != token_ids.size() ||
        phase_tags.size() != token_ids.size()) {
      throw Error("token, modality and phase lists must have equal length");
    }
  }

  void push_back(int token, Modality modality, Phase phase) {
    token_ids.push_back(token);
    modality_tags.push_back(modality);
    phase_tags.push_back(phase);
  }

  bool operator==(const TokenSequence&) const = default;
};

/// Prompt-phase sequence with one modality for every token.
inline TokenSequence make_prompt(std::span<const int> tokens,
                                 Modality modality = Modality::kText) {
  TokenSequence seq;
  for (int t : tokens) seq.push_back(t, modality, Phase::kPrompt);
  return seq;
}

struct FeedForward {
  Eigen::MatrixXd up;       // ffn x hidden
  Eigen::VectorXd up_bias;  // ffn
  Eigen::MatrixXd down;     // hidden x ffn

  static FeedForward zeros(int hidden, int ffn) {
    return {Eigen::MatrixXd::Zero(ffn, hidden), Eigen::VectorXd::Zero(ffn),
            Eigen::MatrixXd::Zero(hidden, ffn)};
  }

  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const {
    Eigen::VectorXd act = up * x + up_bias;
    act = act.cwiseMax(0.0);
    return down * act;
  }
};

struct MoELayer {
  FeedForward mixer;
  Eigen::MatrixXd router;  // E x hidden
  std::vector<FeedForward> experts;
  std::vector<FeedForward> shared;
};

/// Immutable weight bundle. Safe to share across concurrent forward passes.
struct Model {
  ToyMoEConfig config;
  std::string label = "toy";
  bool normalize_inputs = true;
  Eigen::MatrixXd embedding;    // vocab x hidden
  Eigen::VectorXd image_offset; // hidden
  std::vector<MoELayer> layers;
  Eigen::MatrixXd unembedding;  // vocab x hidden

  ExpertGrid grid() const { return config.grid(); }
};

namespace detail {

inline Eigen::MatrixXd gaussian(Rng& rng, int rows, int cols, double stddev) {
  Eigen::MatrixXd m(rows, cols);
  // Row-major draw order regardless of Eigen's storage order.
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, stddev);
  return m;
}

inline FeedForward gaussian_ffn(Rng& rng, int hidden, int ffn, double down_scale) {
  FeedForward f;
  f.up = gaussian(rng, ffn, hidden, 1.0 / std::sqrt(double(hidden)));
  f.up_bias = Eigen::VectorXd::Zero(ffn);
  f.down = gaussian(rng, hidden, ffn, down_scale / std::sqrt(double(ffn)));
  return f;
}

inline Eigen::VectorXd rms_normalize(const Eigen::VectorXd& h) {
  const double ms = h.squaredNorm() / static_cast<double>(h.size());
  return h / std::sqrt(ms + 1e-6);
}

}  // namespace detail

/// Draws every weight from a generator seeded with `config.seed` in a fixed
/// order: embedding, image offset, then per layer (mixer up/down, router,
/// routed experts 0..E-1 up/down, shared experts up/down), then the
/// vocabulary head. Matrices are drawn row by row.
inline Model build_model(const ToyMoEConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int d = config.hidden_dim;
  const int f = config.ffn_dim;
  Model m;
  m.config = config;
  m.embedding = detail::gaussian(rng, config.vocab_size, d, 1.0);
  m.image_offset = detail::gaussian(rng, 1, d, 1.0).row(0).transpose();
  m.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : m.layers) {
    layer.mixer = detail::gaussian_ffn(rng, d, f, 0.5);
    layer.router = detail::gaussian(rng, config.num_routed_experts, d,
                                    1.0 / std::sqrt(double(d)));
    for (int e = 0; e < config.num_routed_experts; ++e) {
      layer.experts.push_back(detail::gaussian_ffn(rng, d, f, 1.0));
    }
    for (int s = 0; s < config.num_shared_experts; ++s) {
      layer.shared.push_back(detail::gaussian_ffn(rng, d, f, 1.0));
    }
  }
  m.unembedding = detail::gaussian(rng, config.vocab_size, d,
                                   1.0 / std::sqrt(double(d)));
  return m;
}

/// Where a hook fired.
struct HookSite {
  int layer = 0;
  int token_position = 0;
  Modality modality = Modality::kText;
  Phase phase = Phase::kPrompt;
};

/// Hidden hook: edits the residual stream entering the MoE block.
/// Router hook: edits router logits immediately before the softmax.
/// Either may be empty.
struct HookBundle {
  std::function<void(const HookSite&, std::span<double>)> hidden;
  std::function<void(const HookSite&, std::span<double>)> router;
};

struct ForwardOptions {
  int max_new_tokens = 1;
  bool capture_hidden = false;
};

struct GeneratedToken {
  int token_id = 0;
  std::vector<double> logits;  // over the vocabulary

  bool operator==(const GeneratedToken&) const = default;
};

struct ForwardRecord {
  std::vector<GeneratedToken> outputs;
  std::vector<RoutingRecord> routing;  // token-major, then layer
  // hidden[token][layer]: value at the hidden hook point after any edit.
  std::vector<std::vector<std::vector<double>>> hidden;

  bool operator==(const ForwardRecord&) const = default;
};

namespace detail {

inline Eigen::VectorXd run_token(const Model& model, int token, Modality modality,
                                 Phase phase, int position, const HookBundle& hooks,
                                 ForwardRecord& out, bool capture) {
  const auto& cfg = model.config;
  if (token < 0 || token >= cfg.vocab_size) {
    throw Error("token id " + std::to_string(token) + " at position " +
                std::to_string(position) + " is outside the vocabulary");
  }
  auto norm = [&](const Eigen::VectorXd& v) {
    return model.normalize_inputs ? rms_normalize(v) : v;
  };
  Eigen::VectorXd h = model.embedding.row(token).transpose();
  if (modality == Modality::kImage) h += model.image_offset;
  if (capture) out.hidden.emplace_back();

  for (int l = 0; l < cfg.num_layers; ++l) {
    const MoELayer& layer = model.layers[l];
    h += layer.mixer(norm(h));
    const HookSite site{l, position, modality, phase};
    if (hooks.hidden) hooks.hidden(site, std::span<double>(h.data(), h.size()));
    if (capture) out.hidden.back().emplace_back(h.data(), h.data() + h.size());

    const Eigen::VectorXd x = norm(h);
    const Eigen::VectorXd raw = layer.router * x;
    RoutingRecord rec;
    rec.token_position = position;
    rec.layer = l;
    rec.phase = phase;
    rec.logits.assign(raw.data(), raw.data() + raw.size());
    if (hooks.router) {
      rec.adjusted_logits = rec.logits;
      hooks.router(site, rec.adjusted_logits);
      // Unchanged logits are not duplicated into the record.
      if (rec.adjusted_logits == rec.logits) rec.adjusted_logits.clear();
    }
    complete_routing(rec, cfg.top_k);

    Eigen::VectorXd y = Eigen::VectorXd::Zero(h.size());
    for (std::size_t j = 0; j < rec.topk_indices.size(); ++j) {
      y += rec.topk_weights[j] * layer.experts[rec.topk_indices[j]](x);
    }
    for (const auto& s : layer.shared) y += s(x);
    h += y;
    out.routing.push_back(std::move(rec));
  }
  return h;
}

}  // namespace detail

/// Greedy forward pass: every token of `seq` is processed with its own tags,
/// then `max_new_tokens` tokens are decoded greedily (ties -> lowest id).
/// Decoded tokens are fed back as TEXT / GENERATION, except the last one.
inline ForwardRecord forward(const Model& model, const TokenSequence& seq,
                             const HookBundle& hooks = {},
                             const ForwardOptions& options = {}) {
  seq.validate();
  if (seq.size() == 0) throw Error("cannot run a forward pass on an empty sequence");
  if (options.max_new_tokens < 0) throw Error("max_new_tokens must be >= 0");

  ForwardRecord out;
  Eigen::VectorXd last;
  int position = 0;
  for (; position < static_cast<int>(seq.size()); ++position) {
    last = detail::run_token(model, seq.token_ids[position],
                             seq.modality_tags[position], seq.phase_tags[position],
                             position, hooks, out, options.capture_hidden);
  }
  for (int step = 0; step < options.max_new_tokens; ++step) {
    const Eigen::VectorXd head_in =
        model.normalize_inputs ? detail::rms_normalize(last) : last;
    const Eigen::VectorXd logits = model.unembedding * head_in;
    GeneratedToken tok;
    tok.logits.assign(logits.data(), logits.data() + logits.size());
    tok.token_id = select_top_k(tok.logits, 1).front();
    out.outputs.push_back(tok);
    if (step + 1 < options.max_new_tokens) {
      last = detail::run_token(model, tok.token_id, Modality::kText,
                               Phase::kGeneration, position++, hooks, out,
                               options.capture_hidden);
    }
  }
  return out;
}

}  // namespace moeroute
