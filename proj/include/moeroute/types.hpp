// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace moeroute {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an operation needs data its input does not carry
/// (for example Gini over a trace recorded without router logits).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

enum class Modality : std::uint8_t { kText, kImage };
enum class Phase : std::uint8_t { kPrompt, kGeneration };

inline std::string_view to_string(Phase phase) {
  return phase == Phase::kPrompt ? "prompt" : "generation";
}

inline std::string_view to_string(Modality modality) {
  return modality == Modality::kText ? "text" : "image";
}

inline Phase parse_phase(std::string_view text) {
  if (text == "prompt") return Phase::kPrompt;
  if (text == "generation") return Phase::kGeneration;
  throw Error("unknown phase '" + std::string(text) + "'");
}

inline Modality parse_modality(std::string_view text) {
  if (text == "text") return Modality::kText;
  if (text == "image") return Modality::kImage;
  throw Error("unknown modality '" + std::string(text) + "'");
}

/// One routed expert, E_{l,i}.
struct ExpertId {
  int layer = 0;
  int index = 0;

  auto operator<=>(const ExpertId&) const = default;
};

/// Routed-expert geometry shared by models, traces and frequency tables.
struct ExpertGrid {
  int num_layers = 0;
  int experts_per_layer = 0;

  bool contains(ExpertId id) const {
    return id.layer >= 0 && id.layer < num_layers && id.index >= 0 &&
           id.index < experts_per_layer;
  }
  bool operator==(const ExpertGrid&) const = default;
};

inline void log_warning(std::string_view message) {
  std::cerr << "warning: " << message << '\n';
}

}  // namespace moeroute
