// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header for the moeroute toolkit.

#pragma once

#include "moeroute/types.hpp"
#include "moeroute/rng.hpp"
#include "moeroute/routing.hpp"
#include "moeroute/model.hpp"
#include "moeroute/stats.hpp"
#include "moeroute/expert_set.hpp"
#include "moeroute/planted.hpp"
#include "moeroute/intervene.hpp"
#include "moeroute/concept.hpp"
#include "moeroute/trace.hpp"

namespace moeroute {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace moeroute
