// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "cli_app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return moeroute::cli::run_cli(args);
}
