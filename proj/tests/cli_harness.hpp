// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// In-process driver for the command-line tool, shared by the CLI tests and
// the acceptance binary.

#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cli_app.hpp"

namespace moeroute::testing {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
  std::filesystem::path dir;  // run directory (first stdout line)
};

inline CliResult run_cli(const std::filesystem::path& run_root, std::vector<std::string> args) {
  args.insert(args.begin(), {"--run-root", run_root.string()});
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  if (r.code == 0) r.dir = r.out.substr(0, r.out.find('\n'));
  return r;
}

/// Relative path -> file bytes for every file below `dir`.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    files[std::filesystem::relative(entry.path(), dir).generic_string()] =
        cli::read_file(entry.path());
  }
  return files;
}

struct DeterminismCase {
  std::string name;
  std::vector<std::string> args;
};

/// Every subcommand, chained the way a user would run them. Later cases read
/// traces written by earlier ones, so the list must run in order.
inline std::vector<DeterminismCase> determinism_cases(const std::filesystem::path& root) {
  const std::string dom = (root / "inputs" / "domain.ndjson").string();
  const std::string gen = (root / "inputs" / "general.ndjson").string();
  const std::string img = (root / "inputs" / "image.ndjson").string();
  const std::string set = (root / "inputs" / "set.json").string();
  return {
      {"simulate-domain",
       {"simulate", "--seed", "3", "--model", "planted", "--stream", "domain", "--samples", "8",
        "--out", dom}},
      {"simulate-general",
       {"simulate", "--seed", "3", "--model", "planted", "--stream", "general", "--samples", "8",
        "--out", gen}},
      {"simulate-image",
       {"simulate", "--seed", "3", "--model", "planted", "--stream", "domain", "--samples", "8",
        "--modality", "image", "--offset", "1.19", "--out", img}},
      {"analyze-gini", {"analyze", "gini", "--trace", dom}},
      {"analyze-freq", {"analyze", "freq", "--trace", dom, "--phase", "prompt"}},
      {"analyze-jsd", {"analyze", "jsd", "--trace", dom, "--image-trace", img}},
      {"identify", {"identify", "--domain", dom, "--general", gen, "--out", set}},
      {"intervene-soft",
       {"intervene", "--seed", "3", "--experts", set, "--lambda-sweep", "0,0.5", "--tasks", "20"}},
      {"intervene-hard", {"intervene", "--seed", "3", "--strategy", "hard", "--tasks", "20"}},
      {"intervene-random", {"intervene", "--seed", "3", "--strategy", "random", "--tasks", "20"}},
      {"concept", {"concept", "--seed", "3", "--trials", "10"}},
      {"validate-trace", {"validate-trace", dom}},
      {"report", {"report", "--inputs", (root / "inputs").string()}},
  };
}

/// Runs every case twice (deleting the run directory in between) and
/// returns a description of each mismatch; empty means deterministic.
inline std::vector<std::string> check_cli_determinism(const std::filesystem::path& root) {
  std::filesystem::remove_all(root);
  std::vector<std::string> problems;
  const auto run_root = root / "runs";
  for (const auto& c : determinism_cases(root)) {
    const CliResult first = run_cli(run_root, c.args);
    if (first.code != 0) {
      problems.push_back(c.name + ": exit " + std::to_string(first.code) + " " + first.err);
      continue;
    }
    const auto before = snapshot(first.dir);
    std::filesystem::remove_all(first.dir);
    const CliResult second = run_cli(run_root, c.args);
    if (second.code != 0 || second.dir != first.dir) {
      problems.push_back(c.name + ": rerun failed or moved to another directory");
      continue;
    }
    if (snapshot(second.dir) != before) problems.push_back(c.name + ": outputs differ on rerun");
    if (second.out != first.out) problems.push_back(c.name + ": stdout differs on rerun");
  }
  return problems;
}

}  // namespace moeroute::testing
