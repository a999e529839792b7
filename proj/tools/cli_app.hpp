// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Every subcommand writes its outputs plus a
// manifest.json into <run-root>/<subcommand>-<hash>/, where the hash covers
// the argument vector and the contents of every input file. Runs carry no
// timestamps, so repeating a command reproduces the directory byte for byte.

#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moeroute/moeroute.hpp"

namespace moeroute::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Small helpers

/// Shortest decimal form that round-trips.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = digits[v & 0xf];
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json_file(const fs::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw Error("'" + path.string() + "' is not valid JSON");
  return j;
}

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return (v && *v) ? std::string(v) : fallback;
}

/// Parses "LO:HI" (inclusive).
inline LayerRange parse_layer_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw Error("layer range must look like LO:HI");
  LayerRange r;
  try {
    r.lo = std::stoi(text.substr(0, colon));
    r.hi = std::stoi(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("layer range must look like LO:HI");
  }
  return r;
}

inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw Error("");
    } catch (const std::exception&) {
      throw Error("cannot parse '" + item + "' as a number");
    }
  }
  if (out.empty()) throw Error("empty number list");
  return out;
}

/// Built-in preset names, or NAME.json inside $MOEROUTE_PRESET_DIR, or a
/// path to a JSON file with the ToyMoEConfig fields.
inline ToyMoEConfig resolve_preset(const std::string& name, std::uint64_t seed,
                                   std::vector<fs::path>* used_files = nullptr) {
  for (const auto& builtin : preset_names())
    if (builtin == name) return preset_config(name, seed);
  fs::path path(name);
  if (!fs::exists(path)) {
    const std::string dir = env_or("MOEROUTE_PRESET_DIR", "");
    if (!dir.empty()) path = fs::path(dir) / (name + ".json");
  }
  if (!fs::exists(path)) throw Error("unknown preset '" + name + "'");
  if (used_files) used_files->push_back(path);
  const auto j = read_json_file(path);
  try {
    ToyMoEConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.num_routed_experts = j.at("num_routed_experts").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.num_shared_experts = j.value("num_shared_experts", 0);
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.seed = seed;
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed preset file '" + path.string() + "': " + e.what());
  }
}

inline LayerRange default_layers(const std::string& preset, const ToyMoEConfig& c) {
  try {
    return intervention_preset(preset).layers;
  } catch (const Error&) {
    return {0, c.num_layers - 1};
  }
}

// ---------------------------------------------------------------------------
// Run directory and manifest

class Run {
 public:
  Run(std::string subcommand, std::vector<std::string> args, std::string root)
      : subcommand_(std::move(subcommand)), args_(std::move(args)), root_(std::move(root)) {}

  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void set_preset(std::string preset) { preset_ = std::move(preset); }
  void add_input(const fs::path& path) { inputs_.push_back(path); }

  /// Fixes the run directory; call after every input is registered.
  const fs::path& open() {
    ojson core = core_manifest();
    dir_ = fs::path(root_) / (subcommand_ + "-" + hex64(fnv1a64(core.dump())));
    fs::create_directories(dir_);
    return dir_;
  }

  const fs::path& dir() const { return dir_; }

  fs::path output(const std::string& name) {
    outputs_.push_back(name);
    return dir_ / name;
  }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream out(output(name), std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write '" + (dir_ / name).string() + "'");
  }

  void write_json(const std::string& name, const ojson& j) { write_text(name, j.dump(2) + "\n"); }

  void finish() {
    ojson m = core_manifest();
    m["outputs"] = outputs_;
    m["run_dir"] = dir_.generic_string();
    std::ofstream out(dir_ / "manifest.json", std::ios::binary);
    out << m.dump(2) << "\n";
  }

 private:
  ojson core_manifest() const {
    ojson m;
    m["subcommand"] = subcommand_;
    m["argv"] = args_;
    if (seed_) m["seed"] = *seed_; else m["seed"] = nullptr;
    m["preset"] = preset_.empty() ? ojson(nullptr) : ojson(preset_);
    auto inputs = ojson::array();
    for (const auto& p : inputs_) {
      inputs.push_back({{"path", p.generic_string()},
                        {"fnv1a64", hex64(fnv1a64(read_file(p)))}});
    }
    m["inputs"] = std::move(inputs);
    m["toolkit_version"] = kVersion;
    return m;
  }

  std::string subcommand_;
  std::vector<std::string> args_;
  std::string root_;
  std::optional<std::uint64_t> seed_;
  std::string preset_;
  std::vector<fs::path> inputs_;
  std::vector<std::string> outputs_;
  fs::path dir_;
};

inline void copy_out(const fs::path& from, const std::string& to) {
  if (to.empty()) return;
  const fs::path dest(to);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  fs::copy_file(from, dest, fs::copy_options::overwrite_existing);
}

// ---------------------------------------------------------------------------
// Trace loading

inline PhaseFilter parse_phase_filter(const std::string& text) {
  if (text == "all") return PhaseFilter::kAll;
  if (text == "prompt") return PhaseFilter::kPromptOnly;
  throw Error("phase filter must be 'all' or 'prompt'");
}

/// Streams a trace through `fn(record, sample_id)`.
template <typename Fn>
TraceHeader for_each_record(const fs::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace '" + path.string() + "'");
  TraceReader reader(in);
  RoutingRecord rec;
  std::string sample;
  try {
    while (reader.next(rec, &sample)) fn(rec, sample);
  } catch (const TraceError& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return reader.header();
}

inline TraceHeader read_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace '" + path.string() + "'");
  return TraceReader(in).header();
}

/// Frequency table over the first `max_samples` samples (0 = all) of a trace.
inline ActivationFrequencyTable trace_frequency(const fs::path& path, PhaseFilter filter,
                                                int max_samples, int* samples_seen) {
  const TraceHeader header = read_header(path);
  FrequencyCounter counter(header.grid(), filter);
  std::vector<std::string> order;
  std::string last;
  for_each_record(path, [&](const RoutingRecord& r, const std::string& sample) {
    if (order.empty() || sample != last) {
      if (std::find(order.begin(), order.end(), sample) == order.end()) order.push_back(sample);
      last = sample;
    }
    const auto pos = std::find(order.begin(), order.end(), sample) - order.begin();
    if (max_samples > 0 && pos >= max_samples) return;
    counter.add(r);
  });
  if (samples_seen) *samples_seen = static_cast<int>(order.size());
  if (max_samples > 0 && static_cast<int>(order.size()) < max_samples)
    throw Error("'" + path.string() + "' holds " + std::to_string(order.size()) +
                " samples but " + std::to_string(max_samples) + " were requested");
  return counter.table(path.filename().string());
}

// ---------------------------------------------------------------------------
// Subcommands

struct Context {
  std::vector<std::string> args;  // without the program name
  std::string run_root;
  std::ostream& out;
  std::ostream& err;
};

struct SimulateOptions {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  int samples = 16;
  std::string model = "random";
  std::string planted_file;
  double offset = 0.0;
  std::string stream = "random";
  std::string modality = "text";
  int seq_len = 8;
  int max_new_tokens = 2;
  bool no_logits = false;
  std::string out;
};

inline int cmd_simulate(const SimulateOptions& o, Context& ctx) {
  if (o.samples < 0) throw Error("--samples must be >= 0");
  if (o.seq_len <= 0) throw Error("--seq-len must be positive");
  Run run("simulate", ctx.args, ctx.run_root);
  run.set_seed(o.seed);
  run.set_preset(o.preset);
  std::vector<fs::path> preset_files;
  ToyMoEConfig config = resolve_preset(o.preset, o.seed, &preset_files);
  for (const auto& p : preset_files) run.add_input(p);
  if (!o.planted_file.empty()) run.add_input(o.planted_file);

  const bool planted = o.model == "planted" || !o.planted_file.empty();
  if (!planted && o.model != "random") throw Error("--model must be 'random' or 'planted'");
  PlantedSpec spec;
  Model model;
  if (planted) {
    config = planted_config(config);
    spec = o.planted_file.empty()
               ? default_planted_spec(config, o.seed, o.offset)
               : planted_spec_from_json(read_json_file(o.planted_file), config.grid());
    model = plant_specialization(config, spec);
  } else {
    model = build_model(config);
    for (int t = 0; t < config.vocab_size / 2; ++t) spec.domain_token_ids.push_back(t);
  }
  model.label = o.preset;
  const Modality modality = parse_modality(o.modality);

  Rng rng(derive_seed(o.seed, 1));
  std::vector<TokenSequence> prompts;
  const std::vector<int> domain = spec.domain_token_ids;
  const std::vector<int> general = spec.general_token_ids(config.vocab_size);
  if (o.stream == "domain") {
    prompts = permutation_stream(domain, o.samples, modality, rng);
  } else if (o.stream == "general") {
    prompts = permutation_stream(general, o.samples, modality, rng);
  } else if (o.stream == "mixed") {
    for (int s = 0; s < o.samples; ++s) {
      const auto& group = rng.below(2) == 0 ? domain : general;
      prompts.push_back(permutation_stream(group, 1, modality, rng).front());
    }
  } else if (o.stream == "random") {
    for (int s = 0; s < o.samples; ++s) {
      std::vector<int> tokens;
      for (int j = 0; j < o.seq_len; ++j)
        tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size))));
      prompts.push_back(make_prompt(tokens, modality));
    }
  } else {
    throw Error("--stream must be domain, general, mixed or random");
  }

  run.open();
  if (planted) run.write_json("planted_spec.json", planted_spec_to_json(spec));
  const fs::path trace_path = run.output("trace.ndjson");
  {
    std::ofstream file(trace_path, std::ios::binary);
    TraceHeader header;
    header.model_label = o.preset;
    header.num_layers = config.num_layers;
    header.experts_per_layer = config.num_routed_experts;
    header.top_k = config.top_k;
    header.includes_logits = !o.no_logits;
    TraceWriter writer(file, header);
    ForwardOptions fo;
    fo.max_new_tokens = o.max_new_tokens;
    char id[32];
    for (std::size_t s = 0; s < prompts.size(); ++s) {
      std::snprintf(id, sizeof(id), "s%06zu", s);
      const ForwardRecord rec = forward(model, prompts[s], {}, fo);
      for (const auto& r : rec.routing) writer.write(r, id);
    }
  }
  copy_out(trace_path, o.out);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  return 0;
}

struct AnalyzeOptions {
  std::string kind;
  std::string trace;
  std::string image_trace;
  std::string phase = "all";
  std::string out;
};

inline int cmd_analyze(const AnalyzeOptions& o, Context& ctx) {
  Run run("analyze", ctx.args, ctx.run_root);
  run.add_input(o.trace);
  if (!o.image_trace.empty()) run.add_input(o.image_trace);
  const PhaseFilter filter = parse_phase_filter(o.phase);
  const TraceHeader header = read_header(o.trace);
  const ExpertGrid grid = header.grid();

  std::ostringstream csv;
  ojson report;
  report["kind"] = o.kind;
  report["trace"] = o.trace;
  report["model_label"] = header.model_label;
  report["num_layers"] = header.num_layers;
  report["experts_per_layer"] = header.experts_per_layer;
  report["top_k"] = header.top_k;

  if (o.kind == "gini") {
    if (!header.includes_logits)
      throw CapabilityError("gini requires logits; '" + o.trace + "' was recorded without them");
    GiniProfileBuilder builder(grid, filter);
    for_each_record(o.trace, [&](const RoutingRecord& r, const std::string&) { builder.add(r); });
    const auto profile = builder.profile();
    csv << "layer,gini\n";
    for (std::size_t l = 0; l < profile.size(); ++l)
      csv << l << "," << format_double(profile[l]) << "\n";
    report["phase"] = o.phase;
    report["per_layer"] = profile;
  } else if (o.kind == "freq") {
    FrequencyCounter counter(grid, filter);
    for_each_record(o.trace, [&](const RoutingRecord& r, const std::string&) { counter.add(r); });
    const auto table = counter.table(o.trace);
    csv << "layer,expert,frequency\n";
    for (int l = 0; l < grid.num_layers; ++l)
      for (int i = 0; i < grid.experts_per_layer; ++i)
        csv << l << "," << i << "," << format_double(table.at({l, i})) << "\n";
    report["phase"] = o.phase;
    report["normalization"] = "top-k memberships divided by token count; each layer sums to top_k";
    report["token_count"] = table.token_count;
    auto rows = ojson::array();
    for (int l = 0; l < grid.num_layers; ++l) {
      auto row = table.layer(l);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    report["per_layer"] = std::move(rows);
  } else if (o.kind == "jsd") {
    if (o.image_trace.empty()) throw Error("jsd needs --image-trace for the paired samples");
    const TraceHeader image_header = read_header(o.image_trace);
    if (!(image_header.grid() == grid) || image_header.top_k != header.top_k)
      throw Error("paired traces use different expert geometries");
    auto collect = [&](const std::string& path) {
      std::map<std::string, SelectionDistribution> by_sample;
      for_each_record(path, [&](const RoutingRecord& r, const std::string& sample) {
        by_sample.try_emplace(sample, grid).first->second.add(r);
      });
      return by_sample;
    };
    const auto text = collect(o.trace);
    const auto image = collect(o.image_trace);
    for (const auto& [id, _] : image)
      if (!text.count(id)) throw Error("sample '" + id + "' has no text pair");
    DivergenceAccumulator acc(grid);
    for (const auto& [id, dist] : text) {
      const auto it = image.find(id);
      if (it == image.end()) throw Error("sample '" + id + "' has no image pair");
      acc.add_pair(dist, it->second);
    }
    const auto profile = acc.profile();
    csv << "layer,jsd\n";
    for (std::size_t l = 0; l < profile.per_layer.size(); ++l)
      csv << l << "," << format_double(profile.per_layer[l]) << "\n";
    report["image_trace"] = o.image_trace;
    report["phase"] = "prompt";
    report["sample_count"] = profile.sample_count;
    report["per_layer"] = profile.per_layer;
  } else {
    throw Error("analyze kind must be gini, freq or jsd");
  }

  run.open();
  run.write_text(o.kind + ".csv", csv.str());
  run.write_json(o.kind + ".json", report);
  copy_out(run.dir() / (o.kind + ".csv"), o.out);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  return 0;
}

struct IdentifyOptions {
  std::string domain;
  std::string general;
  double tau = 0.3;
  std::string label = "domain";
  int samples = 0;
  std::string phase = "prompt";
  std::string out;
};

inline int cmd_identify(const IdentifyOptions& o, Context& ctx) {
  Run run("identify", ctx.args, ctx.run_root);
  run.add_input(o.domain);
  run.add_input(o.general);
  const PhaseFilter filter = parse_phase_filter(o.phase);
  int domain_samples = 0, general_samples = 0;
  const auto dom = trace_frequency(o.domain, filter, o.samples, &domain_samples);
  const auto gen = trace_frequency(o.general, filter, o.samples, &general_samples);
  const int used = o.samples > 0 ? o.samples : std::min(domain_samples, general_samples);
  ExpertSet set = identify(dom, gen, o.tau, parse_set_label(o.label), used);
  set.source_datasets = {o.domain, o.general};

  run.open();
  run.write_json("expert_set.json", to_json(set));
  const LayerHistogram hist = layer_histogram(set);
  std::ostringstream csv;
  csv << "layer,count\n";
  for (std::size_t l = 0; l < hist.counts.size(); ++l) csv << l << "," << hist.counts[l] << "\n";
  run.write_text("layer_histogram.csv", csv.str());
  copy_out(run.dir() / "expert_set.json", o.out);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  ctx.out << "identified " << set.size() << " experts\n";
  return 0;
}

struct InterveneOptions {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string strategy = "soft";
  std::optional<double> lambda;
  std::string lambda_sweep;
  std::string layers;
  std::string experts;
  std::string planted;
  double offset = kDistractionOffset;
  int tasks = 200;
  int task_len = 4;
  std::string modality = "image";
};

inline int cmd_intervene(const InterveneOptions& o, Context& ctx) {
  if (o.tasks <= 0) throw Error("--tasks must be positive");
  Run run("intervene", ctx.args, ctx.run_root);
  run.set_seed(o.seed);
  run.set_preset(o.preset);
  std::vector<fs::path> preset_files;
  const ToyMoEConfig config =
      planted_config(resolve_preset(o.preset, o.seed, &preset_files));
  for (const auto& p : preset_files) run.add_input(p);
  if (!o.planted.empty()) run.add_input(o.planted);
  if (!o.experts.empty()) run.add_input(o.experts);

  const PlantedSpec spec =
      o.planted.empty() ? default_planted_spec(config, o.seed, o.offset)
                        : planted_spec_from_json(read_json_file(o.planted), config.grid());
  const Model model = plant_specialization(config, spec);
  const ExpertSet targets =
      o.experts.empty() ? spec.planted_experts : expert_set_from_json(read_json_file(o.experts));

  InterventionConfig ic;
  ic.strategy = parse_strategy(o.strategy);
  ic.layers = o.layers.empty() ? default_layers(o.preset, config) : parse_layer_range(o.layers);
  ic.seed = o.seed;
  ic.target_set = targets;
  double default_lambda = 0.5;
  try {
    default_lambda = intervention_preset(o.preset).lambda;
  } catch (const Error&) {
  }
  const std::vector<double> lambdas =
      !o.lambda_sweep.empty() ? parse_double_list(o.lambda_sweep)
                              : std::vector<double>{o.lambda.value_or(default_lambda)};
  for (double l : lambdas) {
    ic.lambda = l;
    ic.validate(model.grid());
  }

  Rng task_rng(derive_seed(o.seed, 0x7461736bULL));
  const auto tasks = domain_task_instances(spec, config.vocab_size, o.tasks, o.task_len,
                                           parse_modality(o.modality), task_rng);

  std::vector<ForwardRecord> baseline;
  for (const auto& t : tasks) baseline.push_back(forward(model, t.prompt));
  auto accuracy_of = [&](const std::vector<ForwardRecord>& recs) {
    int hits = 0;
    for (std::size_t i = 0; i < recs.size(); ++i)
      if (recs[i].outputs.front().token_id == tasks[i].answer) ++hits;
    return static_cast<double>(hits) / static_cast<double>(recs.size());
  };
  auto selection_rate = [&](const std::vector<ForwardRecord>& recs, const ExpertSet& set) {
    std::vector<RoutingRecord> all;
    for (const auto& r : recs) all.insert(all.end(), r.routing.begin(), r.routing.end());
    return target_selection_rate(all, set, ic.layers);
  };

  std::ostringstream csv;
  csv << "lambda,task,answer,baseline_prediction,prediction,correct\n";
  ojson summary;
  summary["preset"] = o.preset;
  summary["strategy"] = o.strategy;
  summary["layers"] = {ic.layers.lo, ic.layers.hi};
  summary["tasks"] = o.tasks;
  summary["modality"] = o.modality;
  summary["baseline_accuracy"] = accuracy_of(baseline);
  summary["baseline_target_selection_rate"] = selection_rate(baseline, targets);
  auto runs = ojson::array();
  ExpertSet used_targets;
  for (double lambda : lambdas) {
    ic.lambda = lambda;
    const RouterIntervention iv(ic, model.grid());
    used_targets = iv.targets();
    InterventionAudit audit;
    std::vector<ForwardRecord> recs;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      recs.push_back(forward(model, tasks[i].prompt, iv.hooks(i, &audit)));
    bool same = true;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const int pred = recs[i].outputs.front().token_id;
      const int base = baseline[i].outputs.front().token_id;
      same = same && recs[i] == baseline[i];
      csv << format_double(lambda) << "," << i << "," << tasks[i].answer << "," << base << ","
          << pred << "," << (pred == tasks[i].answer ? 1 : 0) << "\n";
    }
    ojson r;
    r["lambda"] = lambda;
    r["accuracy"] = accuracy_of(recs);
    r["target_selection_rate"] = selection_rate(recs, used_targets);
    r["identical_to_baseline"] = same;
    r["adjusted_calls"] = audit.adjusted_calls;
    runs.push_back(std::move(r));
  }
  summary["runs"] = std::move(runs);
  summary["targets"] = to_json(used_targets);

  run.open();
  run.write_text("outputs.csv", csv.str());
  run.write_json("summary.json", summary);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  for (const auto& r : summary["runs"])
    ctx.out << "lambda=" << format_double(r["lambda"].get<double>())
            << " accuracy=" << format_double(r["accuracy"].get<double>())
            << " baseline=" << format_double(summary["baseline_accuracy"].get<double>()) << "\n";
  return 0;
}

struct ConceptOptions {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  int concept_layer = 1;
  int commit_layer = -1;
  int trials = 100;
  double alpha = 1.0;
  int prefix = 1;
};

inline int cmd_concept(const ConceptOptions& o, Context& ctx) {
  if (o.trials <= 0) throw Error("--trials must be positive");
  Run run("concept", ctx.args, ctx.run_root);
  run.set_seed(o.seed);
  run.set_preset(o.preset);
  std::vector<fs::path> preset_files;
  ToyMoEConfig config = resolve_preset(o.preset, o.seed, &preset_files);
  for (const auto& p : preset_files) run.add_input(p);
  config = concept_toy_config(config);
  const Model model = plant_concept_toy(config, {o.concept_layer, o.commit_layer});
  const auto tasks = make_concept_tasks(model, o.trials, derive_seed(o.seed, 2), o.prefix, o.alpha);
  const SweepResult sweep = sweep_layers(model, tasks);

  std::ostringstream csv;
  csv << "layer,success_rate\n";
  for (std::size_t l = 0; l < sweep.per_layer_success_rate.size(); ++l)
    csv << l << "," << format_double(sweep.per_layer_success_rate[l]) << "\n";
  ojson summary;
  summary["preset"] = o.preset;
  summary["vocab_size"] = config.vocab_size;
  summary["concept_layer"] = o.concept_layer;
  summary["commit_layer"] = o.commit_layer < 0 ? config.num_layers - 1 : o.commit_layer;
  summary["alpha"] = o.alpha;
  summary["trials"] = sweep.trials;
  summary["per_layer_success_rate"] = sweep.per_layer_success_rate;

  run.open();
  run.write_text("sweep.csv", csv.str());
  run.write_json("summary.json", summary);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  return 0;
}

inline int cmd_validate(const std::string& file, bool strict, Context& ctx) {
  Run run("validate-trace", ctx.args, ctx.run_root);
  run.add_input(file);
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open trace '" + file + "'");
  const ValidationReport report = validate_trace(in);
  run.open();
  run.write_json("validation.json", to_json(report));
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  ctx.out << "lines=" << report.lines << " records=" << report.records
          << " samples=" << report.samples << " prompt=" << report.prompt_records
          << " generation=" << report.generation_records
          << " violations=" << report.violations.size() << "\n";
  for (const auto& v : report.violations) {
    ctx.out << "  line " << v.line;
    if (!v.field.empty()) ctx.out << " [" << v.field << "]";
    ctx.out << ": " << v.message << "\n";
  }
  return (strict && !report.ok()) ? 1 : 0;
}

/// CSV to an array of row objects keyed by the header.
inline ojson csv_to_json(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::vector<std::string> cols;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ls(s);
    std::string cell;
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    return out;
  };
  auto rows = ojson::array();
  if (std::getline(ss, line)) cols = split(line);
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    ojson row;
    for (std::size_t i = 0; i < cols.size() && i < cells.size(); ++i) {
      double v = 0.0;
      const auto* b = cells[i].data();
      const auto res = std::from_chars(b, b + cells[i].size(), v);
      if (res.ec == std::errc() && res.ptr == b + cells[i].size()) {
        row[cols[i]] = v;
      } else {
        row[cols[i]] = cells[i];
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline int cmd_report(const std::vector<std::string>& inputs, const std::string& out_file,
                      Context& ctx) {
  Run run("report", ctx.args, ctx.run_root);
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> inner;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file()) inner.push_back(e.path());
      std::sort(inner.begin(), inner.end());
      files.insert(files.end(), inner.begin(), inner.end());
    } else if (fs::is_regular_file(p)) {
      files.push_back(p);
    } else {
      throw Error("report input '" + in + "' does not exist");
    }
  }
  ojson merged;
  merged["toolkit_version"] = kVersion;
  auto entries = ojson::array();
  for (const auto& f : files) {
    const auto ext = f.extension().string();
    if (ext != ".json" && ext != ".csv") continue;
    run.add_input(f);
    ojson e;
    e["path"] = f.generic_string();
    if (ext == ".json") {
      e["data"] = ojson::parse(read_file(f));
    } else {
      e["data"] = csv_to_json(read_file(f));
    }
    entries.push_back(std::move(e));
  }
  merged["entries"] = std::move(entries);
  run.open();
  run.write_json("report.json", merged);
  copy_out(run.dir() / "report.json", out_file);
  run.finish();
  ctx.out << run.dir().generic_string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

/// Runs one CLI invocation. `args` excludes the program name.
/// Returns the process exit code: 0 on success, 1 on a toolkit error,
/// CLI11's code on a usage error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"moeroute: routing analysis and intervention toolkit for mixture-of-experts models"};
  app.require_subcommand(1);
  std::string run_root = env_or("MOEROUTE_RUN_ROOT", "runs");
  app.add_option("--run-root", run_root, "Directory receiving run directories")
      ->capture_default_str();

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "Run a toy model and write a routing trace");
  s->add_option("--preset", sim.preset, "Preset name or preset JSON file")->capture_default_str();
  s->add_option("--seed", sim.seed, "Seed (required)")->required();
  s->add_option("--samples", sim.samples, "Number of samples")->capture_default_str();
  s->add_option("--model", sim.model, "random | planted")->capture_default_str();
  s->add_option("--planted", sim.planted_file, "Planted spec JSON (implies --model planted)");
  s->add_option("--offset", sim.offset, "Image offset strength for the default planted spec")
      ->capture_default_str();
  s->add_option("--stream", sim.stream, "domain | general | mixed | random")->capture_default_str();
  s->add_option("--modality", sim.modality, "text | image")->capture_default_str();
  s->add_option("--seq-len", sim.seq_len, "Prompt length for random streams")->capture_default_str();
  s->add_option("--max-new-tokens", sim.max_new_tokens, "Greedy decode steps")->capture_default_str();
  s->add_flag("--no-logits", sim.no_logits, "Omit router logits from the trace");
  s->add_option("--out", sim.out, "Also copy the trace here");

  AnalyzeOptions an;
  auto* a = app.add_subcommand("analyze", "Per-layer Gini, activation frequency or JSD");
  a->add_option("kind", an.kind, "gini | freq | jsd")->required();
  a->add_option("--trace", an.trace, "Trace (text side for jsd)")->required();
  a->add_option("--image-trace", an.image_trace, "Image-side trace for jsd");
  a->add_option("--phase", an.phase, "all | prompt")->capture_default_str();
  a->add_option("--out", an.out, "Also copy the CSV here");

  IdentifyOptions id;
  auto* i = app.add_subcommand("identify", "Identify specialized experts from two traces");
  i->add_option("--domain", id.domain, "Domain trace")->required();
  i->add_option("--general", id.general, "General trace")->required();
  i->add_option("--tau", id.tau, "Frequency-difference threshold")->capture_default_str();
  i->add_option("--label", id.label, "domain | visual")->capture_default_str();
  i->add_option("--samples", id.samples, "Samples per trace (0 = all)")->capture_default_str();
  i->add_option("--phase", id.phase, "all | prompt")->capture_default_str();
  i->add_option("--out", id.out, "Also copy the expert set here");

  InterveneOptions iv;
  double lambda = 0.0;
  auto* v = app.add_subcommand("intervene", "Routing-guided intervention on the planted toy");
  v->add_option("--preset", iv.preset, "Preset name or preset JSON file")->capture_default_str();
  v->add_option("--seed", iv.seed, "Seed (required)")->required();
  v->add_option("--strategy", iv.strategy, "soft | hard | random")->capture_default_str();
  auto* lambda_opt = v->add_option("--lambda", lambda, "Soft boost in router-logit std units");
  v->add_option("--lambda-sweep", iv.lambda_sweep, "Comma-separated lambdas, e.g. 0,0.2,0.5,1.0");
  v->add_option("--layers", iv.layers, "Inclusive layer range LO:HI");
  v->add_option("--experts", iv.experts, "Target expert set JSON (default: planted experts)");
  v->add_option("--planted", iv.planted, "Planted spec JSON");
  v->add_option("--offset", iv.offset, "Image offset strength for the default planted spec")
      ->capture_default_str();
  v->add_option("--tasks", iv.tasks, "Task instances")->capture_default_str();
  v->add_option("--task-len", iv.task_len, "Tokens per task prompt")->capture_default_str();
  v->add_option("--modality", iv.modality, "text | image")->capture_default_str();
  lambda_opt->excludes(v->get_option("--lambda-sweep"));

  ConceptOptions co;
  auto* c = app.add_subcommand("concept", "Layer sweep of cross-modal concept edits");
  c->add_option("--preset", co.preset, "Preset name or preset JSON file")->capture_default_str();
  c->add_option("--seed", co.seed, "Seed (required)")->required();
  c->add_option("--concept-layer", co.concept_layer, "First layer holding the concept")
      ->capture_default_str();
  c->add_option("--commit-layer", co.commit_layer, "Layer committing the answer (-1 = last)")
      ->capture_default_str();
  c->add_option("--trials", co.trials, "Concept pairs")->capture_default_str();
  c->add_option("--alpha", co.alpha, "Edit strength")->capture_default_str();
  c->add_option("--prefix", co.prefix, "Text tokens before the concept token")->capture_default_str();

  std::string trace_file;
  bool strict = false;
  auto* t = app.add_subcommand("validate-trace", "Check a trace against the schema");
  t->add_option("file", trace_file, "Trace file (plain or gzip)")->required();
  t->add_flag("--strict", strict, "Exit nonzero when violations are found");

  std::vector<std::string> inputs;
  std::string report_out;
  auto* r = app.add_subcommand("report", "Merge run outputs into one JSON document");
  r->add_option("--inputs", inputs, "Run directories or JSON/CSV files")->required();
  r->add_option("--out", report_out, "Also copy the merged report here");

  std::vector<const char*> argv{"moeroute"};
  for (const auto& arg : args) argv.push_back(arg.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  Context ctx{args, run_root, out, err};
  try {
    if (*s) return cmd_simulate(sim, ctx);
    if (*a) return cmd_analyze(an, ctx);
    if (*i) return cmd_identify(id, ctx);
    if (*v) {
      if (*lambda_opt) iv.lambda = lambda;
      return cmd_intervene(iv, ctx);
    }
    if (*c) return cmd_concept(co, ctx);
    if (*t) return cmd_validate(trace_file, strict, ctx);
    if (*r) return cmd_report(inputs, report_out, ctx);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace moeroute::cli
