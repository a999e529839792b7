// Copyright 2026 The moeroute Authors
// SPDX-License-Identifier: Apache-2.0

// Routing traces: newline-delimited JSON, one header object followed by one
// object per (sample, token, layer). Schema: docs/trace-schema-v1.json.
//
//   {"format":"moeroute-trace","format_version":1,"model_label":"desk",
//    "num_layers":4,"experts_per_layer":8,"top_k":2,"includes_logits":true}
//   {"sample_id":"s0000","token_position":0,"layer":0,"phase":"prompt",
//    "topk":[{"index":3,"weight":0.62},{"index":5,"weight":0.38}],
//    "logits":[...]}
//
// Readers accept plain or gzip-compressed input (detected by magic bytes)
// and hold at most one line in memory.

#pragma once

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "moeroute/routing.hpp"
#include "moeroute/types.hpp"

namespace moeroute {

inline constexpr int kTraceFormatVersion = 1;
inline constexpr const char* kTraceFormatName = "moeroute-trace";
inline constexpr double kTraceWeightTolerance = 1e-6;

/// Error tied to a trace line (1-based; the header is line 1).
class TraceError : public Error {
 public:
  TraceError(std::int64_t line, std::string field, const std::string& message)
      : Error("line " + std::to_string(line) + (field.empty() ? "" : " [" + field + "]") +
              ": " + message),
        line_(line), field_(std::move(field)) {}

  std::int64_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::int64_t line_;
  std::string field_;
};

struct TraceHeader {
  int format_version = kTraceFormatVersion;
  std::string model_label;
  int num_layers = 0;
  int experts_per_layer = 0;
  int top_k = 0;
  bool includes_logits = true;

  ExpertGrid grid() const { return {num_layers, experts_per_layer}; }
  bool operator==(const TraceHeader&) const = default;
};

struct TraceLine {
  std::string sample_id;
  int token_position = 0;
  int layer = 0;
  Phase phase = Phase::kPrompt;
  std::vector<int> topk_indices;
  std::vector<double> topk_weights;
  std::vector<double> logits;  // empty when the trace carries no logits

  bool operator==(const TraceLine&) const = default;
};

inline TraceLine to_trace_line(const RoutingRecord& r, std::string sample_id,
                               bool include_logits) {
  TraceLine line;
  line.sample_id = std::move(sample_id);
  line.token_position = r.token_position;
  line.layer = r.layer;
  line.phase = r.phase;
  line.topk_indices = r.topk_indices;
  line.topk_weights = r.topk_weights;
  if (include_logits) line.logits = r.effective_logits();
  return line;
}

/// Probabilities are recomputed from logits when present and left empty
/// otherwise (Gini is then unavailable).
inline RoutingRecord to_routing_record(const TraceLine& line) {
  RoutingRecord r;
  r.token_position = line.token_position;
  r.layer = line.layer;
  r.phase = line.phase;
  r.logits = line.logits;
  if (!line.logits.empty()) r.probabilities = softmax(line.logits);
  r.topk_indices = line.topk_indices;
  r.topk_weights = line.topk_weights;
  return r;
}

// ---------------------------------------------------------------------------
// JSON <-> structs

inline nlohmann::ordered_json header_to_json(const TraceHeader& h) {
  nlohmann::ordered_json j;
  j["format"] = kTraceFormatName;
  j["format_version"] = h.format_version;
  j["model_label"] = h.model_label;
  j["num_layers"] = h.num_layers;
  j["experts_per_layer"] = h.experts_per_layer;
  j["top_k"] = h.top_k;
  j["includes_logits"] = h.includes_logits;
  return j;
}

inline nlohmann::ordered_json line_to_json(const TraceLine& line) {
  nlohmann::ordered_json j;
  j["sample_id"] = line.sample_id;
  j["token_position"] = line.token_position;
  j["layer"] = line.layer;
  j["phase"] = to_string(line.phase);
  auto topk = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < line.topk_indices.size(); ++i) {
    nlohmann::ordered_json e;
    e["index"] = line.topk_indices[i];
    e["weight"] = line.topk_weights[i];
    topk.push_back(std::move(e));
  }
  j["topk"] = std::move(topk);
  if (!line.logits.empty()) j["logits"] = line.logits;
  return j;
}

namespace detail {

struct LineProblem {
  std::string field;
  std::string message;
};

inline bool is_int(const nlohmann::json& v) {
  return v.is_number_integer() || v.is_number_unsigned();
}

inline std::optional<LineProblem> parse_header(const std::string& text, TraceHeader& out) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return LineProblem{"", "header is not a JSON object"};
  if (!j.contains("format") || j["format"] != kTraceFormatName)
    return LineProblem{"format", std::string("expected \"") + kTraceFormatName + "\""};
  if (!j.contains("format_version") || !is_int(j["format_version"]))
    return LineProblem{"format_version", "missing or not an integer"};
  out.format_version = j["format_version"].get<int>();
  if (out.format_version != kTraceFormatVersion)
    return LineProblem{"format_version",
                       "unsupported version " + std::to_string(out.format_version)};
  if (!j.contains("model_label") || !j["model_label"].is_string())
    return LineProblem{"model_label", "missing or not a string"};
  out.model_label = j["model_label"].get<std::string>();
  for (const char* key : {"num_layers", "experts_per_layer", "top_k"}) {
    if (!j.contains(key) || !is_int(j[key]) || j[key].get<std::int64_t>() <= 0)
      return LineProblem{key, "missing or not a positive integer"};
  }
  out.num_layers = j["num_layers"].get<int>();
  out.experts_per_layer = j["experts_per_layer"].get<int>();
  out.top_k = j["top_k"].get<int>();
  if (out.top_k > out.experts_per_layer)
    return LineProblem{"top_k", "exceeds experts_per_layer"};
  if (!j.contains("includes_logits") || !j["includes_logits"].is_boolean())
    return LineProblem{"includes_logits", "missing or not a boolean"};
  out.includes_logits = j["includes_logits"].get<bool>();
  return std::nullopt;
}

inline std::optional<LineProblem> parse_line(const std::string& text, const TraceHeader& h,
                                             TraceLine& out) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return LineProblem{"", "not a JSON object"};
  if (j.contains("truncated")) return LineProblem{"truncated", "producer truncated the trace"};

  if (!j.contains("sample_id") || !j["sample_id"].is_string() ||
      j["sample_id"].get_ref<const std::string&>().empty())
    return LineProblem{"sample_id", "missing or not a non-empty string"};
  out.sample_id = j["sample_id"].get<std::string>();

  if (!j.contains("token_position") || !is_int(j["token_position"]) ||
      j["token_position"].get<std::int64_t>() < 0)
    return LineProblem{"token_position", "missing or not a non-negative integer"};
  out.token_position = j["token_position"].get<int>();

  if (!j.contains("layer") || !is_int(j["layer"]))
    return LineProblem{"layer", "missing or not an integer"};
  const auto layer = j["layer"].get<std::int64_t>();
  if (layer < 0 || layer >= h.num_layers)
    return LineProblem{"layer", "layer " + std::to_string(layer) + " outside [0, " +
                                    std::to_string(h.num_layers) + ")"};
  out.layer = static_cast<int>(layer);

  if (!j.contains("phase") || !j["phase"].is_string())
    return LineProblem{"phase", "missing or not a string"};
  const auto& phase = j["phase"].get_ref<const std::string&>();
  if (phase != "prompt" && phase != "generation")
    return LineProblem{"phase", "must be \"prompt\" or \"generation\""};
  out.phase = parse_phase(phase);

  if (!j.contains("topk") || !j["topk"].is_array())
    return LineProblem{"topk", "missing or not an array"};
  const auto& topk = j["topk"];
  if (static_cast<int>(topk.size()) != h.top_k)
    return LineProblem{"topk", "expected " + std::to_string(h.top_k) + " entries, got " +
                                   std::to_string(topk.size())};
  out.topk_indices.clear();
  out.topk_weights.clear();
  double sum = 0.0;
  std::set<std::int64_t> seen;
  for (const auto& e : topk) {
    if (!e.is_object() || !e.contains("index") || !is_int(e["index"]))
      return LineProblem{"topk.index", "missing or not an integer"};
    const auto idx = e["index"].get<std::int64_t>();
    if (idx < 0 || idx >= h.experts_per_layer)
      return LineProblem{"topk.index", "index " + std::to_string(idx) + " outside [0, " +
                                           std::to_string(h.experts_per_layer) + ")"};
    if (!seen.insert(idx).second)
      return LineProblem{"topk.index", "duplicate index " + std::to_string(idx)};
    if (!e.contains("weight") || !e["weight"].is_number())
      return LineProblem{"topk.weight", "missing or not a number"};
    const double w = e["weight"].get<double>();
    if (!std::isfinite(w) || w < 0.0)
      return LineProblem{"topk.weight", "weight must be finite and non-negative"};
    out.topk_indices.push_back(static_cast<int>(idx));
    out.topk_weights.push_back(w);
    sum += w;
  }
  if (std::abs(sum - 1.0) > kTraceWeightTolerance)
    return LineProblem{"topk.weight", "weights sum to " + std::to_string(sum) + ", not 1"};

  out.logits.clear();
  if (j.contains("logits")) {
    if (!h.includes_logits)
      return LineProblem{"logits", "header declares includes_logits=false"};
    const auto& lg = j["logits"];
    if (!lg.is_array() || static_cast<int>(lg.size()) != h.experts_per_layer)
      return LineProblem{"logits", "expected an array of " +
                                       std::to_string(h.experts_per_layer) + " numbers"};
    for (const auto& v : lg) {
      if (!v.is_number() || !std::isfinite(v.get<double>()))
        return LineProblem{"logits", "non-numeric or non-finite entry"};
      out.logits.push_back(v.get<double>());
    }
  } else if (h.includes_logits) {
    return LineProblem{"logits", "missing although header declares includes_logits=true"};
  }
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Line source (plain or gzip)

class LineSource {
 public:
  explicit LineSource(std::istream& in) : in_(in) {
    std::array<char, 2> magic{};
    in_.read(magic.data(), 2);
    const auto got = static_cast<std::size_t>(in_.gcount());
    gzip_ = got == 2 && static_cast<unsigned char>(magic[0]) == 0x1f &&
            static_cast<unsigned char>(magic[1]) == 0x8b;
    if (gzip_) {
      zs_ = {};
      if (inflateInit2(&zs_, 16 + MAX_WBITS) != Z_OK) throw Error("zlib initialisation failed");
      inflating_ = true;
      raw_.assign(magic.begin(), magic.end());
    } else {
      pending_.assign(magic.data(), got);
    }
  }

  ~LineSource() {
    if (inflating_) inflateEnd(&zs_);
  }
  LineSource(const LineSource&) = delete;
  LineSource& operator=(const LineSource&) = delete;

  /// Next line without its terminator; false at end of input.
  bool next(std::string& line) {
    for (;;) {
      const auto nl = pending_.find('\n', scan_);
      if (nl != std::string::npos) {
        line.assign(pending_, 0, nl);
        pending_.erase(0, nl + 1);
        scan_ = 0;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
      scan_ = pending_.size();
      if (!fill()) {
        if (pending_.empty()) return false;
        line.swap(pending_);
        pending_.clear();
        scan_ = 0;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
    }
  }

 private:
  static constexpr std::size_t kChunk = 1 << 16;

  bool fill() {
    if (!gzip_) {
      std::array<char, kChunk> buf;
      in_.read(buf.data(), buf.size());
      const auto n = static_cast<std::size_t>(in_.gcount());
      pending_.append(buf.data(), n);
      return n > 0;
    }
    if (finished_) return false;
    std::array<char, kChunk> out;
    for (;;) {
      if (zs_.avail_in == 0) {
        if (raw_.empty()) {
          raw_.resize(kChunk);
          in_.read(raw_.data(), static_cast<std::streamsize>(raw_.size()));
          raw_.resize(static_cast<std::size_t>(in_.gcount()));
        }
        if (raw_.empty()) {
          finished_ = true;
          if (!member_done_) throw Error("truncated gzip stream");
          return false;
        }
        input_.swap(raw_);
        raw_.clear();
        zs_.next_in = reinterpret_cast<Bytef*>(input_.data());
        zs_.avail_in = static_cast<uInt>(input_.size());
      }
      zs_.next_out = reinterpret_cast<Bytef*>(out.data());
      zs_.avail_out = static_cast<uInt>(out.size());
      const int rc = inflate(&zs_, Z_NO_FLUSH);
      if (rc != Z_OK && rc != Z_STREAM_END && rc != Z_BUF_ERROR)
        throw Error("corrupt gzip stream");
      member_done_ = rc == Z_STREAM_END;
      if (member_done_) inflateReset(&zs_);  // concatenated members
      const std::size_t produced = out.size() - zs_.avail_out;
      if (produced > 0) {
        pending_.append(out.data(), produced);
        return true;
      }
    }
  }

  std::istream& in_;
  bool gzip_ = false;
  bool inflating_ = false;
  bool finished_ = false;
  bool member_done_ = false;
  z_stream zs_{};
  std::vector<char> raw_;
  std::vector<char> input_;
  std::string pending_;
  std::size_t scan_ = 0;
};

// ---------------------------------------------------------------------------
// Writer

class TraceWriter {
 public:
  TraceWriter(std::ostream& out, TraceHeader header) : out_(out), header_(std::move(header)) {
    TraceHeader probe;
    if (auto p = detail::parse_header(header_to_json(header_).dump(), probe))
      throw TraceError(1, p->field, p->message);
    out_ << header_to_json(header_).dump() << '\n';
    line_ = 1;
  }

  const TraceHeader& header() const { return header_; }
  std::int64_t lines_written() const { return line_; }

  void write(const TraceLine& line) {
    const std::int64_t n = line_ + 1;
    if (line.layer < 0 || line.layer >= header_.num_layers)
      throw TraceError(n, "layer", "outside the header geometry");
    if (static_cast<int>(line.topk_indices.size()) != header_.top_k ||
        line.topk_weights.size() != line.topk_indices.size())
      throw TraceError(n, "topk", "length does not match top_k");
    for (int idx : line.topk_indices)
      if (idx < 0 || idx >= header_.experts_per_layer)
        throw TraceError(n, "topk.index", "outside the header geometry");
    if (header_.includes_logits != !line.logits.empty())
      throw TraceError(n, "logits", "presence does not match includes_logits");
    if (!line.logits.empty() && static_cast<int>(line.logits.size()) != header_.experts_per_layer)
      throw TraceError(n, "logits", "length does not match experts_per_layer");
    out_ << line_to_json(line).dump() << '\n';
    line_ = n;
  }

  void write(const RoutingRecord& record, const std::string& sample_id) {
    write(to_trace_line(record, sample_id, header_.includes_logits));
  }

 private:
  std::ostream& out_;
  TraceHeader header_;
  std::int64_t line_ = 0;
};

// ---------------------------------------------------------------------------
// Reader

class TraceReader {
 public:
  explicit TraceReader(std::istream& in) : source_(in) {
    std::string text;
    if (!source_.next(text)) throw TraceError(1, "", "empty trace: missing header line");
    line_ = 1;
    if (auto p = detail::parse_header(text, header_)) throw TraceError(1, p->field, p->message);
  }

  const TraceHeader& header() const { return header_; }
  std::int64_t line_number() const { return line_; }

  bool next(TraceLine& out) {
    std::string text;
    while (source_.next(text)) {
      ++line_;
      if (text.empty()) continue;
      if (auto p = detail::parse_line(text, header_, out))
        throw TraceError(line_, p->field, p->message);
      return true;
    }
    return false;
  }

  bool next(RoutingRecord& out, std::string* sample_id = nullptr) {
    TraceLine line;
    if (!next(line)) return false;
    out = to_routing_record(line);
    if (sample_id) *sample_id = std::move(line.sample_id);
    return true;
  }

 private:
  LineSource source_;
  TraceHeader header_;
  std::int64_t line_ = 0;
};

// ---------------------------------------------------------------------------
// Validator

struct Violation {
  std::int64_t line = 0;
  std::string field;
  std::string message;
};

struct ValidationReport {
  std::int64_t lines = 0;
  std::int64_t records = 0;
  std::int64_t samples = 0;
  std::int64_t prompt_records = 0;
  std::int64_t generation_records = 0;
  bool header_valid = false;
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
};

/// Scans the whole stream and reports every bad line (one entry per line)
/// without stopping. Never throws on content errors.
inline ValidationReport validate_trace(std::istream& in) {
  ValidationReport report;
  LineSource source(in);
  std::string text;
  TraceHeader header;
  std::unordered_set<std::string> keys;
  std::unordered_set<std::string> samples;
  try {
    if (!source.next(text)) {
      report.violations.push_back({1, "", "empty trace: missing header line"});
      return report;
    }
    report.lines = 1;
    if (auto p = detail::parse_header(text, header)) {
      report.violations.push_back({1, p->field, p->message});
      return report;
    }
    report.header_valid = true;
    TraceLine line;
    while (source.next(text)) {
      const std::int64_t n = ++report.lines;
      if (text.empty()) {
        report.violations.push_back({n, "", "empty line"});
        continue;
      }
      if (auto p = detail::parse_line(text, header, line)) {
        report.violations.push_back({n, p->field, p->message});
        continue;
      }
      std::string key = line.sample_id;
      key += '\x1f';
      key += std::to_string(line.token_position);
      key += '\x1f';
      key += std::to_string(line.layer);
      if (!keys.insert(std::move(key)).second) {
        report.violations.push_back({n, "sample_id", "duplicate (sample, token, layer) key"});
        continue;
      }
      ++report.records;
      samples.insert(line.sample_id);
      if (line.phase == Phase::kPrompt) {
        ++report.prompt_records;
      } else {
        ++report.generation_records;
      }
    }
  } catch (const Error& e) {
    report.violations.push_back({report.lines + 1, "", e.what()});
  }
  report.samples = static_cast<std::int64_t>(samples.size());
  return report;
}

inline nlohmann::ordered_json to_json(const ValidationReport& r) {
  nlohmann::ordered_json j;
  j["lines"] = r.lines;
  j["records"] = r.records;
  j["samples"] = r.samples;
  j["prompt_records"] = r.prompt_records;
  j["generation_records"] = r.generation_records;
  j["header_valid"] = r.header_valid;
  auto v = nlohmann::ordered_json::array();
  for (const auto& x : r.violations)
    v.push_back({{"line", x.line}, {"field", x.field}, {"message", x.message}});
  j["violation_count"] = r.violations.size();
  j["violations"] = std::move(v);
  return j;
}

}  // namespace moeroute
