#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/pref_data/segment.hpp"

namespace annopref {

/// Preference distribution (y0, y1) over (sigma0, sigma1).
struct Preference {
  double y0 = 0.5;
  double y1 = 0.5;

  static constexpr Preference first() { return {1.0, 0.0}; }
  static constexpr Preference second() { return {0.0, 1.0}; }
  static constexpr Preference equal() { return {0.5, 0.5}; }

  bool is_valid() const {
    return (y0 == 1.0 && y1 == 0.0) || (y0 == 0.0 && y1 == 1.0) || (y0 == 0.5 && y1 == 0.5);
  }
  bool is_equal() const { return y0 == 0.5 && y1 == 0.5; }
  Preference swapped() const { return {y1, y0}; }

  friend bool operator==(const Preference&, const Preference&) = default;
};

enum class Source { simulated, human };

inline std::string to_string(Source s) { return s == Source::human ? "human" : "simulated"; }

inline Source source_from_string(const std::string& s) {
  if (s == "human") return Source::human;
  if (s == "simulated") return Source::simulated;
  throw InvalidInput("source: unknown value '" + s + "'");
}

using Annotation = std::vector<std::uint8_t>;

/// Annotated preference quintuple (sigma0, sigma1, y, e0, e1). An empty
/// annotation vector marks an unannotated segment.
struct PreferenceRecord {
  Segment sigma0;
  Segment sigma1;
  Preference y;
  Annotation e0;
  Annotation e1;
  Source source = Source::simulated;
  std::string created_at;

  bool annotated() const { return !e0.empty() && !e1.empty(); }

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

inline std::vector<std::string> violations(const PreferenceRecord& r,
                                           std::size_t max_len = kDefaultMaxSegmentLen) {
  std::vector<std::string> out;
  for (const auto& v : r.sigma0.violations(max_len)) out.push_back("sigma0." + v);
  for (const auto& v : r.sigma1.violations(max_len)) out.push_back("sigma1." + v);
  if (r.sigma0.frame_dim() != r.sigma1.frame_dim()) out.emplace_back("sigma1: frame dimension differs from sigma0");
  if (!r.y.is_valid()) out.emplace_back("y: must be one of (0,1), (1,0), (0.5,0.5)");
  auto check_e = [&](const Annotation& e, const Segment& s, const char* name) {
    if (e.empty()) return;
    if (e.size() != s.length()) {
      out.push_back(std::string(name) + ": length " + std::to_string(e.size()) + " differs from segment length " +
                    std::to_string(s.length()));
    }
    for (auto v : e) {
      if (v > 1) {
        out.push_back(std::string(name) + ": entries must be 0 or 1");
        break;
      }
    }
  };
  check_e(r.e0, r.sigma0, "e0");
  check_e(r.e1, r.sigma1, "e1");
  if (r.e0.empty() != r.e1.empty()) out.emplace_back("e0/e1: either both or neither segment must be annotated");
  return out;
}

inline std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- JSON line format (schema_version 1) ----

inline constexpr int kDatasetSchemaVersion = 1;

inline nlohmann::json matrix_to_json(const RowMatrix& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline RowMatrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidInput("expected a nested array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  RowMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw InvalidInput("ragged nested array");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline nlohmann::json to_json(const Segment& s, bool include_true_rewards = true) {
  nlohmann::json j{{"states", matrix_to_json(s.states)},
                   {"actions", matrix_to_json(s.actions)},
                   {"episode_id", s.episode_id},
                   {"start_step", s.start_step}};
  if (include_true_rewards) j["true_rewards"] = s.true_rewards ? nlohmann::json(*s.true_rewards) : nlohmann::json();
  return j;
}

inline Segment segment_from_json(const nlohmann::json& j) {
  Segment s;
  s.states = matrix_from_json(j.at("states"));
  s.actions = matrix_from_json(j.at("actions"));
  s.episode_id = j.at("episode_id").get<std::uint64_t>();
  s.start_step = j.at("start_step").get<std::size_t>();
  if (j.contains("true_rewards") && !j.at("true_rewards").is_null()) {
    s.true_rewards = j.at("true_rewards").get<std::vector<double>>();
  }
  return s;
}

inline nlohmann::json to_json(const PreferenceRecord& r) {
  return {{"schema_version", kDatasetSchemaVersion},
          {"sigma0", to_json(r.sigma0)},
          {"sigma1", to_json(r.sigma1)},
          {"y", {r.y.y0, r.y.y1}},
          {"e0", r.e0},
          {"e1", r.e1},
          {"source", to_string(r.source)},
          {"created_at", r.created_at}};
}

inline PreferenceRecord record_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kDatasetSchemaVersion) throw InvalidInput("schema_version: unsupported");
  PreferenceRecord r;
  r.sigma0 = segment_from_json(j.at("sigma0"));
  r.sigma1 = segment_from_json(j.at("sigma1"));
  const auto y = j.at("y").get<std::vector<double>>();
  if (y.size() != 2) throw InvalidInput("y: must have two entries");
  r.y = {y[0], y[1]};
  r.e0 = j.at("e0").get<Annotation>();
  r.e1 = j.at("e1").get<Annotation>();
  r.source = source_from_string(j.at("source").get<std::string>());
  r.created_at = j.at("created_at").get<std::string>();
  return r;
}

}  // namespace annopref
