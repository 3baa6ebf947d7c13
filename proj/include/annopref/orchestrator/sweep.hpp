#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/evalkit.hpp"
#include "annopref/orchestrator/config.hpp"

namespace annopref::orchestrator {

struct SeedRange {
  std::uint64_t first = 0;
  std::uint64_t last = 0;  // inclusive

  std::vector<std::uint64_t> values() const {
    std::vector<std::uint64_t> v;
    for (std::uint64_t s = first; s <= last; ++s) v.push_back(s);
    return v;
  }
};

/// "a..b" (inclusive) or a single integer.
inline SeedRange parse_seed_range(const std::string& s) {
  try {
    const auto dots = s.find("..");
    std::size_t used = 0;
    if (dots == std::string::npos) {
      const auto v = std::stoull(s, &used);
      if (used != s.size()) throw InvalidInput("");
      return {v, v};
    }
    const auto a = s.substr(0, dots);
    const auto b = s.substr(dots + 2);
    const auto first = std::stoull(a, &used);
    if (used != a.size()) throw InvalidInput("");
    const auto last = std::stoull(b, &used);
    if (used != b.size()) throw InvalidInput("");
    if (last < first) throw InvalidInput("");
    return {first, last};
  } catch (const std::exception&) {
    throw ConfigError("seeds: expected 'a..b' with a <= b, got '" + s + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    auto item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

/// Named teacher presets used by sweeps. "config" keeps the file's teacher.
inline teacher::TeacherConfig teacher_preset(const std::string& name, const teacher::TeacherConfig& base) {
  auto t = base;
  if (name == "config") return t;
  if (name == "oracle") {
    t.kind = teacher::Kind::oracle;
  } else if (name == "mistake") {
    t.kind = teacher::Kind::mistake;
    t.epsilon = 0.1;
  } else if (name == "stochastic") {
    t.kind = teacher::Kind::stochastic;
    t.beta = 1.0;
  } else if (name == "myopic") {
    t.kind = teacher::Kind::myopic;
    t.gamma_t = 0.9;
  } else {
    throw ConfigError("teacher preset must be one of config, oracle, mistake, stochastic, myopic; got '" + name + "'");
  }
  return t;
}

/// Applies a condition tag: "baseline" zeroes the explanation weights,
/// "annotated" keeps the configured (nonzero) ones.
inline void apply_condition(RunConfig& c, const std::string& condition) {
  if (condition == "baseline") {
    c.reward.train.weights.alpha1 = 0.0;
    c.reward.train.weights.alpha2 = 0.0;
  } else if (condition == "annotated") {
    const auto& w = c.reward.train.weights;
    if (w.alpha1 <= 0.0 && w.alpha2 <= 0.0) {
      throw ConfigError("condition 'annotated' needs alpha1 or alpha2 > 0 in the base config");
    }
  } else {
    throw ConfigError("condition must be 'baseline' or 'annotated'; got '" + condition + "'");
  }
  c.condition = condition;
}

struct SweepJob {
  std::string env;
  std::string teacher;
  std::string condition;
  std::uint64_t seed = 0;
  RunConfig config;
};

struct SweepSpec {
  SeedRange seeds;
  std::vector<std::string> conditions{"baseline", "annotated"};
  std::vector<std::string> envs;      // empty: the config's env
  std::vector<std::string> teachers;  // empty: "config"
};

/// One job per (env, teacher, condition, seed), written to
/// <out>/<env>/<teacher>/<condition>/seed_<n>.
inline std::vector<SweepJob> plan_sweep(const RunConfig& base, const SweepSpec& spec, const std::filesystem::path& out) {
  const auto envs = spec.envs.empty() ? std::vector<std::string>{base.env} : spec.envs;
  const auto teachers = spec.teachers.empty() ? std::vector<std::string>{"config"} : spec.teachers;
  if (spec.conditions.empty()) throw ConfigError("sweep: no conditions");
  std::vector<SweepJob> jobs;
  for (const auto& env : envs) {
    for (const auto& t : teachers) {
      for (const auto& cond : spec.conditions) {
        for (auto seed : spec.seeds.values()) {
          SweepJob j{env, t, cond, seed, base};
          j.config.env = env;
          j.config.feedback.teacher = teacher_preset(t, base.feedback.teacher);
          apply_condition(j.config, cond);
          j.config.env_seed = seed;
          j.config.agent_seed = seed;
          j.config.output_dir = (out / env / t / cond / ("seed_" + std::to_string(seed))).string();
          j.config.validate();
          jobs.push_back(std::move(j));
        }
      }
    }
  }
  return jobs;
}

inline bool run_finished(const std::filesystem::path& run_dir) {
  return std::filesystem::exists(run_dir / "summary.json") && std::filesystem::exists(run_dir / "measurements.json");
}

/// Measurement series of every finished run below `dir`, grouped by the
/// teacher directory level when the sweep layout is detected.
inline std::map<std::string, std::vector<evalkit::MeasurementSeries>> collect_series(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw NotFound("no such directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "measurements.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<evalkit::MeasurementSeries>> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    auto s = evalkit::series_from_json(nlohmann::json::parse(in));
    const auto rel = fs::relative(f.parent_path(), dir);
    std::vector<std::string> parts;
    for (const auto& p : rel) parts.push_back(p.string());
    // <env>/<teacher>/<condition>/seed_<n>
    const std::string group = parts.size() == 4 ? parts[1] : "all";
    out[group].push_back(std::move(s));
  }
  return out;
}

}  // namespace annopref::orchestrator
