#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <spdlog/spdlog.h>
#include <sstream>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"

namespace annopref::evalkit {

struct Measurement {
  std::uint64_t env_step = 0;
  double raw_return = 0.0;

  friend bool operator==(const Measurement&, const Measurement&) = default;
};

/// Evaluation curve of one run.
struct MeasurementSeries {
  std::string run_id;
  std::string env;
  std::string condition;
  std::uint64_t seed = 0;
  std::vector<Measurement> points;

  void validate() const {
    if (points.empty()) throw InvalidInput("series '" + run_id + "': needs at least one measurement");
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (points[i].env_step <= points[i - 1].env_step) {
        throw InvalidInput("series '" + run_id + "': env_steps must be strictly increasing");
      }
    }
    for (const auto& p : points) {
      if (!std::isfinite(p.raw_return)) throw InvalidInput("series '" + run_id + "': non-finite return");
    }
  }

  friend bool operator==(const MeasurementSeries&, const MeasurementSeries&) = default;
};

struct NormalizedSeries {
  MeasurementSeries source;
  std::vector<double> scores;
  double lo = 0.0;
  double hi = 0.0;

  friend bool operator==(const NormalizedSeries&, const NormalizedSeries&) = default;
};

struct Bounds {
  double lo = 0.0;
  double hi = 1.0;
};

struct NormalizeOptions {
  /// Bounds per environment. When false, one pair of bounds spans every
  /// environment in the set.
  bool per_env = true;
  /// Bounds per (environment, condition) instead of jointly over conditions.
  bool per_condition = false;
  /// Fixed bounds by environment name; scores are clamped to [0, 1].
  std::map<std::string, Bounds> fixed;
};

/// Min-max normalization to [0, 1] with bounds taken over every run of a
/// group. A degenerate group (min == max) maps to 0.5.
inline std::vector<NormalizedSeries> normalize(std::span<const MeasurementSeries> set,
                                               const NormalizeOptions& opt = {}) {
  detail::require(!set.empty(), "normalize: empty series set");
  for (const auto& s : set) s.validate();
  auto key = [&](const MeasurementSeries& s) {
    return (opt.per_env ? s.env : std::string()) + '\x1f' + (opt.per_condition ? s.condition : std::string());
  };
  std::map<std::string, Bounds> bounds;
  for (const auto& s : set) {
    const auto k = key(s);
    auto [it, fresh] = bounds.try_emplace(k, Bounds{s.points.front().raw_return, s.points.front().raw_return});
    for (const auto& p : s.points) {
      it->second.lo = std::min(it->second.lo, p.raw_return);
      it->second.hi = std::max(it->second.hi, p.raw_return);
    }
  }
  std::vector<NormalizedSeries> out;
  out.reserve(set.size());
  for (const auto& s : set) {
    Bounds b = bounds.at(key(s));
    const auto fixed = opt.fixed.find(s.env);
    if (fixed != opt.fixed.end()) b = fixed->second;
    NormalizedSeries n{s, {}, b.lo, b.hi};
    n.scores.reserve(s.points.size());
    for (const auto& p : s.points) {
      double v = b.hi > b.lo ? (p.raw_return - b.lo) / (b.hi - b.lo) : 0.5;
      n.scores.push_back(std::clamp(v, 0.0, 1.0));
    }
    out.push_back(std::move(n));
  }
  return out;
}

/// Mean over measurement points of max(0, 1 - score).
inline double optimality_gap(const NormalizedSeries& s) {
  detail::require(!s.scores.empty(), "optimality_gap: empty series");
  double sum = 0.0;
  for (double v : s.scores) sum += std::max(0.0, 1.0 - v);
  return sum / static_cast<double>(s.scores.size());
}

struct Interval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double v) const { return lo <= v && v <= hi; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct BootstrapParams {
  std::size_t n_resamples = 2000;
  double level = 0.95;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_resamples < 1) throw ConfigError("bootstrap: n_resamples must be >= 1");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap: level must be in (0, 1)");
  }

  friend bool operator==(const BootstrapParams&, const BootstrapParams&) = default;
};

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Linear interpolation between order statistics of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  if (i + 1 >= sorted.size()) return sorted.back();
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

/// Percentile bootstrap of the mean over runs.
inline Interval bootstrap_ci(std::span<const double> per_run, std::size_t n_resamples, double level, Rng& rng) {
  detail::require(!per_run.empty(), "bootstrap_ci: no runs");
  BootstrapParams{n_resamples, level, 0}.validate();
  const double point = mean_of(per_run);
  if (per_run.size() < 2) {
    spdlog::warn("bootstrap_ci: {} run(s); reporting a degenerate interval", per_run.size());
    return {point, point, point};
  }
  std::vector<double> stats(n_resamples);
  for (auto& st : stats) {
    double s = 0.0;
    for (std::size_t k = 0; k < per_run.size(); ++k) s += per_run[rng.uniform_index(per_run.size())];
    st = s / static_cast<double>(per_run.size());
  }
  std::sort(stats.begin(), stats.end());
  const double tail = 0.5 * (1.0 - level);
  return {point, quantile_sorted(stats, tail), quantile_sorted(stats, 1.0 - tail)};
}

inline Interval bootstrap_ci(std::span<const double> per_run, const BootstrapParams& p = {}) {
  Rng rng(p.seed);
  return bootstrap_ci(per_run, p.n_resamples, p.level, rng);
}

struct CurvePoint {
  std::uint64_t env_step = 0;
  Interval score;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct ConditionAggregate {
  std::string env;
  std::string condition;
  std::vector<std::uint64_t> seeds;
  std::vector<double> run_gaps;
  Interval gap;
  double mean_final_return = 0.0;
  std::vector<CurvePoint> curve;

  friend bool operator==(const ConditionAggregate&, const ConditionAggregate&) = default;
};

struct AggregateOptions {
  NormalizeOptions normalization;
  BootstrapParams bootstrap;
};

struct AggregateResult {
  AggregateOptions options;
  std::vector<NormalizedSeries> series;
  std::vector<ConditionAggregate> conditions;  // ordered by (env, condition)

  const ConditionAggregate& at(const std::string& env, const std::string& condition) const {
    for (const auto& c : conditions) {
      if (c.env == env && c.condition == condition) return c;
    }
    throw NotFound("aggregate: no condition '" + condition + "' for env '" + env + "'");
  }
};

/// Normalizes, computes per-run optimality gaps, and bootstraps the gap and
/// the per-step score curve of each (env, condition) group.
inline AggregateResult aggregate(std::span<const MeasurementSeries> set, const AggregateOptions& opt = {}) {
  if (set.empty()) throw InvalidInput("aggregate: empty condition set");
  opt.bootstrap.validate();
  AggregateResult res;
  res.options = opt;
  res.series = normalize(set, opt.normalization);
  std::map<std::pair<std::string, std::string>, std::vector<const NormalizedSeries*>> groups;
  for (const auto& s : res.series) groups[{s.source.env, s.source.condition}].push_back(&s);
  std::uint64_t group_index = 0;
  for (const auto& [key, members] : groups) {
    ConditionAggregate c;
    c.env = key.first;
    c.condition = key.second;
    double final_sum = 0.0;
    for (const auto* s : members) {
      c.seeds.push_back(s->source.seed);
      c.run_gaps.push_back(optimality_gap(*s));
      final_sum += s->source.points.back().raw_return;
    }
    c.mean_final_return = final_sum / static_cast<double>(members.size());
    Rng gap_rng(derive_seed(opt.bootstrap.seed, group_index * 2));
    c.gap = bootstrap_ci(c.run_gaps, opt.bootstrap.n_resamples, opt.bootstrap.level, gap_rng);

    const auto& ref = members.front()->source.points;
    for (const auto* s : members) {
      if (s->source.points.size() != ref.size()) {
        throw InvalidInput("aggregate: runs of condition '" + c.condition + "' have different measurement counts");
      }
      for (std::size_t i = 0; i < ref.size(); ++i) {
        if (s->source.points[i].env_step != ref[i].env_step) {
          throw InvalidInput("aggregate: runs of condition '" + c.condition + "' disagree on env_step grid");
        }
      }
    }
    Rng curve_rng(derive_seed(opt.bootstrap.seed, group_index * 2 + 1));
    std::vector<double> at_step(members.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      for (std::size_t m = 0; m < members.size(); ++m) at_step[m] = members[m]->scores[i];
      const auto iv = members.size() < 2
                          ? Interval{mean_of(at_step), mean_of(at_step), mean_of(at_step)}
                          : bootstrap_ci(at_step, opt.bootstrap.n_resamples, opt.bootstrap.level, curve_rng);
      c.curve.push_back({ref[i].env_step, iv});
    }
    res.conditions.push_back(std::move(c));
    ++group_index;
  }
  return res;
}

// ---- serialization ----

inline constexpr int kReportVersion = 1;

inline nlohmann::json to_json(const Interval& i) { return {{"point", i.point}, {"lo", i.lo}, {"hi", i.hi}}; }
inline Interval interval_from_json(const nlohmann::json& j) {
  return {j.at("point").get<double>(), j.at("lo").get<double>(), j.at("hi").get<double>()};
}

inline nlohmann::json to_json(const MeasurementSeries& s) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : s.points) pts.push_back({p.env_step, p.raw_return});
  return {{"run_id", s.run_id}, {"env", s.env}, {"condition", s.condition}, {"seed", s.seed}, {"points", pts}};
}

inline MeasurementSeries series_from_json(const nlohmann::json& j) {
  MeasurementSeries s;
  s.run_id = j.at("run_id").get<std::string>();
  s.env = j.value("env", "");
  s.condition = j.at("condition").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("points")) s.points.push_back({p.at(0).get<std::uint64_t>(), p.at(1).get<double>()});
  s.validate();
  return s;
}

inline nlohmann::json to_json(const AggregateOptions& o) {
  nlohmann::json fixed = nlohmann::json::object();
  for (const auto& [env, b] : o.normalization.fixed) fixed[env] = {{"lo", b.lo}, {"hi", b.hi}};
  return {{"normalization",
           {{"per_env", o.normalization.per_env}, {"per_condition", o.normalization.per_condition}, {"fixed", fixed}}},
          {"bootstrap",
           {{"n_resamples", o.bootstrap.n_resamples}, {"level", o.bootstrap.level}, {"seed", o.bootstrap.seed}}}};
}

inline AggregateOptions options_from_json(const nlohmann::json& j) {
  AggregateOptions o;
  const auto& n = j.at("normalization");
  o.normalization.per_env = n.at("per_env").get<bool>();
  o.normalization.per_condition = n.at("per_condition").get<bool>();
  for (const auto& [env, b] : n.at("fixed").items()) o.normalization.fixed[env] = {b.at("lo"), b.at("hi")};
  const auto& b = j.at("bootstrap");
  o.bootstrap = {b.at("n_resamples").get<std::size_t>(), b.at("level").get<double>(), b.at("seed").get<std::uint64_t>()};
  return o;
}

inline nlohmann::json to_json(const ConditionAggregate& c) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : c.curve) curve.push_back({p.env_step, p.score.point, p.score.lo, p.score.hi});
  return {{"env", c.env},           {"condition", c.condition}, {"seeds", c.seeds},
          {"run_gaps", c.run_gaps}, {"gap", to_json(c.gap)},    {"mean_final_return", c.mean_final_return},
          {"curve", curve}};
}

inline ConditionAggregate condition_from_json(const nlohmann::json& j) {
  ConditionAggregate c;
  c.env = j.at("env").get<std::string>();
  c.condition = j.at("condition").get<std::string>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.run_gaps = j.at("run_gaps").get<std::vector<double>>();
  c.gap = interval_from_json(j.at("gap"));
  c.mean_final_return = j.at("mean_final_return").get<double>();
  for (const auto& p : j.at("curve")) {
    c.curve.push_back({p.at(0).get<std::uint64_t>(), {p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>()}});
  }
  return c;
}

inline nlohmann::json to_json(const AggregateResult& r) {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& s : r.series) series.push_back(to_json(s.source));
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : r.conditions) conds.push_back(to_json(c));
  return {{"format", "annopref.evalkit.report"},
          {"version", kReportVersion},
          {"options", to_json(r.options)},
          {"series", series},
          {"conditions", conds}};
}

/// Parsed report: the stored inputs and the stored aggregate.
struct LoadedReport {
  AggregateOptions options;
  std::vector<MeasurementSeries> series;
  std::vector<ConditionAggregate> conditions;
};

inline LoadedReport report_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "annopref.evalkit.report") throw InvalidInput("report: not an evalkit report");
  if (j.value("version", 0) != kReportVersion) throw InvalidInput("report: unsupported version");
  LoadedReport r;
  r.options = options_from_json(j.at("options"));
  for (const auto& s : j.at("series")) r.series.push_back(series_from_json(s));
  for (const auto& c : j.at("conditions")) r.conditions.push_back(condition_from_json(c));
  return r;
}

inline std::string to_csv(const AggregateResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "condition,seed,env_step,raw_return,norm_score\n";
  for (const auto& s : r.series) {
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      out << s.source.condition << ',' << s.source.seed << ',' << s.source.points[i].env_step << ','
          << s.source.points[i].raw_return << ',' << s.scores[i] << '\n';
    }
  }
  return out.str();
}

inline nlohmann::json to_plotdata(const AggregateResult& r) {
  nlohmann::json curves = nlohmann::json::array();
  nlohmann::json gaps = nlohmann::json::array();
  for (const auto& c : r.conditions) {
    nlohmann::json steps = nlohmann::json::array(), mean = steps, lo = steps, hi = steps;
    for (const auto& p : c.curve) {
      steps.push_back(p.env_step);
      mean.push_back(p.score.point);
      lo.push_back(p.score.lo);
      hi.push_back(p.score.hi);
    }
    curves.push_back({{"env", c.env}, {"condition", c.condition}, {"env_step", steps}, {"mean", mean},
                      {"lo", lo}, {"hi", hi}});
    gaps.push_back({{"env", c.env}, {"condition", c.condition}, {"gap", c.gap.point}, {"lo", c.gap.lo},
                    {"hi", c.gap.hi}, {"runs", c.run_gaps.size()}});
  }
  return {{"format", "annopref.evalkit.plotdata"}, {"version", kReportVersion}, {"curves", curves},
          {"optimality_gap", gaps}};
}

enum class ReportFormat { csv, json, plotdata };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "plotdata") return ReportFormat::plotdata;
  throw ConfigError("unknown report format '" + s + "' (csv, json, plotdata)");
}

inline void emit_report(const AggregateResult& r, ReportFormat format, const std::filesystem::path& path) {
  if (r.conditions.empty()) throw InvalidInput("emit_report: empty condition set");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  switch (format) {
    case ReportFormat::csv: out << to_csv(r); break;
    case ReportFormat::json: out << to_json(r).dump(2) << '\n'; break;
    case ReportFormat::plotdata: out << to_plotdata(r).dump(2) << '\n'; break;
  }
  if (!out) throw std::runtime_error("report write failed: " + path.string());
}

/// Plain-text summary table, one row per (env, condition).
inline std::string summary_table(const AggregateResult& r) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-12s %5s %9s %19s %12s\n", "env", "condition", "runs", "gap",
                "gap 95% CI", "final_ret");
  out << line;
  for (const auto& c : r.conditions) {
    std::snprintf(line, sizeof line, "%-16s %-12s %5zu %9.4f   [%7.4f, %7.4f] %12.3f\n", c.env.c_str(),
                  c.condition.c_str(), c.run_gaps.size(), c.gap.point, c.gap.lo, c.gap.hi, c.mean_final_return);
    out << line;
  }
  return out.str();
}

}  // namespace annopref::evalkit
