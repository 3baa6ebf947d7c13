#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/diffnet/mlp.hpp"
#include "annopref/pref_data/record.hpp"
#include "annopref/saliency.hpp"

namespace annopref::teacher {

enum class Kind { oracle, stochastic, mistake, myopic, skip, equal };
enum class AnnotationMode { true_reward_topk, integrated_gradients };

inline Kind kind_from_string(const std::string& s) {
  if (s == "oracle") return Kind::oracle;
  if (s == "stochastic") return Kind::stochastic;
  if (s == "mistake") return Kind::mistake;
  if (s == "myopic") return Kind::myopic;
  if (s == "skip") return Kind::skip;
  if (s == "equal") return Kind::equal;
  throw ConfigError("unknown teacher kind '" + s + "'");
}

inline std::string to_string(Kind k) {
  switch (k) {
    case Kind::oracle: return "oracle";
    case Kind::stochastic: return "stochastic";
    case Kind::mistake: return "mistake";
    case Kind::myopic: return "myopic";
    case Kind::skip: return "skip";
    case Kind::equal: return "equal";
  }
  return "oracle";
}

inline AnnotationMode annotation_mode_from_string(const std::string& s) {
  if (s == "true_reward_topk") return AnnotationMode::true_reward_topk;
  if (s == "integrated_gradients") return AnnotationMode::integrated_gradients;
  throw ConfigError("unknown annotation_mode '" + s + "'");
}

inline std::string to_string(AnnotationMode m) {
  return m == AnnotationMode::true_reward_topk ? "true_reward_topk" : "integrated_gradients";
}

/// Simulated teacher. Skip and equal thresholds act on the undiscounted true
/// returns for every kind when set; `kind` picks the labelling rule.
struct TeacherConfig {
  Kind kind = Kind::oracle;
  double beta = 1.0;
  double gamma_t = 0.9;
  double epsilon = 0.1;
  std::optional<double> skip_threshold;
  double equal_threshold = 0.0;
  AnnotationMode annotation_mode = AnnotationMode::true_reward_topk;
  double annotation_fraction = 0.3;
  saliency::SaliencyConfig ig;  // ig_steps / ig_baseline for the IG oracle

  void validate() const {
    if (beta <= 0.0) throw ConfigError("teacher: beta must be positive");
    if (!(gamma_t > 0.0 && gamma_t <= 1.0)) throw ConfigError("teacher: gamma_t must be in (0, 1]");
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("teacher: epsilon must be in [0, 1)");
    if (equal_threshold < 0.0) throw ConfigError("teacher: equal_threshold must be >= 0");
    if (!(annotation_fraction > 0.0 && annotation_fraction <= 1.0)) {
      throw ConfigError("teacher: annotation_fraction must be in (0, 1]");
    }
    if (kind == Kind::skip && !skip_threshold) throw ConfigError("teacher: skip kind requires skip_threshold");
    if (kind == Kind::equal && equal_threshold <= 0.0) {
      throw ConfigError("teacher: equal kind requires equal_threshold > 0");
    }
  }
};

struct TeacherResponse {
  std::optional<Preference> y;  // empty = SKIP
  Annotation e0;
  Annotation e1;
  std::size_t latency_steps = 0;

  bool skipped() const { return !y.has_value(); }
};

inline double true_return(const Segment& s) {
  const auto& r = *s.true_rewards;
  return std::accumulate(r.begin(), r.end(), 0.0);
}

/// sum_t gamma^(H-1-t) r_t: the most recent step is undiscounted.
inline double myopic_return(const Segment& s, double gamma) {
  const auto& r = *s.true_rewards;
  double acc = 0.0;
  for (double v : r) acc = acc * gamma + v;
  return acc;
}

inline Preference oracle_label(double r0, double r1) {
  if (r0 > r1) return Preference::first();
  if (r1 > r0) return Preference::second();
  return Preference::equal();
}

/// Preference label only (no annotations).
inline std::optional<Preference> label(const TeacherConfig& cfg, const Segment& sigma0, const Segment& sigma1,
                                       Rng& rng) {
  if (!sigma0.true_rewards || !sigma1.true_rewards) throw InvalidInput("judge: segments must carry true_rewards");
  if (sigma0.true_rewards->size() != sigma0.length() || sigma1.true_rewards->size() != sigma1.length()) {
    throw InvalidInput("judge: true_rewards length mismatch");
  }
  const double r0 = true_return(sigma0);
  const double r1 = true_return(sigma1);
  if (cfg.skip_threshold && std::max(r0, r1) < *cfg.skip_threshold) return std::nullopt;
  if (cfg.equal_threshold > 0.0 && std::abs(r0 - r1) < cfg.equal_threshold) return Preference::equal();
  switch (cfg.kind) {
    case Kind::oracle:
    case Kind::skip:
    case Kind::equal: return oracle_label(r0, r1);
    case Kind::myopic: return oracle_label(myopic_return(sigma0, cfg.gamma_t), myopic_return(sigma1, cfg.gamma_t));
    case Kind::mistake: {
      const auto y = oracle_label(r0, r1);
      return rng.bernoulli(cfg.epsilon) ? y.swapped() : y;
    }
    case Kind::stochastic: {
      const double a = cfg.beta * r0;
      const double b = cfg.beta * r1;
      const double m = std::max(a, b);
      const double p1 = std::exp(b - m) / (std::exp(a - m) + std::exp(b - m));
      return rng.bernoulli(p1) ? Preference::second() : Preference::first();
    }
  }
  return oracle_label(r0, r1);
}

/// Selects exactly ceil(fraction * H) timesteps with the largest scores;
/// ties go to the earlier timestep.
inline Annotation top_fraction(std::span<const double> scores, double fraction) {
  const std::size_t h = scores.size();
  // The epsilon keeps e.g. 0.3 * 10 from rounding up to 4.
  const auto k = std::min<std::size_t>(h, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(h) - 1e-9)));
  std::vector<std::size_t> order(h);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Annotation e(h, 0);
  for (std::size_t i = 0; i < k; ++i) e[order[i]] = 1;
  return e;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Timestep importance annotation for one segment. `reference` is the
/// externally trained network used by the integrated-gradients mode.
inline Annotation annotate(const TeacherConfig& cfg, const Segment& segment,
                           const diffnet::MlpParams* reference = nullptr) {
  segment.validate(std::max<std::size_t>(segment.length(), 1));
  if (cfg.annotation_mode == AnnotationMode::true_reward_topk) {
    if (!segment.true_rewards) throw InvalidInput("annotate: true_reward_topk requires true_rewards");
    const auto& r = *segment.true_rewards;
    const double med = median(r);
    std::vector<double> dev(r.size());
    for (std::size_t t = 0; t < r.size(); ++t) dev[t] = std::abs(r[t] - med);
    return top_fraction(dev, cfg.annotation_fraction);
  }
  if (reference == nullptr) throw ConfigError("annotate: integrated_gradients mode requires a reference network");
  const auto sal = saliency::integrated_gradients_xi(*reference, segment, cfg.ig);
  return top_fraction(sal.values, cfg.annotation_fraction);
}

inline TeacherResponse judge(const TeacherConfig& cfg, const Segment& sigma0, const Segment& sigma1, Rng& rng,
                             const diffnet::MlpParams* reference = nullptr) {
  TeacherResponse out;
  out.y = label(cfg, sigma0, sigma1, rng);
  if (out.y) {
    out.e0 = annotate(cfg, sigma0, reference);
    out.e1 = annotate(cfg, sigma1, reference);
  }
  return out;
}

}  // namespace annopref::teacher
