#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <span>
#include <spdlog/spdlog.h>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/diffnet/adamw.hpp"
#include "annopref/diffnet/mlp.hpp"
#include "annopref/diffnet/serialize.hpp"
#include "annopref/pref_data/record.hpp"
#include "annopref/pref_data/sampling.hpp"
#include "annopref/saliency.hpp"

namespace annopref::reward {

using diffnet::Gradient;
using diffnet::MlpParams;
using diffnet::MlpSpec;
using saliency::Normalization;
using saliency::SaliencyConfig;

struct LossWeights {
  double alpha1 = 0.25;
  double alpha2 = 0.1;
  double label_smoothing = 0.1;

  void validate() const {
    detail::require(alpha1 >= 0.0 && alpha2 >= 0.0, "LossWeights: alphas must be nonnegative");
    detail::require(label_smoothing >= 0.0 && label_smoothing < 0.5, "LossWeights: label_smoothing must be in [0, 0.5)");
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// How the explanation terms send gradient into the network. `exact` runs the
/// full double-backward; `final_layer` keeps only the output-layer part of it
/// (debugging aid).
enum class SaliencyGradient { exact, final_layer };

struct RewardTrainConfig {
  LossWeights weights;
  SaliencyConfig saliency;
  Normalization logit_mode = Normalization::standardized;
  SaliencyGradient saliency_gradient = SaliencyGradient::exact;
  std::size_t batch_size = 32;
};

/// Loss terms of one evaluation. total = preference + alpha1*annotation +
/// alpha2*structural. Terms whose weight is zero are not evaluated and read 0.
struct LossBreakdown {
  double preference = 0.0;
  double annotation = 0.0;
  double structural = 0.0;
  double total = 0.0;
};

struct Member {
  MlpParams params;
  diffnet::OptimizerState optimizer;
};

/// Independently initialized reward heads over [state; action] frames.
struct RewardEnsemble {
  MlpSpec spec;
  std::vector<Member> members;
  std::uint64_t training_steps = 0;

  static RewardEnsemble create(const MlpSpec& spec, std::size_t n_members, std::uint64_t seed,
                               const diffnet::AdamWConfig& opt = {}) {
    detail::require(n_members >= 1, "RewardEnsemble: at least one member required");
    RewardEnsemble e;
    e.spec = spec;
    for (std::size_t m = 0; m < n_members; ++m) {
      auto params = diffnet::init_params(spec, derive_seed(seed, m));
      diffnet::OptimizerState state(opt, params.size());
      e.members.push_back({std::move(params), std::move(state)});
    }
    return e;
  }

  std::size_t size() const { return members.size(); }
};

// ---- per-member evaluation ----

inline double segment_return(const MlpParams& member, const RowMatrix& frames, diffnet::Tape<double>& tape) {
  double r = 0.0;
  for (Eigen::Index t = 0; t < frames.rows(); ++t) r += diffnet::forward_scalar(member, row_span(frames, t), tape);
  return r;
}

inline double segment_return(const MlpParams& member, const Segment& segment) {
  segment.validate(std::max<std::size_t>(segment.length(), 1));
  diffnet::Tape<double> tape;
  return segment_return(member, segment.frames(), tape);
}

/// log(exp(a) + exp(b)) without overflow.
inline double log_add_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// P[sigma1 > sigma0] from two returns (Bradley-Terry / softmax).
inline double pref_prob_from_returns(double r0, double r1) {
  const double d = r1 - r0;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

inline double pref_prob(const MlpParams& member, const Segment& sigma0, const Segment& sigma1) {
  return pref_prob_from_returns(segment_return(member, sigma0), segment_return(member, sigma1));
}

inline double label_smooth(double e, double ls) { return e * (1.0 - ls) + 0.5 * ls; }

/// Binary cross-entropy of sigmoid(z) against target in [0,1], log-space.
inline double bce_with_logits(double z, double target) {
  return std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

struct SegmentTerms {
  double annotation = 0.0;  // mean BCE over timesteps
  double structural = 0.0;  // ||xi||_1
  std::vector<double> dl_dxi;
};

/// Annotation/structural contributions of one segment and dL/dxi, given the
/// per-segment scale factors of both terms.
inline SegmentTerms explanation_terms(std::span<const double> xi, const Annotation* e, Normalization mode,
                                      double label_smoothing, double annot_scale, double struct_scale) {
  SegmentTerms out;
  const std::size_t h = xi.size();
  out.dl_dxi.assign(h, 0.0);
  for (double v : xi) out.structural += v;
  for (auto& g : out.dl_dxi) g += struct_scale;
  if (e != nullptr) {
    std::vector<double> logits(xi.begin(), xi.end());
    if (mode == Normalization::standardized) {
      logits = saliency::standardize({std::vector<double>(xi.begin(), xi.end()), Normalization::raw}).values;
    }
    std::vector<double> dl_dz(h);
    for (std::size_t t = 0; t < h; ++t) {
      const double target = label_smooth(static_cast<double>((*e)[t]), label_smoothing);
      out.annotation += bce_with_logits(logits[t], target);
      dl_dz[t] = annot_scale * (sigmoid(logits[t]) - target) / static_cast<double>(h);
    }
    out.annotation /= static_cast<double>(h);
    if (annot_scale != 0.0) {
      const auto dx = mode == Normalization::standardized ? saliency::standardize_backward(xi, dl_dz) : dl_dz;
      for (std::size_t t = 0; t < h; ++t) out.dl_dxi[t] += dx[t];
    }
  }
  return out;
}

}  // namespace detail

/// Loss (and optionally its parameter gradient) of one member on a batch.
/// The explanation terms recompute xi per segment with an rng stream split
/// from `rng`, so loss and gradient see the same perturbations.
inline std::pair<LossBreakdown, Gradient> evaluate_member(const MlpParams& member,
                                                          std::span<const PreferenceRecord> batch,
                                                          const RewardTrainConfig& cfg, Rng& rng, bool want_grad) {
  annopref::detail::require(!batch.empty(), "reward loss: batch must be nonempty");
  cfg.weights.validate();
  const auto& w = cfg.weights;
  const double n = static_cast<double>(batch.size());
  LossBreakdown loss;
  Gradient grad(want_grad ? member.size() : 0, 0.0);

  std::vector<RowMatrix> frames;
  frames.reserve(2 * batch.size());
  for (const auto& r : batch) {
    frames.push_back(r.sigma0.frames());
    frames.push_back(r.sigma1.frames());
  }

  // Preference term, all segments in one batched pass.
  Eigen::Index total_rows = 0;
  for (const auto& f : frames) total_rows += f.rows();
  RowMatrix stacked(total_rows, frames.front().cols());
  std::vector<Eigen::Index> offsets(frames.size() + 1, 0);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    stacked.middleRows(offsets[i], frames[i].rows()) = frames[i];
    offsets[i + 1] = offsets[i] + frames[i].rows();
  }
  diffnet::BatchTape btape;
  diffnet::forward_batch(member, stacked, btape);
  const RowMatrix& out = btape.output();
  RowMatrix upstream(want_grad ? total_rows : 0, 1);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& r = batch[k];
    double ret[2];
    for (std::size_t s = 0; s < 2; ++s) {
      const auto i = 2 * k + s;
      ret[s] = out.col(0).segment(offsets[i], offsets[i + 1] - offsets[i]).sum();
    }
    const double lse = log_add_exp(ret[0], ret[1]);
    loss.preference -= r.y.y0 * (ret[0] - lse) + r.y.y1 * (ret[1] - lse);
    if (want_grad) {
      const double p1 = pref_prob_from_returns(ret[0], ret[1]);
      const double up[2] = {(1.0 - p1 - r.y.y0) / n, (p1 - r.y.y1) / n};
      for (std::size_t s = 0; s < 2; ++s) {
        const auto i = 2 * k + s;
        upstream.middleRows(offsets[i], offsets[i + 1] - offsets[i]).setConstant(up[s]);
      }
    }
  }
  if (want_grad) diffnet::backward_batch(member, btape, upstream, grad);
  loss.preference /= n;

  const bool use_annot = w.alpha1 > 0.0;
  const bool use_struct = w.alpha2 > 0.0;
  if (use_annot || use_struct) {
    std::size_t n_annotated = 0;
    for (const auto& r : batch) n_annotated += r.annotated() ? 1 : 0;
    if (use_annot && n_annotated < batch.size()) {
      spdlog::warn("annotation loss: {} of {} records lack annotations and are skipped", batch.size() - n_annotated,
                   batch.size());
    }
    const double annot_norm = n_annotated > 0 ? 1.0 / (2.0 * static_cast<double>(n_annotated)) : 0.0;
    const double struct_norm = 1.0 / (2.0 * n);
    Gradient extra(want_grad ? member.size() : 0, 0.0);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto& r = batch[k];
      for (int s = 0; s < 2; ++s) {
        Rng seg_rng = rng.split();
        const auto tr = saliency::smoothgrad_trace(member, frames[2 * k + static_cast<std::size_t>(s)],
                                                   cfg.saliency, seg_rng);
        const Annotation* e = (use_annot && r.annotated()) ? (s == 0 ? &r.e0 : &r.e1) : nullptr;
        const auto terms = detail::explanation_terms(tr.xi, e, cfg.logit_mode, w.label_smoothing,
                                                     w.alpha1 * annot_norm, use_struct ? w.alpha2 * struct_norm : 0.0);
        loss.annotation += annot_norm * terms.annotation;
        loss.structural += struct_norm * terms.structural;
        if (want_grad) saliency::backprop_xi(member, tr, terms.dl_dxi, extra);
      }
    }
    if (!use_annot) loss.annotation = 0.0;
    if (!use_struct) loss.structural = 0.0;
    if (want_grad) {
      if (cfg.saliency_gradient == SaliencyGradient::final_layer) {
        const auto& last = member.layer(member.layer_count() - 1);
        std::fill(extra.begin(), extra.begin() + static_cast<std::ptrdiff_t>(last.offset), 0.0);
      }
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += extra[i];
    }
  }
  loss.total = loss.preference + w.alpha1 * loss.annotation + w.alpha2 * loss.structural;
  return {loss, std::move(grad)};
}

inline double preference_loss(const MlpParams& member, std::span<const PreferenceRecord> batch) {
  RewardTrainConfig cfg;
  cfg.weights.alpha1 = 0.0;
  cfg.weights.alpha2 = 0.0;
  Rng unused(0);
  return evaluate_member(member, batch, cfg, unused, false).first.preference;
}

/// Mean BCE between sigmoid(logits of xi) and label-smoothed annotations,
/// averaged over timesteps and then over the 2N annotated segments.
inline double annotation_loss(const MlpParams& member, std::span<const PreferenceRecord> batch,
                              const SaliencyConfig& sal, double label_smoothing, Rng& rng,
                              Normalization mode = Normalization::standardized) {
  RewardTrainConfig cfg;
  cfg.saliency = sal;
  cfg.logit_mode = mode;
  cfg.weights = {1.0, 0.0, label_smoothing};
  return evaluate_member(member, batch, cfg, rng, false).first.annotation;
}

/// (1/2N) * sum over all segments of ||xi||_1 on raw saliency.
inline double structural_loss(const MlpParams& member, std::span<const PreferenceRecord> batch,
                              const SaliencyConfig& sal, Rng& rng) {
  RewardTrainConfig cfg;
  cfg.saliency = sal;
  cfg.weights = {0.0, 1.0, 0.0};
  return evaluate_member(member, batch, cfg, rng, false).first.structural;
}

/// One optimizer step per member on its own minibatch. Returns the pre-step
/// losses; a member whose step fails numerically is left unchanged and its
/// breakdown is NaN.
inline std::vector<LossBreakdown> train_step(RewardEnsemble& ensemble, std::span<const PreferenceRecord> records,
                                             const RewardTrainConfig& cfg, Rng& rng) {
  annopref::detail::require(!records.empty(), "train_step: store is empty");
  std::vector<LossBreakdown> out;
  for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
    auto& member = ensemble.members[m];
    const auto batch = minibatch(records, cfg.batch_size, rng);
    Rng member_rng = rng.split();
    try {
      auto [loss, grad] = evaluate_member(member.params, batch, cfg, member_rng, true);
      if (!std::isfinite(loss.total)) throw NumericError("non-finite loss");
      diffnet::optimizer_step(member.params.values(), grad, member.optimizer);
      out.push_back(loss);
    } catch (const NumericError& e) {
      spdlog::error("reward member {}: step skipped ({})", m, e.what());
      const double nan = std::nan("");
      out.push_back({nan, nan, nan, nan});
    }
  }
  ensemble.training_steps += 1;
  return out;
}

inline std::vector<LossBreakdown> train_step(RewardEnsemble& ensemble, const PreferenceStore& store,
                                             const RewardTrainConfig& cfg, Rng& rng) {
  const auto records = store.snapshot();
  return train_step(ensemble, records, cfg, rng);
}

/// Mean member reward for one frame [state; action].
inline double predict_reward(const RewardEnsemble& ensemble, std::span<const double> frame,
                             diffnet::Tape<double>& tape) {
  double sum = 0.0;
  for (const auto& m : ensemble.members) sum += diffnet::forward_scalar(m.params, frame, tape);
  return sum / static_cast<double>(ensemble.members.size());
}

inline double predict_reward(const RewardEnsemble& ensemble, std::span<const double> state,
                             std::span<const double> action) {
  std::vector<double> frame(state.begin(), state.end());
  frame.insert(frame.end(), action.begin(), action.end());
  diffnet::Tape<double> tape;
  return predict_reward(ensemble, frame, tape);
}

/// Fraction of non-tied records whose preferred segment the member ranks
/// higher. 1 when every record is a tie.
inline double preference_accuracy(const MlpParams& member, std::span<const PreferenceRecord> records) {
  diffnet::Tape<double> tape;
  std::size_t counted = 0;
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (r.y.is_equal()) continue;
    ++counted;
    const double r0 = segment_return(member, r.sigma0.frames(), tape);
    const double r1 = segment_return(member, r.sigma1.frames(), tape);
    const bool predicts_second = r1 > r0;
    if (predicts_second == (r.y.y1 > r.y.y0)) ++correct;
  }
  return counted == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(counted);
}

// ---- checkpoint: member_<i>.json (diffnet snapshot + optimizer) and manifest.json ----

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"alpha1", w.alpha1}, {"alpha2", w.alpha2}, {"label_smoothing", w.label_smoothing}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.alpha1 = j.value("alpha1", w.alpha1);
  w.alpha2 = j.value("alpha2", w.alpha2);
  w.label_smoothing = j.value("label_smoothing", w.label_smoothing);
  w.validate();
  return w;
}

inline void save_ensemble(const std::filesystem::path& dir, const RewardEnsemble& e, const LossWeights& weights) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "annopref.reward_ensemble"},
                          {"version", 1},
                          {"loss_weights", to_json(weights)},
                          {"training_steps", e.training_steps},
                          {"members", nlohmann::json::array()}};
  for (std::size_t m = 0; m < e.members.size(); ++m) {
    const std::string file = "member_" + std::to_string(m) + ".json";
    diffnet::save_snapshot(dir / file, e.members[m].params, &e.members[m].optimizer);
    manifest["members"].push_back(file);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2);
}

inline RewardEnsemble load_ensemble(const std::filesystem::path& dir, LossWeights* weights = nullptr) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing reward ensemble manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "annopref.reward_ensemble") throw InvalidInput("not a reward ensemble manifest");
  RewardEnsemble e;
  e.training_steps = manifest.at("training_steps").get<std::uint64_t>();
  for (const auto& file : manifest.at("members")) {
    Member m;
    m.params = diffnet::load_snapshot(dir / file.get<std::string>(), &m.optimizer);
    e.members.push_back(std::move(m));
  }
  if (e.members.empty()) throw InvalidInput("reward ensemble manifest lists no members");
  e.spec = e.members.front().params.spec();
  for (const auto& m : e.members) {
    if (!(m.params.spec() == e.spec)) throw InvalidInput("ensemble members disagree on MlpSpec");
  }
  if (weights != nullptr) *weights = loss_weights_from_json(manifest.at("loss_weights"));
  return e;
}

}  // namespace annopref::reward
