#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/matrix.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/diffnet/batch.hpp"
#include "annopref/diffnet/mlp.hpp"
#include "annopref/pref_data/segment.hpp"

namespace annopref::saliency {

using diffnet::MlpParams;

enum class IgBaseline { zeros, segment_mean };
enum class Normalization { raw, standardized };

inline IgBaseline ig_baseline_from_string(const std::string& s) {
  if (s == "zeros") return IgBaseline::zeros;
  if (s == "segment_mean") return IgBaseline::segment_mean;
  throw InvalidInput("unknown ig_baseline '" + s + "'");
}
inline std::string to_string(IgBaseline b) { return b == IgBaseline::zeros ? "zeros" : "segment_mean"; }

struct SaliencyConfig {
  std::size_t n_smooth = 16;
  double noise_scale = 0.01;
  std::size_t ig_steps = 32;
  IgBaseline ig_baseline = IgBaseline::zeros;

  void validate() const {
    detail::require(n_smooth >= 1, "SaliencyConfig: n_smooth must be >= 1");
    detail::require(noise_scale >= 0.0, "SaliencyConfig: noise_scale must be >= 0");
    detail::require(ig_steps >= 2, "SaliencyConfig: ig_steps must be >= 2");
  }
};

/// Per-timestep explanation of a segment.
struct TimestepSaliency {
  std::vector<double> values;
  Normalization normalization = Normalization::raw;
};

inline constexpr double kNoiseStdFloor = 1e-6;
inline constexpr double kVarianceFloor = 1e-8;

/// Perturbation standard deviation per feature: noise_scale times the
/// feature's (population) standard deviation over the segment's frames.
inline std::vector<double> perturbation_std(const RowMatrix& frames, double noise_scale) {
  const auto n = static_cast<double>(frames.rows());
  std::vector<double> out(static_cast<std::size_t>(frames.cols()));
  for (Eigen::Index c = 0; c < frames.cols(); ++c) {
    const double mean = frames.col(c).sum() / n;
    const double var = (frames.col(c).array() - mean).square().sum() / n;
    out[static_cast<std::size_t>(c)] = noise_scale * std::max(std::sqrt(var), kNoiseStdFloor);
  }
  return out;
}

/// SmoothGrad for one frame: mean input gradient over n_smooth Gaussian
/// perturbations with per-feature scale `noise_std`.
inline std::vector<double> smoothgrad_frame(const MlpParams& net, std::span<const double> frame,
                                            std::span<const double> noise_std, std::size_t n_smooth, Rng& rng) {
  detail::require(n_smooth >= 1, "smoothgrad_frame: n_smooth must be >= 1");
  detail::require(noise_std.size() == frame.size(), "smoothgrad_frame: noise_std dimension mismatch");
  for (double v : frame) detail::require(std::isfinite(v), "smoothgrad_frame: non-finite frame");
  diffnet::Tape<double> tape;
  std::vector<double> x(frame.size());
  std::vector<double> avg(frame.size(), 0.0);
  for (std::size_t i = 0; i < n_smooth; ++i) {
    for (std::size_t j = 0; j < frame.size(); ++j) x[j] = frame[j] + noise_std[j] * rng.normal();
    const auto g = diffnet::input_grads(net, x, 0, tape);
    for (std::size_t j = 0; j < g.size(); ++j) avg[j] += g[j];
  }
  for (double& a : avg) a /= static_cast<double>(n_smooth);
  return avg;
}

inline std::vector<double> smoothgrad_frame(const MlpParams& net, std::span<const double> frame, double noise_std,
                                            std::size_t n_smooth, Rng& rng) {
  const std::vector<double> scale(frame.size(), noise_std);
  return smoothgrad_frame(net, frame, scale, n_smooth, rng);
}

/// Everything the annotation/structural losses need to backpropagate through
/// the explanation: the perturbed inputs and the averaged gradients.
struct SmoothGradTrace {
  std::size_t n_smooth = 1;
  RowMatrix perturbed;  // (H * n_smooth) x D, timestep-major
  RowMatrix averaged;   // H x D
  std::vector<double> xi;
};

inline SmoothGradTrace smoothgrad_trace(const MlpParams& net, const RowMatrix& frames, const SaliencyConfig& cfg,
                                        Rng& rng) {
  cfg.validate();
  detail::require(frames.rows() >= 1, "xi: empty segment");
  detail::require(static_cast<std::size_t>(frames.cols()) == net.spec().input_dim, "xi: frame dimension mismatch");
  const auto h = frames.rows();
  const auto d = frames.cols();
  const auto n = static_cast<Eigen::Index>(cfg.n_smooth);
  const auto noise_std = perturbation_std(frames, cfg.noise_scale);
  SmoothGradTrace tr;
  tr.n_smooth = cfg.n_smooth;
  tr.perturbed.resize(h * n, d);
  tr.averaged = RowMatrix::Zero(h, d);
  tr.xi.assign(static_cast<std::size_t>(h), 0.0);
  for (Eigen::Index t = 0; t < h; ++t) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) {
        tr.perturbed(t * n + i, j) = frames(t, j) + noise_std[static_cast<std::size_t>(j)] * rng.normal();
      }
    }
  }
  const RowMatrix g = diffnet::input_grads_batch(net, tr.perturbed);
  for (Eigen::Index t = 0; t < h; ++t) {
    tr.averaged.row(t) = g.middleRows(t * n, n).colwise().sum() / static_cast<double>(n);
    tr.xi[static_cast<std::size_t>(t)] = tr.averaged.row(t).cwiseAbs().sum();
  }
  return tr;
}

/// Adds d/dpsi of sum_t dL/dxi_t * xi_t into `grad`, i.e. backpropagates an
/// upstream gradient on the explanation into the network parameters.
inline void backprop_xi(const MlpParams& net, const SmoothGradTrace& tr, std::span<const double> dl_dxi,
                        std::span<double> grad) {
  const auto h = tr.averaged.rows();
  const auto d = tr.averaged.cols();
  const auto n = static_cast<Eigen::Index>(tr.n_smooth);
  detail::require(dl_dxi.size() == static_cast<std::size_t>(h), "backprop_xi: upstream length mismatch");
  RowMatrix v(h * n, d);
  bool any = false;
  for (Eigen::Index t = 0; t < h; ++t) {
    const double up = dl_dxi[static_cast<std::size_t>(t)] / static_cast<double>(n);
    any = any || up != 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double a = tr.averaged(t, j);
      const double sign = a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
      v.block(t * n, j, n, 1).setConstant(up * sign);
    }
  }
  if (any) diffnet::input_gradient_vjp_batch(net, tr.perturbed, v, grad);
}

/// Timestep-level explanation: per timestep, the L1 norm of the SmoothGrad
/// input gradient of the (scalar) reward.
inline TimestepSaliency xi(const MlpParams& net, const Segment& segment, const SaliencyConfig& cfg, Rng& rng) {
  detail::require(segment.length() >= 1, "xi: empty segment");
  auto tr = smoothgrad_trace(net, segment.frames(), cfg, rng);
  return {std::move(tr.xi), Normalization::raw};
}

struct StandardizeStats {
  double mean = 0.0;
  double std = 1.0;
};

inline StandardizeStats standardize_stats(std::span<const double> raw) {
  const auto n = static_cast<double>(raw.size());
  double mean = 0.0;
  for (double v : raw) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  var /= n;
  return {mean, std::sqrt(std::max(var, kVarianceFloor))};
}

/// Zero-mean, unit-variance rescaling within the segment (population std,
/// variance floored at 1e-8).
inline TimestepSaliency standardize(const TimestepSaliency& sal) {
  if (sal.normalization == Normalization::standardized) return sal;
  TimestepSaliency out{std::vector<double>(sal.values.size()), Normalization::standardized};
  if (sal.values.empty()) return out;
  const auto st = standardize_stats(sal.values);
  for (std::size_t t = 0; t < sal.values.size(); ++t) out.values[t] = (sal.values[t] - st.mean) / st.std;
  return out;
}

/// Backward of `standardize`: maps dL/dz to dL/draw.
inline std::vector<double> standardize_backward(std::span<const double> raw, std::span<const double> dl_dz) {
  const auto n = raw.size();
  const auto st = standardize_stats(raw);
  double var = 0.0;
  for (double v : raw) var += (v - st.mean) * (v - st.mean);
  var /= static_cast<double>(n);
  const bool floored = var < kVarianceFloor;
  double g_mean = 0.0;
  double gz = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    g_mean += dl_dz[t];
    gz += dl_dz[t] * (raw[t] - st.mean) / st.std;
  }
  g_mean /= static_cast<double>(n);
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double z = (raw[t] - st.mean) / st.std;
    out[t] = (dl_dz[t] - g_mean) / st.std;
    if (!floored) out[t] -= z * gz / (static_cast<double>(n) * st.std);
  }
  return out;
}

/// Integrated-gradients attribution from `baseline` to `frame` using the
/// trapezoidal rule on `steps` equally spaced path points (endpoints
/// included), multiplied elementwise by (frame - baseline).
inline std::vector<double> integrated_gradients(const MlpParams& net, std::span<const double> frame,
                                                std::span<const double> baseline, std::size_t steps) {
  detail::require(steps >= 2, "integrated_gradients: steps must be >= 2");
  detail::require(frame.size() == baseline.size(), "integrated_gradients: baseline dimension mismatch");
  for (double v : frame) detail::require(std::isfinite(v), "integrated_gradients: non-finite frame");
  const std::size_t d = frame.size();
  diffnet::Tape<double> tape;
  std::vector<double> x(d);
  std::vector<double> path_integral(d, 0.0);
  const double h = 1.0 / static_cast<double>(steps - 1);
  for (std::size_t k = 0; k < steps; ++k) {
    const double alpha = static_cast<double>(k) * h;
    for (std::size_t j = 0; j < d; ++j) x[j] = baseline[j] + alpha * (frame[j] - baseline[j]);
    const double w = (k == 0 || k + 1 == steps) ? 0.5 * h : h;
    const auto g = diffnet::input_grads(net, x, 0, tape);
    for (std::size_t j = 0; j < d; ++j) path_integral[j] += w * g[j];
  }
  std::vector<double> attr(d);
  for (std::size_t j = 0; j < d; ++j) attr[j] = (frame[j] - baseline[j]) * path_integral[j];
  return attr;
}

inline std::vector<double> ig_baseline(const RowMatrix& frames, IgBaseline mode) {
  std::vector<double> b(static_cast<std::size_t>(frames.cols()), 0.0);
  if (mode == IgBaseline::segment_mean) {
    for (Eigen::Index c = 0; c < frames.cols(); ++c) {
      b[static_cast<std::size_t>(c)] = frames.col(c).mean();
    }
  }
  return b;
}

/// Per-timestep IG explanation: sum of absolute attributions per frame.
inline TimestepSaliency integrated_gradients_xi(const MlpParams& net, const Segment& segment,
                                                const SaliencyConfig& cfg) {
  cfg.validate();
  const RowMatrix frames = segment.frames();
  const auto base = ig_baseline(frames, cfg.ig_baseline);
  TimestepSaliency out{std::vector<double>(segment.length()), Normalization::raw};
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    const auto attr = integrated_gradients(net, row_span(frames, t), base, cfg.ig_steps);
    double s = 0.0;
    for (double a : attr) s += std::abs(a);
    out.values[static_cast<std::size_t>(t)] = s;
  }
  return out;
}

}  // namespace annopref::saliency
