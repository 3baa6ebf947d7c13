#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "annopref/core/error.hpp"

namespace annopref::diffnet {

struct AdamWConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.9;
  double weight_decay = 0.05;
  double epsilon = 1e-8;

  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

/// Adaptive-moment state with decoupled weight decay.
struct OptimizerState {
  AdamWConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  OptimizerState() = default;
  OptimizerState(AdamWConfig cfg, std::size_t n_params) : config(cfg), m(n_params, 0.0), v(n_params, 0.0) {}

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One AdamW update in place. Rejects non-finite gradients before touching
/// either the parameters or the moments.
inline void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidInput("optimizer_step: dimension mismatch");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) throw NumericError("optimizer_step: non-finite gradient");
  }
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] * decay - c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

}  // namespace annopref::diffnet
