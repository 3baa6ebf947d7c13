#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"

namespace annopref::envs {

struct Interval {
  double lo = -1.0;
  double hi = 1.0;
};

struct EnvSpec {
  std::string name;
  std::size_t state_dim = 1;
  std::size_t action_dim = 1;
  std::size_t episode_len = 200;
  std::vector<Interval> action_bounds;

  void validate() const {
    if (state_dim < 1 || action_dim < 1) throw ConfigError("env: dims must be >= 1");
    if (episode_len < 1) throw ConfigError("env: episode_len must be >= 1");
    if (action_bounds.size() != action_dim) throw ConfigError("env: one action bound per action dimension");
    for (const auto& b : action_bounds) {
      if (!(std::isfinite(b.lo) && std::isfinite(b.hi) && b.lo < b.hi)) throw ConfigError("env: bad action bound");
    }
  }
};

struct Transition {
  std::vector<double> state;
  std::vector<double> action;  // after clipping
  std::vector<double> next_state;
  double true_reward = 0.0;
  bool done = false;
  std::size_t step = 0;
  bool clipped = false;
};

/// Episodic environment with a fixed horizon. Subclasses supply the initial
/// state distribution, dynamics and the per-step reward r(s, a).
class Environment {
 public:
  virtual ~Environment() = default;

  const EnvSpec& spec() const { return spec_; }

  std::vector<double> reset(std::uint64_t seed) {
    Rng rng(seed);
    state_ = initial_state(rng);
    step_ = 0;
    done_ = false;
    return state_;
  }

  Transition step(std::span<const double> action) {
    if (state_.empty()) throw InvalidInput("step: reset() must be called first");
    if (done_) throw InvalidInput("step: episode is done; call reset()");
    if (action.size() != spec_.action_dim) throw InvalidInput("step: action dimension mismatch");
    Transition tr;
    tr.state = state_;
    tr.action.assign(action.begin(), action.end());
    for (std::size_t i = 0; i < tr.action.size(); ++i) {
      const auto& b = spec_.action_bounds[i];
      if (!std::isfinite(tr.action[i])) throw InvalidInput("step: non-finite action");
      const double c = std::clamp(tr.action[i], b.lo, b.hi);
      if (c != tr.action[i]) tr.clipped = true;
      tr.action[i] = c;
    }
    tr.true_reward = reward(tr.state, tr.action);
    tr.next_state = dynamics(tr.state, tr.action);
    tr.step = step_;
    tr.done = step_ + 1 >= spec_.episode_len;
    state_ = tr.next_state;
    ++step_;
    done_ = tr.done;
    return tr;
  }

  const std::vector<double>& state() const { return state_; }
  bool done() const { return done_; }
  std::size_t steps_taken() const { return step_; }

  struct Snapshot {
    std::vector<double> state;
    std::size_t step = 0;
    bool done = false;
  };

  Snapshot snapshot() const { return {state_, step_, done_}; }

  void restore(const Snapshot& s) {
    if (!s.state.empty() && s.state.size() != spec_.state_dim) throw InvalidInput("restore: state dimension mismatch");
    state_ = s.state;
    step_ = s.step;
    done_ = s.done;
  }

  virtual double reward(std::span<const double> state, std::span<const double> action) const = 0;

 protected:
  explicit Environment(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  virtual std::vector<double> initial_state(Rng& rng) const = 0;
  virtual std::vector<double> dynamics(std::span<const double> state, std::span<const double> action) const = 0;

 private:
  EnvSpec spec_;
  std::vector<double> state_;
  std::size_t step_ = 0;
  bool done_ = false;
};

inline double true_return(std::span<const Transition> trajectory) {
  double sum = 0.0;
  for (const auto& t : trajectory) sum += t.true_reward;
  return sum;
}

/// Point mass in [-1, 1]^2 pushed by a bounded acceleration toward the origin.
/// State [x, y, vx, vy]; reward -|pos| / sqrt(2), so in [-1, 0].
struct PointReachParams {
  double dt = 0.05;
  double drag = 0.1;
  double arena = 1.0;
  double max_accel = 1.0;
  std::size_t episode_len = 200;
};

class PointReach : public Environment {
 public:
  explicit PointReach(PointReachParams p = {}) : Environment(make_spec(p)), p_(p) {}

  static EnvSpec make_spec(const PointReachParams& p) {
    if (!(p.dt > 0.0 && p.drag >= 0.0 && p.arena > 0.0 && p.max_accel > 0.0)) {
      throw ConfigError("point_reach: dt, arena, max_accel must be positive and drag nonnegative");
    }
    return {"point_reach", 4, 2, p.episode_len, {{-p.max_accel, p.max_accel}, {-p.max_accel, p.max_accel}}};
  }

  double reward(std::span<const double> s, std::span<const double>) const override {
    return -std::hypot(s[0], s[1]) / (std::numbers::sqrt2 * p_.arena);
  }

  const PointReachParams& params() const { return p_; }

 protected:
  std::vector<double> initial_state(Rng& rng) const override {
    const double x = rng.uniform(-p_.arena, p_.arena);
    const double y = rng.uniform(-p_.arena, p_.arena);
    return {x, y, 0.0, 0.0};
  }

  std::vector<double> dynamics(std::span<const double> s, std::span<const double> a) const override {
    std::vector<double> n(4);
    for (int i = 0; i < 2; ++i) {
      double pos = s[i] + s[i + 2] * p_.dt;
      double vel = s[i + 2] + a[i] * p_.dt - p_.drag * s[i + 2] * p_.dt;
      if (pos > p_.arena || pos < -p_.arena) {
        pos = std::clamp(pos, -p_.arena, p_.arena);
        vel = 0.0;
      }
      n[i] = pos;
      n[i + 2] = vel;
    }
    return n;
  }

 private:
  PointReachParams p_;
};

/// Torque-limited pendulum, theta = 0 upright. State [cos th, sin th, omega];
/// reward -(th^2 + 0.1 omega^2 + 0.001 u^2) divided by its maximum.
struct PendulumParams {
  double dt = 0.05;
  double g = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double max_speed = 8.0;
  double max_torque = 2.0;
  std::size_t episode_len = 200;
};

class PendulumSwing : public Environment {
 public:
  explicit PendulumSwing(PendulumParams p = {}) : Environment(make_spec(p)), p_(p) {}

  static EnvSpec make_spec(const PendulumParams& p) {
    if (!(p.dt > 0.0 && p.g > 0.0 && p.mass > 0.0 && p.length > 0.0 && p.max_speed > 0.0 && p.max_torque > 0.0)) {
      throw ConfigError("pendulum_swing: physical parameters must be positive");
    }
    return {"pendulum_swing", 3, 1, p.episode_len, {{-p.max_torque, p.max_torque}}};
  }

  double max_cost() const {
    return std::numbers::pi * std::numbers::pi + 0.1 * p_.max_speed * p_.max_speed +
           0.001 * p_.max_torque * p_.max_torque;
  }

  double reward(std::span<const double> s, std::span<const double> a) const override {
    const double th = std::atan2(s[1], s[0]);
    const double cost = th * th + 0.1 * s[2] * s[2] + 0.001 * a[0] * a[0];
    return -cost / max_cost();
  }

  const PendulumParams& params() const { return p_; }

 protected:
  std::vector<double> initial_state(Rng& rng) const override {
    const double th = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double w = rng.uniform(-1.0, 1.0);
    return {std::cos(th), std::sin(th), w};
  }

  std::vector<double> dynamics(std::span<const double> s, std::span<const double> a) const override {
    const double th = std::atan2(s[1], s[0]);
    const double ml2 = p_.mass * p_.length * p_.length;
    double w = s[2] + (3.0 * p_.g / (2.0 * p_.length) * std::sin(th) + 3.0 / ml2 * a[0]) * p_.dt;
    w = std::clamp(w, -p_.max_speed, p_.max_speed);
    const double nth = th + w * p_.dt;
    return {std::cos(nth), std::sin(nth), w};
  }

 private:
  PendulumParams p_;
};

using EnvFactory = std::function<std::unique_ptr<Environment>()>;

inline std::unique_ptr<Environment> make(const std::string& name, std::size_t episode_len = 200) {
  if (name == "point_reach") {
    PointReachParams p;
    p.episode_len = episode_len;
    return std::make_unique<PointReach>(p);
  }
  if (name == "pendulum_swing") {
    PendulumParams p;
    p.episode_len = episode_len;
    return std::make_unique<PendulumSwing>(p);
  }
  throw ConfigError("unknown environment '" + name + "'");
}

}  // namespace annopref::envs
