#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <span>
#include <tuple>
#include <spdlog/spdlog.h>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/matrix.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/diffnet/adamw.hpp"
#include "annopref/diffnet/batch.hpp"
#include "annopref/diffnet/mlp.hpp"
#include "annopref/diffnet/serialize.hpp"
#include "annopref/envs.hpp"
#include "annopref/reward_model.hpp"

namespace annopref::agent {

using diffnet::MlpParams;
using diffnet::MlpSpec;

/// Sampled minibatch as seen by the learner. Carries the proxy reward only.
struct SampleBatch {
  RowMatrix states;
  RowMatrix actions;
  RowMatrix next_states;
  Eigen::VectorXd rewards;
  Eigen::VectorXd not_terminal;
};

/// FIFO transition store. The environment's true reward is kept for
/// bookkeeping, but `sample` never returns it.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t state_dim, std::size_t action_dim)
      : capacity_(capacity),
        states_(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(state_dim)),
        actions_(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(action_dim)),
        next_states_(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(state_dim)),
        true_rewards_(capacity, 0.0),
        proxy_rewards_(capacity, 0.0),
        terminal_(capacity, 0) {
    detail::require(capacity >= 1, "ReplayBuffer: capacity must be >= 1");
  }

  /// `terminal` marks a true environment termination; fixed-horizon episode
  /// ends are not terminal for bootstrapping.
  void add(const envs::Transition& t, double proxy_reward, bool terminal = false) {
    const auto row = static_cast<Eigen::Index>(head_);
    for (std::size_t j = 0; j < t.state.size(); ++j) states_(row, static_cast<Eigen::Index>(j)) = t.state[j];
    for (std::size_t j = 0; j < t.action.size(); ++j) actions_(row, static_cast<Eigen::Index>(j)) = t.action[j];
    for (std::size_t j = 0; j < t.next_state.size(); ++j) {
      next_states_(row, static_cast<Eigen::Index>(j)) = t.next_state[j];
    }
    true_rewards_[head_] = t.true_reward;
    proxy_rewards_[head_] = proxy_reward;
    terminal_[head_] = terminal ? 1 : 0;
    head_ = (head_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
    ++total_added_;
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t total_added() const { return total_added_; }

  SampleBatch sample(std::size_t batch_size, Rng& rng) const {
    detail::require(size_ >= batch_size && batch_size >= 1, "ReplayBuffer: not enough transitions to sample");
    SampleBatch b;
    const auto n = static_cast<Eigen::Index>(batch_size);
    b.states.resize(n, states_.cols());
    b.actions.resize(n, actions_.cols());
    b.next_states.resize(n, next_states_.cols());
    b.rewards.resize(n);
    b.not_terminal.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto i = static_cast<Eigen::Index>(rng.uniform_index(size_));
      b.states.row(k) = states_.row(i);
      b.actions.row(k) = actions_.row(i);
      b.next_states.row(k) = next_states_.row(i);
      b.rewards(k) = proxy_rewards_[static_cast<std::size_t>(i)];
      b.not_terminal(k) = terminal_[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
    }
    return b;
  }

  /// Replaces every stored proxy reward with the ensemble's current
  /// prediction. Returns the number of transitions relabeled.
  std::size_t relabel(const reward::RewardEnsemble& ensemble) {
    diffnet::Tape<double> tape;
    std::vector<double> frame(static_cast<std::size_t>(states_.cols() + actions_.cols()));
    const auto sd = static_cast<std::size_t>(states_.cols());
    for (std::size_t i = 0; i < size_; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (std::size_t j = 0; j < sd; ++j) frame[j] = states_(r, static_cast<Eigen::Index>(j));
      for (Eigen::Index j = 0; j < actions_.cols(); ++j) frame[sd + static_cast<std::size_t>(j)] = actions_(r, j);
      proxy_rewards_[i] = reward::predict_reward(ensemble, frame, tape);
    }
    return size_;
  }

  // Read access for auditing and tests. The learner goes through `sample`.
  std::span<const double> proxy_rewards() const { return {proxy_rewards_.data(), size_}; }
  std::span<const double> true_rewards() const { return {true_rewards_.data(), size_}; }
  std::span<const double> state(std::size_t i) const { return row_span(states_, static_cast<Eigen::Index>(i)); }
  std::span<const double> action(std::size_t i) const { return row_span(actions_, static_cast<Eigen::Index>(i)); }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::uint64_t header[6] = {capacity_, static_cast<std::uint64_t>(states_.cols()),
                                     static_cast<std::uint64_t>(actions_.cols()), size_, head_, total_added_};
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    auto put = [&](const double* p, std::size_t n) { out.write(reinterpret_cast<const char*>(p), n * sizeof(double)); };
    put(states_.data(), static_cast<std::size_t>(states_.size()));
    put(actions_.data(), static_cast<std::size_t>(actions_.size()));
    put(next_states_.data(), static_cast<std::size_t>(next_states_.size()));
    put(true_rewards_.data(), capacity_);
    put(proxy_rewards_.data(), capacity_);
    out.write(reinterpret_cast<const char*>(terminal_.data()), static_cast<std::streamsize>(capacity_));
    if (!out) throw std::runtime_error("replay buffer write failed");
  }

  static ReplayBuffer load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::uint64_t h[6];
    in.read(reinterpret_cast<char*>(h), sizeof h);
    ReplayBuffer b(h[0], h[1], h[2]);
    b.size_ = h[3];
    b.head_ = h[4];
    b.total_added_ = h[5];
    auto get = [&](double* p, std::size_t n) { in.read(reinterpret_cast<char*>(p), n * sizeof(double)); };
    get(b.states_.data(), static_cast<std::size_t>(b.states_.size()));
    get(b.actions_.data(), static_cast<std::size_t>(b.actions_.size()));
    get(b.next_states_.data(), static_cast<std::size_t>(b.next_states_.size()));
    get(b.true_rewards_.data(), b.capacity_);
    get(b.proxy_rewards_.data(), b.capacity_);
    in.read(reinterpret_cast<char*>(b.terminal_.data()), static_cast<std::streamsize>(b.capacity_));
    if (!in) throw InvalidInput("truncated replay buffer file " + path.string());
    return b;
  }

 private:
  static std::span<const double> row_span(const RowMatrix& m, Eigen::Index r) {
    return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
  }

  std::size_t capacity_;
  RowMatrix states_;
  RowMatrix actions_;
  RowMatrix next_states_;
  std::vector<double> true_rewards_;
  std::vector<double> proxy_rewards_;
  std::vector<std::uint8_t> terminal_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::uint64_t total_added_ = 0;
};

struct SacConfig {
  std::vector<std::size_t> hidden_layers{64, 64};
  double gamma = 0.99;
  double tau = 0.005;
  double learning_rate = 3e-4;
  std::size_t batch_size = 128;
  double init_temperature = 0.1;
  bool auto_temperature = true;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  void validate() const {
    if (hidden_layers.empty()) throw ConfigError("agent: hidden_layers must be nonempty");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("agent: gamma must be in [0, 1)");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("agent: tau must be in [0, 1]");
    if (learning_rate <= 0.0) throw ConfigError("agent: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("agent: batch_size must be >= 1");
    if (init_temperature <= 0.0) throw ConfigError("agent: init_temperature must be positive");
    if (!(log_std_min < log_std_max)) throw ConfigError("agent: log_std_min must be below log_std_max");
  }
};

enum class ActMode { stochastic, deterministic };

struct UpdateDiagnostics {
  double critic1_loss = 0.0;
  double critic2_loss = 0.0;
  double policy_loss = 0.0;
  double temperature = 0.0;
  double entropy = 0.0;
  bool skipped = false;
};

/// Soft actor-critic with a tanh-squashed Gaussian policy, twin critics,
/// target critics and an automatically tuned entropy temperature.
class Sac {
 public:
  Sac(const envs::EnvSpec& env, SacConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        state_dim_(env.state_dim),
        action_dim_(env.action_dim),
        target_entropy_(-static_cast<double>(env.action_dim)) {
    cfg_.validate();
    for (const auto& b : env.action_bounds) {
      center_.push_back(0.5 * (b.lo + b.hi));
      half_range_.push_back(0.5 * (b.hi - b.lo));
    }
    MlpSpec pi{state_dim_, cfg_.hidden_layers, diffnet::Activation::relu, 2 * action_dim_, diffnet::Activation::linear};
    MlpSpec q{state_dim_ + action_dim_, cfg_.hidden_layers, diffnet::Activation::relu, 1, diffnet::Activation::linear};
    policy_ = diffnet::init_params(pi, derive_seed(seed, 0));
    q1_ = diffnet::init_params(q, derive_seed(seed, 1));
    q2_ = diffnet::init_params(q, derive_seed(seed, 2));
    q1_target_ = q1_;
    q2_target_ = q2_;
    diffnet::AdamWConfig adam{cfg_.learning_rate, 0.9, 0.999, 0.0, 1e-8};
    policy_opt_ = diffnet::OptimizerState(adam, policy_.size());
    q1_opt_ = diffnet::OptimizerState(adam, q1_.size());
    q2_opt_ = diffnet::OptimizerState(adam, q2_.size());
    alpha_opt_ = diffnet::OptimizerState(adam, 1);
    log_alpha_ = std::log(cfg_.init_temperature);
  }

  const SacConfig& config() const { return cfg_; }
  double temperature() const { return std::exp(log_alpha_); }
  std::uint64_t updates() const { return updates_; }
  const MlpParams& policy() const { return policy_; }
  const MlpParams& critic(int i) const { return i == 0 ? q1_ : q2_; }
  const MlpParams& target_critic(int i) const { return i == 0 ? q1_target_ : q2_target_; }
  MlpParams& mutable_critic(int i) { return i == 0 ? q1_ : q2_; }
  struct PolicyObjective {
    double loss = 0.0;
    Eigen::VectorXd log_prob;
  };

  /// mean(alpha log pi(a|s) - min_i Q_i(s, a)) with a = squash(mu + sigma eps)
  /// for the given standard normal noise. The gradient with respect to the
  /// policy parameters is added into `grad` (skipped when empty).
  PolicyObjective policy_objective(const RowMatrix& states, const RowMatrix& eps, std::span<double> grad) const {
    const auto n = states.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    const double alpha = temperature();
    const auto ad = static_cast<Eigen::Index>(action_dim_);
    diffnet::BatchTape ptape, q1t, q2t;
    const auto cur = sample_policy(states, eps, ptape);
    const RowMatrix s_new = concat(states, cur.actions);
    diffnet::forward_batch(q1_, s_new, q1t);
    diffnet::forward_batch(q2_, s_new, q2t);
    const Eigen::VectorXd qa = q1t.output().col(0);
    const Eigen::VectorXd qb = q2t.output().col(0);
    RowMatrix up_a = RowMatrix::Zero(n, 1), up_b = RowMatrix::Zero(n, 1);
    double qmin_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (qa(i) <= qb(i)) {
        up_a(i, 0) = -inv_n;
        qmin_sum += qa(i);
      } else {
        up_b(i, 0) = -inv_n;
        qmin_sum += qb(i);
      }
    }
    RowMatrix dxa, dxb;
    diffnet::backward_batch(q1_, q1t, up_a, {}, &dxa);
    diffnet::backward_batch(q2_, q2t, up_b, {}, &dxb);
    const RowMatrix dl_da = (dxa + dxb).rightCols(ad);
    RowMatrix up_pi(n, 2 * ad);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < ad; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        const double u = cur.u(i, j);
        const double t = std::tanh(u);
        const double sigma = std::exp(cur.log_std(i, j));
        // d/du of alpha*log pi picks up -d/du log(1 - tanh^2) = 2 tanh(u)
        const double dl_du = dl_da(i, j) * half_range_[jj] * (1.0 - t * t) + alpha * inv_n * 2.0 * t;
        const double dl_dls = dl_du * sigma * cur.eps(i, j) - alpha * inv_n;
        const double th = std::tanh(cur.raw_log_std(i, j));
        up_pi(i, j) = dl_du;
        up_pi(i, ad + j) = dl_dls * 0.5 * (cfg_.log_std_max - cfg_.log_std_min) * (1.0 - th * th);
      }
    }
    diffnet::backward_batch(policy_, ptape, up_pi, grad);
    return {(alpha * cur.log_prob.sum() - qmin_sum) * inv_n, cur.log_prob};
  }

  MlpParams& mutable_policy() { return policy_; }
  void set_tau(double tau) { cfg_.tau = tau; }

  /// Action within the environment bounds. Deterministic mode returns the
  /// squashed mean.
  std::vector<double> act(std::span<const double> state, ActMode mode, Rng& rng) const {
    diffnet::Tape<double> tape;
    diffnet::forward_tape<double>(policy_, state, tape);
    const auto out = tape.output();
    std::vector<double> a(action_dim_);
    for (std::size_t j = 0; j < action_dim_; ++j) {
      double u = out[j];
      if (mode == ActMode::stochastic) u += std::exp(log_std(out[action_dim_ + j])) * rng.normal();
      a[j] = center_[j] + half_range_[j] * std::tanh(u);
    }
    return a;
  }

  std::vector<double> random_action(Rng& rng) const {
    std::vector<double> a(action_dim_);
    for (std::size_t j = 0; j < action_dim_; ++j) a[j] = rng.uniform(center_[j] - half_range_[j], center_[j] + half_range_[j]);
    return a;
  }

  /// One gradient step on both critics, the policy and the temperature,
  /// followed by a soft target update. A numeric failure leaves every
  /// network untouched and reports `skipped`.
  UpdateDiagnostics update(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng) {
    detail::require(buffer.size() >= batch_size, "update: buffer holds fewer transitions than batch_size");
    const SampleBatch batch = buffer.sample(batch_size, rng);
    return update(batch, rng);
  }

  UpdateDiagnostics update(const SampleBatch& b, Rng& rng) {
    const auto snapshot = std::make_tuple(policy_, q1_, q2_, q1_target_, q2_target_, policy_opt_, q1_opt_, q2_opt_,
                                          alpha_opt_, log_alpha_);
    try {
      auto d = update_impl(b, rng);
      ++updates_;
      return d;
    } catch (const NumericError& e) {
      std::tie(policy_, q1_, q2_, q1_target_, q2_target_, policy_opt_, q1_opt_, q2_opt_, alpha_opt_, log_alpha_) =
          snapshot;
      spdlog::error("agent update skipped: {}", e.what());
      UpdateDiagnostics d;
      d.skipped = true;
      d.temperature = temperature();
      return d;
    }
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    diffnet::save_snapshot(dir / "policy.json", policy_, &policy_opt_);
    diffnet::save_snapshot(dir / "critic1.json", q1_, &q1_opt_);
    diffnet::save_snapshot(dir / "critic2.json", q2_, &q2_opt_);
    diffnet::save_snapshot(dir / "critic1_target.json", q1_target_);
    diffnet::save_snapshot(dir / "critic2_target.json", q2_target_);
    nlohmann::json m{{"format", "annopref.sac"},
                     {"version", 1},
                     {"log_temperature", log_alpha_},
                     {"temperature_optimizer", diffnet::to_json(alpha_opt_)},
                     {"updates", updates_}};
    std::ofstream(dir / "agent.json") << m.dump(2);
  }

  void load(const std::filesystem::path& dir) {
    policy_ = diffnet::load_snapshot(dir / "policy.json", &policy_opt_);
    q1_ = diffnet::load_snapshot(dir / "critic1.json", &q1_opt_);
    q2_ = diffnet::load_snapshot(dir / "critic2.json", &q2_opt_);
    q1_target_ = diffnet::load_snapshot(dir / "critic1_target.json");
    q2_target_ = diffnet::load_snapshot(dir / "critic2_target.json");
    std::ifstream in(dir / "agent.json");
    const auto m = nlohmann::json::parse(in);
    log_alpha_ = m.at("log_temperature").get<double>();
    alpha_opt_ = diffnet::optimizer_from_json(m.at("temperature_optimizer"));
    updates_ = m.at("updates").get<std::uint64_t>();
  }

 private:
  double log_std(double raw) const {
    return cfg_.log_std_min + 0.5 * (cfg_.log_std_max - cfg_.log_std_min) * (std::tanh(raw) + 1.0);
  }

  struct PolicySample {
    RowMatrix actions;     // scaled to env bounds
    RowMatrix eps;         // standard normal draws
    RowMatrix u;           // pre-squash
    RowMatrix log_std;
    RowMatrix raw_log_std;
    Eigen::VectorXd log_prob;
  };

  RowMatrix draw_noise(Eigen::Index n, Rng& rng) const {
    RowMatrix eps(n, static_cast<Eigen::Index>(action_dim_));
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    return eps;
  }

  PolicySample sample_policy(const RowMatrix& states, const RowMatrix& eps, diffnet::BatchTape& tape) const {
    diffnet::forward_batch(policy_, states, tape);
    const RowMatrix& out = tape.output();
    const auto n = states.rows();
    const auto ad = static_cast<Eigen::Index>(action_dim_);
    PolicySample s;
    s.actions.resize(n, ad);
    s.eps.resize(n, ad);
    s.u.resize(n, ad);
    s.log_std.resize(n, ad);
    s.raw_log_std = out.rightCols(ad);
    s.log_prob = Eigen::VectorXd::Zero(n);
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < ad; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        const double ls = log_std(out(i, ad + j));
        const double e = eps(i, j);
        const double u = out(i, j) + std::exp(ls) * e;
        s.eps(i, j) = e;
        s.u(i, j) = u;
        s.log_std(i, j) = ls;
        s.actions(i, j) = center_[jj] + half_range_[jj] * std::tanh(u);
        s.log_prob(i) += -0.5 * e * e - ls - 0.5 * log_2pi - softplus_log_jacobian(u) - std::log(half_range_[jj]);
      }
    }
    return s;
  }

  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  static double softplus_log_jacobian(double u) {
    const double x = -2.0 * u;
    const double softplus = x > 30.0 ? x : std::log1p(std::exp(x));
    return 2.0 * (std::numbers::ln2 - u - softplus);
  }

  static RowMatrix concat(const RowMatrix& a, const RowMatrix& b) {
    RowMatrix x(a.rows(), a.cols() + b.cols());
    x.leftCols(a.cols()) = a;
    x.rightCols(b.cols()) = b;
    return x;
  }

  UpdateDiagnostics update_impl(const SampleBatch& b, Rng& rng) {
    const auto n = b.states.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    const double alpha = temperature();
    const auto ad = static_cast<Eigen::Index>(action_dim_);
    UpdateDiagnostics d;

    // Critic targets.
    diffnet::BatchTape pt, t1, t2;
    const auto next = sample_policy(b.next_states, draw_noise(n, rng), pt);
    const RowMatrix next_in = concat(b.next_states, next.actions);
    diffnet::forward_batch(q1_target_, next_in, t1);
    diffnet::forward_batch(q2_target_, next_in, t2);
    const Eigen::VectorXd next_q = t1.output().col(0).cwiseMin(t2.output().col(0));
    const Eigen::VectorXd target =
        b.rewards + cfg_.gamma * b.not_terminal.cwiseProduct(next_q - alpha * next.log_prob);

    // Critic regression.
    const RowMatrix sa = concat(b.states, b.actions);
    diffnet::Gradient g1(q1_.size(), 0.0), g2(q2_.size(), 0.0);
    {
      diffnet::BatchTape c1, c2;
      diffnet::forward_batch(q1_, sa, c1);
      diffnet::forward_batch(q2_, sa, c2);
      const Eigen::VectorXd e1 = c1.output().col(0) - target;
      const Eigen::VectorXd e2 = c2.output().col(0) - target;
      d.critic1_loss = e1.squaredNorm() * inv_n;
      d.critic2_loss = e2.squaredNorm() * inv_n;
      const RowMatrix u1 = 2.0 * inv_n * e1;
      const RowMatrix u2 = 2.0 * inv_n * e2;
      diffnet::backward_batch(q1_, c1, u1, g1);
      diffnet::backward_batch(q2_, c2, u2, g2);
    }
    diffnet::optimizer_step(q1_.values(), g1, q1_opt_);
    diffnet::optimizer_step(q2_.values(), g2, q2_opt_);

    diffnet::Gradient gp(policy_.size(), 0.0);
    const auto obj = policy_objective(b.states, draw_noise(n, rng), gp);
    d.policy_loss = obj.loss;
    d.entropy = -obj.log_prob.mean();
    diffnet::optimizer_step(policy_.values(), gp, policy_opt_);

    if (cfg_.auto_temperature) {
      const double g = -(obj.log_prob.mean() + target_entropy_);
      const double ga[1] = {g};
      double la[1] = {log_alpha_};
      diffnet::optimizer_step(la, ga, alpha_opt_);
      log_alpha_ = la[0];
    }
    d.temperature = temperature();

    soft_update(q1_, q1_target_);
    soft_update(q2_, q2_target_);
    return d;
  }

  void soft_update(const MlpParams& src, MlpParams& dst) const {
    auto s = src.values();
    auto t = dst.values();
    if (cfg_.tau == 1.0) {
      std::copy(s.begin(), s.end(), t.begin());
      return;
    }
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = cfg_.tau * s[i] + (1.0 - cfg_.tau) * t[i];
  }

  SacConfig cfg_;
  std::size_t state_dim_;
  std::size_t action_dim_;
  double target_entropy_;
  std::vector<double> center_;
  std::vector<double> half_range_;
  MlpParams policy_, q1_, q2_, q1_target_, q2_target_;
  diffnet::OptimizerState policy_opt_, q1_opt_, q2_opt_, alpha_opt_;
  double log_alpha_ = 0.0;
  std::uint64_t updates_ = 0;
};

}  // namespace annopref::agent
