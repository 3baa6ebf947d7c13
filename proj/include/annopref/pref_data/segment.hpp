#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/matrix.hpp"

namespace annopref {

inline constexpr std::size_t kDefaultMaxSegmentLen = 50;

/// Contiguous slice of one episode. `true_rewards` is carried for the
/// simulated teacher and for evaluation; reward-model code only ever sees
/// `frames()`, which does not include it.
struct Segment {
  RowMatrix states;
  RowMatrix actions;
  std::uint64_t episode_id = 0;
  std::size_t start_step = 0;
  std::optional<std::vector<double>> true_rewards;

  std::size_t length() const { return static_cast<std::size_t>(states.rows()); }
  std::size_t state_dim() const { return static_cast<std::size_t>(states.cols()); }
  std::size_t action_dim() const { return static_cast<std::size_t>(actions.cols()); }
  std::size_t frame_dim() const { return state_dim() + action_dim(); }

  /// Reward-model input: one row [state; action] per timestep.
  RowMatrix frames() const {
    RowMatrix f(states.rows(), states.cols() + actions.cols());
    f.leftCols(states.cols()) = states;
    f.rightCols(actions.cols()) = actions;
    return f;
  }

  /// Field-level invariant violations; empty when valid.
  std::vector<std::string> violations(std::size_t max_len = kDefaultMaxSegmentLen) const {
    std::vector<std::string> out;
    if (length() < 1) out.emplace_back("states: segment must have at least one timestep");
    if (length() > max_len) out.emplace_back("states: segment longer than " + std::to_string(max_len));
    if (actions.rows() != states.rows()) out.emplace_back("actions: row count differs from states");
    if (states.cols() < 1) out.emplace_back("states: state_dim must be >= 1");
    if (actions.cols() < 1) out.emplace_back("actions: action_dim must be >= 1");
    if (!states.allFinite()) out.emplace_back("states: non-finite entry");
    if (!actions.allFinite()) out.emplace_back("actions: non-finite entry");
    if (true_rewards && true_rewards->size() != length()) {
      out.emplace_back("true_rewards: length differs from segment length");
    }
    return out;
  }

  void validate(std::size_t max_len = kDefaultMaxSegmentLen) const {
    const auto v = violations(max_len);
    if (!v.empty()) throw InvalidInput("invalid segment: " + v.front());
  }

  friend bool operator==(const Segment& a, const Segment& b) {
    return a.states.rows() == b.states.rows() && a.states.cols() == b.states.cols() &&
           a.actions.rows() == b.actions.rows() && a.actions.cols() == b.actions.cols() &&
           a.states == b.states && a.actions == b.actions && a.episode_id == b.episode_id &&
           a.start_step == b.start_step && a.true_rewards == b.true_rewards;
  }
};

/// One complete episode of experience, the source for segment extraction.
struct Episode {
  std::uint64_t id = 0;
  RowMatrix states;
  RowMatrix actions;
  std::vector<double> true_rewards;

  std::size_t length() const { return static_cast<std::size_t>(states.rows()); }
};

}  // namespace annopref
