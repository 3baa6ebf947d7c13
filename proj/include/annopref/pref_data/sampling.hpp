#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/pref_data/store.hpp"

namespace annopref {

/// Samples `count` segments: an episode uniformly, then a start offset
/// uniformly among those that keep the segment inside the episode.
inline std::vector<Segment> extract_segments(std::span<const Episode> episodes, std::size_t count,
                                             std::size_t max_len, Rng& rng) {
  detail::require(!episodes.empty(), "extract_segments: experience contains no complete episode");
  detail::require(max_len >= 1, "extract_segments: max_len must be >= 1");
  for (const auto& ep : episodes) {
    detail::require(ep.length() >= 1, "extract_segments: empty episode");
    detail::require(static_cast<std::size_t>(ep.actions.rows()) == ep.length() && ep.true_rewards.size() == ep.length(),
                    "extract_segments: episode arrays disagree in length");
  }
  std::vector<Segment> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto& ep = episodes[rng.uniform_index(episodes.size())];
    const std::size_t len = std::min(max_len, ep.length());
    const std::size_t start = rng.uniform_index(ep.length() - len + 1);
    Segment s;
    const auto rows = static_cast<Eigen::Index>(len);
    const auto first = static_cast<Eigen::Index>(start);
    s.states = ep.states.middleRows(first, rows);
    s.actions = ep.actions.middleRows(first, rows);
    s.episode_id = ep.id;
    s.start_step = start;
    s.true_rewards = std::vector<double>(ep.true_rewards.begin() + static_cast<std::ptrdiff_t>(start),
                                         ep.true_rewards.begin() + static_cast<std::ptrdiff_t>(start + len));
    out.push_back(std::move(s));
  }
  return out;
}

/// Minibatch indices into a dataset of `n` records: with replacement when the
/// dataset is smaller than the batch, without replacement otherwise.
inline std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
  detail::require(n > 0, "minibatch: store is empty");
  detail::require(batch_size > 0, "minibatch: batch_size must be positive");
  std::vector<std::size_t> idx;
  idx.reserve(batch_size);
  if (n < batch_size) {
    for (std::size_t k = 0; k < batch_size; ++k) idx.push_back(rng.uniform_index(n));
    return idx;
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  // Partial Fisher-Yates: the first batch_size slots form a uniform sample.
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t j = k + rng.uniform_index(n - k);
    std::swap(perm[k], perm[j]);
    idx.push_back(perm[k]);
  }
  return idx;
}

inline std::vector<PreferenceRecord> minibatch(std::span<const PreferenceRecord> records, std::size_t batch_size,
                                               Rng& rng) {
  std::vector<PreferenceRecord> out;
  for (auto i : minibatch_indices(records.size(), batch_size, rng)) out.push_back(records[i]);
  return out;
}

inline std::vector<PreferenceRecord> minibatch(const PreferenceStore& store, std::size_t batch_size, Rng& rng) {
  const auto all = store.snapshot();
  return minibatch(all, batch_size, rng);
}

}  // namespace annopref
