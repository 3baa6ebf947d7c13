#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <spdlog/spdlog.h>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/pref_data/sampling.hpp"
#include "annopref/pref_data/segment.hpp"
#include "annopref/reward_model.hpp"

namespace annopref {

struct SegmentPair {
  Segment sigma0;
  Segment sigma1;
};

struct ScoredPair {
  std::size_t candidate_index = 0;
  double score = 0.0;
};

/// Selected queries, sorted by descending disagreement score.
struct QueryBatch {
  std::vector<ScoredPair> pairs;
};

/// Population standard deviation across ensemble members of P[sigma1 > sigma0].
inline double disagreement(const reward::RewardEnsemble& ensemble, const SegmentPair& pair,
                           diffnet::Tape<double>& tape) {
  const RowMatrix f0 = pair.sigma0.frames();
  const RowMatrix f1 = pair.sigma1.frames();
  std::vector<double> p;
  p.reserve(ensemble.size());
  for (const auto& m : ensemble.members) {
    p.push_back(reward::pref_prob_from_returns(reward::segment_return(m.params, f0, tape),
                                               reward::segment_return(m.params, f1, tape)));
  }
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
  double var = 0.0;
  for (double v : p) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(p.size()));
}

/// Top-k candidates by ensemble disagreement, ties kept in candidate order.
/// With fewer than two members there is no disagreement signal and k
/// candidates are drawn uniformly without replacement instead.
inline QueryBatch select_queries(std::span<const SegmentPair> candidates, const reward::RewardEnsemble& ensemble,
                                 std::size_t k, Rng& rng) {
  detail::require(!candidates.empty(), "select_queries: no candidates");
  detail::require(k <= candidates.size(), "select_queries: k exceeds candidate count");
  QueryBatch out;
  if (ensemble.size() < 2) {
    spdlog::warn("select_queries: ensemble has {} member(s); falling back to uniform sampling", ensemble.size());
    for (auto i : minibatch_indices(candidates.size(), k, rng)) out.pairs.push_back({i, 0.0});
    if (k == candidates.size()) {
      std::sort(out.pairs.begin(), out.pairs.end(),
                [](const ScoredPair& a, const ScoredPair& b) { return a.candidate_index < b.candidate_index; });
    }
    return out;
  }
  diffnet::Tape<double> tape;
  std::vector<ScoredPair> scored;
  scored.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scored.push_back({i, disagreement(ensemble, candidates[i], tape)});
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.score > b.score; });
  scored.resize(k);
  out.pairs = std::move(scored);
  return out;
}

}  // namespace annopref
