#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "annopref/core/rng.hpp"
#include "annopref/feedback_gateway.hpp"
#include "annopref/pref_data/query_selection.hpp"
#include "annopref/teacher.hpp"

namespace annopref::orchestrator {

struct LabelOutcome {
  std::optional<PreferenceRecord> record;  // empty = skipped or expired
  bool stored = false;                     // already appended by the labeler
  std::string reason;                      // why no record: "skip", "expired", ...
};

struct LabelBatch {
  std::vector<LabelOutcome> outcomes;  // one per submitted pair, same order
  bool deferred = false;               // the labeler gave up on this session
};

/// Source of preference labels for one feedback session.
class Labeler {
 public:
  virtual ~Labeler() = default;
  virtual LabelBatch label(std::span<const SegmentPair> pairs, std::uint64_t session, Rng& rng) = 0;
  virtual std::string name() const = 0;
};

/// In-process simulated teacher.
class TeacherLabeler : public Labeler {
 public:
  explicit TeacherLabeler(teacher::TeacherConfig cfg, std::optional<diffnet::MlpParams> reference = std::nullopt)
      : cfg_(std::move(cfg)), reference_(std::move(reference)) {
    cfg_.validate();
  }

  LabelBatch label(std::span<const SegmentPair> pairs, std::uint64_t, Rng& rng) override {
    LabelBatch out;
    for (const auto& p : pairs) {
      const auto r = teacher::judge(cfg_, p.sigma0, p.sigma1, rng, reference_ ? &*reference_ : nullptr);
      LabelOutcome o;
      if (r.skipped()) {
        o.reason = "skip";
      } else {
        PreferenceRecord rec;
        rec.sigma0 = p.sigma0;
        rec.sigma1 = p.sigma1;
        rec.y = *r.y;
        rec.e0 = r.e0;
        rec.e1 = r.e1;
        rec.source = Source::simulated;
        rec.created_at = now_iso8601();
        o.record = std::move(rec);
      }
      out.outcomes.push_back(std::move(o));
    }
    return out;
  }

  std::string name() const override { return "teacher:" + teacher::to_string(cfg_.kind); }

 private:
  teacher::TeacherConfig cfg_;
  std::optional<diffnet::MlpParams> reference_;
};

/// Publishes queries on a FeedbackGateway and blocks until they resolve or
/// the session timeout passes.
class GatewayLabeler : public Labeler {
 public:
  GatewayLabeler(gateway::FeedbackGateway& gw, std::string run_id, std::chrono::milliseconds session_timeout)
      : gw_(gw), run_id_(std::move(run_id)), timeout_(session_timeout) {}

  LabelBatch label(std::span<const SegmentPair> pairs, std::uint64_t session, Rng&) override {
    LabelBatch out;
    out.outcomes.resize(pairs.size());
    const auto ids = gw_.issue_queries(run_id_, session, pairs);
    const auto deadline = gw_.now() + timeout_;
    std::size_t open = ids.size();
    while (open > 0) {
      auto r = gw_.wait_outcome(run_id_, deadline);
      if (!r) break;
      if (r->batch_index >= out.outcomes.size() || r->batch_index >= ids.size() || ids[r->batch_index] != r->query_id) {
        continue;  // stale outcome from an earlier batch
      }
      auto& o = out.outcomes[r->batch_index];
      if (r->record) {
        o.record = std::move(r->record);
        o.stored = true;
      } else {
        o.reason = gateway::to_string(r->state);
      }
      --open;
    }
    if (open > 0) {
      gw_.cancel_pending(run_id_);
      out.deferred = true;
      for (auto& o : out.outcomes) {
        if (!o.record && o.reason.empty()) o.reason = "timeout";
      }
    }
    return out;
  }

  std::string name() const override { return "gateway"; }

 private:
  gateway::FeedbackGateway& gw_;
  std::string run_id_;
  std::chrono::milliseconds timeout_;
};

}  // namespace annopref::orchestrator
