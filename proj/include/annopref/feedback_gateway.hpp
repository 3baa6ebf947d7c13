#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <spdlog/spdlog.h>
#include <string>
#include <thread>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/pref_data/query_selection.hpp"
#include "annopref/pref_data/record.hpp"
#include "annopref/pref_data/store.hpp"

namespace annopref::gateway {

inline constexpr int kApiSchemaVersion = 1;

using TimePoint = std::chrono::system_clock::time_point;
using Clock = std::function<TimePoint()>;

inline Clock system_clock() {
  return [] { return std::chrono::system_clock::now(); };
}

inline std::string iso8601(TimePoint t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Axis labels shown next to each state / action dimension.
struct DisplayMetadata {
  std::string env;
  std::vector<std::string> state_labels;
  std::vector<std::string> action_labels;
};

struct PendingQuery {
  std::string id;
  std::string run_id;
  std::uint64_t session = 0;
  Segment sigma0;
  Segment sigma1;
  TimePoint issued_at;
  TimePoint expires_at;
};

enum class Choice { left, right, equal, skip };

inline Choice choice_from_string(const std::string& s) {
  if (s == "left") return Choice::left;
  if (s == "right") return Choice::right;
  if (s == "equal") return Choice::equal;
  if (s == "skip") return Choice::skip;
  throw InvalidInput("choice: must be one of left, right, equal, skip");
}

inline std::string to_string(Choice c) {
  switch (c) {
    case Choice::left: return "left";
    case Choice::right: return "right";
    case Choice::equal: return "equal";
    case Choice::skip: return "skip";
  }
  return "?";
}

struct LabelSubmission {
  std::string query_id;
  Choice choice = Choice::skip;
  Annotation e0;
  Annotation e1;
  std::string annotator_id;
};

enum class QueryState { pending, answered, skipped, expired, cancelled };

inline std::string to_string(QueryState s) {
  switch (s) {
    case QueryState::pending: return "pending";
    case QueryState::answered: return "answered";
    case QueryState::skipped: return "skipped";
    case QueryState::expired: return "expired";
    case QueryState::cancelled: return "cancelled";
  }
  return "?";
}

/// Resolution of one issued query, handed back to the training loop.
/// `record` is set for answered queries; it is already in the run's store.
struct QueryOutcome {
  std::string query_id;
  std::size_t batch_index = 0;
  QueryState state = QueryState::pending;
  std::optional<PreferenceRecord> record;
};

struct RunStatus {
  std::string run_id;
  std::uint64_t env_steps = 0;
  std::uint64_t total_steps = 0;
  std::uint64_t feedback_spent = 0;
  std::uint64_t budget = 0;
  std::optional<double> latest_eval;
  std::string phase = "registered";
  std::uint64_t session = 0;
  std::size_t pending = 0;
};

inline nlohmann::json to_json(const RunStatus& s) {
  return {{"schema_version", kApiSchemaVersion},
          {"run_id", s.run_id},
          {"env_steps", s.env_steps},
          {"total_steps", s.total_steps},
          {"feedback_spent", s.feedback_spent},
          {"budget", s.budget},
          {"latest_eval", s.latest_eval ? nlohmann::json(*s.latest_eval) : nlohmann::json(nullptr)},
          {"phase", s.phase},
          {"session", s.session},
          {"pending", s.pending}};
}

struct SubmitAck {
  std::string query_id;
  bool record_appended = false;
  std::size_t dataset_size = 0;
};

struct GatewayOptions {
  std::chrono::seconds query_expiry{30 * 60};
};

/// Query broker between a training run and a human annotator. Submissions
/// are turned into PreferenceRecords and appended to the run's store; that
/// append is the only write the gateway performs.
class FeedbackGateway {
 public:
  explicit FeedbackGateway(GatewayOptions options = {}, Clock clock = system_clock())
      : options_(options), clock_(std::move(clock)) {}

  FeedbackGateway(const FeedbackGateway&) = delete;
  FeedbackGateway& operator=(const FeedbackGateway&) = delete;

  void register_run(const std::string& run_id, PreferenceStore* store, DisplayMetadata display = {},
                    std::uint64_t budget = 0, std::uint64_t total_steps = 0) {
    std::lock_guard lock(mutex_);
    if (runs_.count(run_id)) throw Conflict("run '" + run_id + "' is already registered");
    auto& r = runs_[run_id];
    r.store = store;
    r.display = std::move(display);
    r.status.run_id = run_id;
    r.status.budget = budget;
    r.status.total_steps = total_steps;
  }

  bool has_run(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    return runs_.count(run_id) > 0;
  }

  /// Publishes a batch of segment pairs for labelling; returns query ids in
  /// batch order.
  std::vector<std::string> issue_queries(const std::string& run_id, std::uint64_t session,
                                         std::span<const SegmentPair> pairs) {
    std::lock_guard lock(mutex_);
    auto& r = run(run_id);
    std::vector<std::string> ids;
    const auto now = clock_();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      pairs[i].sigma0.validate(std::max<std::size_t>(pairs[i].sigma0.length(), 1));
      pairs[i].sigma1.validate(std::max<std::size_t>(pairs[i].sigma1.length(), 1));
      Entry e;
      e.query.id = run_id + "-q" + std::to_string(++r.next_query);
      e.query.run_id = run_id;
      e.query.session = session;
      e.query.sigma0 = pairs[i].sigma0;
      e.query.sigma1 = pairs[i].sigma1;
      e.query.issued_at = now;
      e.query.expires_at = now + options_.query_expiry;
      e.batch_index = i;
      ids.push_back(e.query.id);
      query_owner_[e.query.id] = run_id;
      r.order.push_back(e.query.id);
      r.entries.emplace(e.query.id, std::move(e));
    }
    r.status.session = session;
    r.status.pending = count_pending(r);
    return ids;
  }

  /// Unexpired, unanswered queries in issue order.
  std::vector<PendingQuery> get_pending(const std::string& run_id) {
    std::lock_guard lock(mutex_);
    auto& r = run(run_id);
    expire_due(r);
    std::vector<PendingQuery> out;
    for (const auto& id : r.order) {
      const auto& e = r.entries.at(id);
      if (e.state == QueryState::pending) out.push_back(e.query);
    }
    return out;
  }

  DisplayMetadata display(const std::string& run_id) {
    std::lock_guard lock(mutex_);
    return run(run_id).display;
  }

  SubmitAck submit(const LabelSubmission& s) {
    std::unique_lock lock(mutex_);
    const auto owner = query_owner_.find(s.query_id);
    if (owner == query_owner_.end()) throw NotFound("query '" + s.query_id + "' does not exist");
    auto& r = run(owner->second);
    expire_due(r);
    auto& e = r.entries.at(s.query_id);
    if (e.state != QueryState::pending) {
      throw Conflict("query '" + s.query_id + "' is no longer pending (" + to_string(e.state) + ")");
    }
    const auto problems = violations(s, e.query);
    if (!problems.empty()) {
      std::string msg = "rejected label:";
      for (const auto& p : problems) msg += " [" + p + "]";
      throw InvalidInput(msg);
    }
    SubmitAck ack{s.query_id, false, 0};
    QueryOutcome out{s.query_id, e.batch_index, QueryState::skipped, std::nullopt};
    if (s.choice != Choice::skip) {
      PreferenceRecord rec;
      rec.sigma0 = e.query.sigma0;
      rec.sigma1 = e.query.sigma1;
      rec.y = s.choice == Choice::left    ? Preference::first()
              : s.choice == Choice::right ? Preference::second()
                                          : Preference::equal();
      rec.e0 = s.e0;
      rec.e1 = s.e1;
      rec.source = Source::human;
      rec.created_at = iso8601(clock_());
      if (r.store != nullptr) {
        r.store->append(rec);
        ack.dataset_size = r.store->size();
      }
      ack.record_appended = true;
      r.status.feedback_spent += 1;
      out.state = QueryState::answered;
      out.record = std::move(rec);
    }
    e.state = out.state;
    e.annotator_id = s.annotator_id;
    r.outcomes.push_back(std::move(out));
    r.status.pending = count_pending(r);
    lock.unlock();
    cv_.notify_all();
    return ack;
  }

  RunStatus status(const std::string& run_id) {
    std::lock_guard lock(mutex_);
    auto& r = run(run_id);
    expire_due(r);
    r.status.pending = count_pending(r);
    return r.status;
  }

  /// Training-loop side: merges progress fields into the run summary.
  void update_status(const std::string& run_id, const std::function<void(RunStatus&)>& fn) {
    std::lock_guard lock(mutex_);
    auto& r = run(run_id);
    const auto before = r.status;
    fn(r.status);
    r.status.run_id = before.run_id;
    r.status.env_steps = std::max(r.status.env_steps, before.env_steps);
    r.status.feedback_spent = std::max(r.status.feedback_spent, before.feedback_spent);
  }

  void set_plotdata(const std::string& run_id, nlohmann::json plotdata) {
    std::lock_guard lock(mutex_);
    run(run_id).plotdata = std::move(plotdata);
  }

  nlohmann::json plotdata(const std::string& run_id) {
    std::lock_guard lock(mutex_);
    return run(run_id).plotdata;
  }

  /// Blocks until some query of the run resolves or `deadline` (on the
  /// gateway clock) passes. Expiries are delivered as outcomes too.
  std::optional<QueryOutcome> wait_outcome(const std::string& run_id, TimePoint deadline,
                                           std::chrono::milliseconds poll = std::chrono::milliseconds(50)) {
    std::unique_lock lock(mutex_);
    while (true) {
      auto& r = run(run_id);
      expire_due(r);
      if (!r.outcomes.empty()) {
        auto out = std::move(r.outcomes.front());
        r.outcomes.pop_front();
        return out;
      }
      if (clock_() >= deadline) return std::nullopt;
      cv_.wait_for(lock, poll);
    }
  }

  /// Withdraws every still-pending query of the run (session deferred).
  std::size_t cancel_pending(const std::string& run_id) {
    std::lock_guard lock(mutex_);
    auto& r = run(run_id);
    std::size_t n = 0;
    for (auto& [id, e] : r.entries) {
      if (e.state == QueryState::pending) {
        e.state = QueryState::cancelled;
        ++n;
      }
    }
    r.outcomes.clear();
    r.status.pending = 0;
    return n;
  }

  QueryState query_state(const std::string& query_id) {
    std::lock_guard lock(mutex_);
    const auto owner = query_owner_.find(query_id);
    if (owner == query_owner_.end()) throw NotFound("query '" + query_id + "' does not exist");
    auto& r = run(owner->second);
    expire_due(r);
    return r.entries.at(query_id).state;
  }

  TimePoint now() const { return clock_(); }

 private:
  struct Entry {
    PendingQuery query;
    std::size_t batch_index = 0;
    QueryState state = QueryState::pending;
    std::string annotator_id;
  };

  struct RunEntry {
    PreferenceStore* store = nullptr;
    DisplayMetadata display;
    RunStatus status;
    std::map<std::string, Entry> entries;
    std::vector<std::string> order;
    std::deque<QueryOutcome> outcomes;
    std::uint64_t next_query = 0;
    nlohmann::json plotdata;
  };

  RunEntry& run(const std::string& run_id) {
    const auto it = runs_.find(run_id);
    if (it == runs_.end()) throw NotFound("run '" + run_id + "' is not registered");
    return it->second;
  }

  void expire_due(RunEntry& r) {
    const auto now = clock_();
    bool any = false;
    for (const auto& id : r.order) {
      auto& e = r.entries.at(id);
      if (e.state == QueryState::pending && now >= e.query.expires_at) {
        e.state = QueryState::expired;
        r.outcomes.push_back({id, e.batch_index, QueryState::expired, std::nullopt});
        any = true;
      }
    }
    if (any) cv_.notify_all();
  }

  static std::size_t count_pending(const RunEntry& r) {
    std::size_t n = 0;
    for (const auto& [id, e] : r.entries) n += e.state == QueryState::pending;
    return n;
  }

  static std::vector<std::string> violations(const LabelSubmission& s, const PendingQuery& q) {
    std::vector<std::string> out;
    if (s.choice == Choice::skip) {
      if (!s.e0.empty()) out.emplace_back("e0: skip must carry no annotations");
      if (!s.e1.empty()) out.emplace_back("e1: skip must carry no annotations");
      return out;
    }
    auto check = [&](const Annotation& e, const Segment& seg, const char* name) {
      if (e.empty()) return;
      if (e.size() != seg.length()) {
        out.push_back(std::string(name) + ": length " + std::to_string(e.size()) + " differs from segment length " +
                      std::to_string(seg.length()));
      }
      for (auto v : e) {
        if (v > 1) {
          out.push_back(std::string(name) + ": entries must be 0 or 1");
          break;
        }
      }
    };
    check(s.e0, q.sigma0, "e0");
    check(s.e1, q.sigma1, "e1");
    if (s.e0.empty() != s.e1.empty()) out.emplace_back("e0/e1: annotate both segments or neither");
    return out;
  }

  GatewayOptions options_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::string, RunEntry> runs_;
  std::map<std::string, std::string> query_owner_;
};

// ---- wire format ----

inline nlohmann::json to_json(const PendingQuery& q, const DisplayMetadata& d) {
  auto seg = [](const Segment& s) {
    nlohmann::json j = annopref::to_json(s, /*include_true_rewards=*/false);
    j["length"] = s.length();
    return j;
  };
  return {{"query_id", q.id},
          {"run_id", q.run_id},
          {"session", q.session},
          {"issued_at", iso8601(q.issued_at)},
          {"expires_at", iso8601(q.expires_at)},
          {"sigma0", seg(q.sigma0)},
          {"sigma1", seg(q.sigma1)},
          {"display", {{"env", d.env}, {"state_labels", d.state_labels}, {"action_labels", d.action_labels}}}};
}

inline LabelSubmission submission_from_json(const std::string& query_id, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("body: expected a JSON object");
  if (j.contains("schema_version") && j.at("schema_version") != kApiSchemaVersion) {
    throw InvalidInput("schema_version: unsupported");
  }
  LabelSubmission s;
  s.query_id = query_id;
  if (!j.contains("choice") || !j.at("choice").is_string()) throw InvalidInput("choice: required string");
  s.choice = choice_from_string(j.at("choice").get<std::string>());
  auto vec = [&](const char* key) {
    Annotation a;
    if (!j.contains(key) || j.at(key).is_null()) return a;
    if (!j.at(key).is_array()) throw InvalidInput(std::string(key) + ": expected an array of 0/1");
    for (const auto& v : j.at(key)) {
      if (!v.is_number_integer() && !v.is_boolean()) throw InvalidInput(std::string(key) + ": entries must be 0 or 1");
      const int x = v.is_boolean() ? static_cast<int>(v.get<bool>()) : v.get<int>();
      if (x != 0 && x != 1) throw InvalidInput(std::string(key) + ": entries must be 0 or 1");
      a.push_back(static_cast<std::uint8_t>(x));
    }
    return a;
  };
  s.e0 = vec("e0");
  s.e1 = vec("e1");
  s.annotator_id = j.value("annotator_id", std::string());
  return s;
}

}  // namespace annopref::gateway
