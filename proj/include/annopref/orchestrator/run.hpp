#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <spdlog/spdlog.h>
#include <string>
#include <vector>

#include "annopref/agent.hpp"
#include "annopref/core/error.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/core/sha256.hpp"
#include "annopref/diffnet/serialize.hpp"
#include "annopref/envs.hpp"
#include "annopref/evalkit.hpp"
#include "annopref/orchestrator/config.hpp"
#include "annopref/orchestrator/labeler.hpp"
#include "annopref/pref_data/query_selection.hpp"
#include "annopref/pref_data/sampling.hpp"
#include "annopref/pref_data/store.hpp"
#include "annopref/reward_model.hpp"

namespace annopref::orchestrator {

namespace fs = std::filesystem;

// ---- reward training per session ----

struct RewardEpochsResult {
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::vector<double> accuracy;  // per member, after the last epoch
  double mean_loss = 0.0;        // mean total loss over the last epoch
  bool target_reached = false;
  bool cap_reached = false;
  bool skipped = false;  // empty dataset
};

/// Epochs of ceil(N / batch) ensemble steps each, until every member's
/// training preference accuracy reaches `target_accuracy` or `max_epochs`
/// have run.
inline RewardEpochsResult reward_epochs(reward::RewardEnsemble& ensemble, std::span<const PreferenceRecord> records,
                                        const reward::RewardTrainConfig& cfg, double target_accuracy,
                                        std::size_t max_epochs, Rng& rng) {
  RewardEpochsResult out;
  if (records.empty()) {
    spdlog::warn("reward_epochs: preference store is empty; nothing to train");
    out.skipped = true;
    return out;
  }
  const std::size_t per_epoch = (records.size() + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 0; epoch < max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t s = 0; s < per_epoch; ++s) {
      for (const auto& l : reward::train_step(ensemble, records, cfg, rng)) {
        if (std::isfinite(l.total)) {
          loss_sum += l.total;
          ++loss_n;
        }
      }
      ++out.steps;
    }
    ++out.epochs;
    out.mean_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : std::nan("");
    out.accuracy.clear();
    bool all = true;
    for (const auto& m : ensemble.members) {
      out.accuracy.push_back(reward::preference_accuracy(m.params, records));
      all = all && out.accuracy.back() >= target_accuracy;
    }
    if (all) {
      out.target_reached = true;
      return out;
    }
  }
  out.cap_reached = true;
  return out;
}

// ---- run ----

using EnvFactory = std::function<std::unique_ptr<envs::Environment>(const RunConfig&)>;

inline EnvFactory default_env_factory() {
  return [](const RunConfig& c) { return envs::make(c.env, c.episode_len); };
}

struct RunOptions {
  EnvFactory env_factory = default_env_factory();
  Labeler* labeler = nullptr;  // null: simulated teacher from the config
  std::function<void(const nlohmann::json&)> on_event;
  bool checkpoints = true;
};

struct RunResult {
  bool finished = false;
  std::uint64_t step = 0;
  std::uint64_t feedback_spent = 0;
  evalkit::MeasurementSeries series;
};

/// Raised when a checkpoint fails its integrity check; nothing on disk has
/// been modified at that point.
class CheckpointMismatch : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path events() const { return root / "events.jsonl"; }
  fs::path dataset() const { return root / "dataset.jsonl"; }
  fs::path measurements() const { return root / "measurements.json"; }
  fs::path report() const { return root / "report.json"; }
  fs::path summary() const { return root / "summary.json"; }
  fs::path checkpoint() const { return root / "checkpoint"; }
  fs::path final_dir() const { return root / "final"; }
};

namespace detail {

enum SeedTag : std::uint64_t {
  kEnvTag = 1,
  kEvalTag = 2,
  kAgentTag = 3,
  kSacTag = 4,
  kTeacherTag = 5,
  kSelectionTag = 6,
  kRewardTag = 7,
  kRewardInitTag = 8,
};

inline std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

inline void truncate_lines(const fs::path& p, std::size_t keep) {
  std::vector<std::string> lines;
  {
    std::ifstream in(p);
    for (std::string line; lines.size() < keep && std::getline(in, line);) {
      if (!line.empty()) lines.push_back(line);
    }
  }
  std::ofstream out(p, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return nlohmann::json::parse(in);
}

inline void save_episodes(const fs::path& path, const std::vector<Episode>& eps, std::size_t sdim, std::size_t adim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  auto f64 = [&](const double* p, std::size_t n) { out.write(reinterpret_cast<const char*>(p), n * sizeof(double)); };
  u64(eps.size());
  u64(sdim);
  u64(adim);
  for (const auto& e : eps) {
    u64(e.id);
    u64(e.length());
    f64(e.states.data(), static_cast<std::size_t>(e.states.size()));
    f64(e.actions.data(), static_cast<std::size_t>(e.actions.size()));
    f64(e.true_rewards.data(), e.true_rewards.size());
  }
  if (!out) throw std::runtime_error("episode write failed");
}

inline std::vector<Episode> load_episodes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  auto u64 = [&] {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  };
  auto f64 = [&](double* p, std::size_t n) { in.read(reinterpret_cast<char*>(p), n * sizeof(double)); };
  std::vector<Episode> eps;
  const auto n = u64();
  const auto sdim = static_cast<Eigen::Index>(u64());
  const auto adim = static_cast<Eigen::Index>(u64());
  for (std::uint64_t i = 0; i < n; ++i) {
    Episode e;
    e.id = u64();
    const auto len = static_cast<Eigen::Index>(u64());
    e.states.resize(len, sdim);
    e.actions.resize(len, adim);
    e.true_rewards.resize(static_cast<std::size_t>(len));
    f64(e.states.data(), static_cast<std::size_t>(e.states.size()));
    f64(e.actions.data(), static_cast<std::size_t>(e.actions.size()));
    f64(e.true_rewards.data(), e.true_rewards.size());
    eps.push_back(std::move(e));
  }
  if (!in) throw InvalidInput("truncated episode file " + path.string());
  return eps;
}

inline nlohmann::json hash_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json out = nlohmann::json::object();
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = sha256_file(f);
  return out;
}

}  // namespace detail

/// Reads and checks a checkpoint manifest against the files beside it.
inline void verify_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw CheckpointMismatch("checkpoint: missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = detail::read_json(manifest_path);
  } catch (const std::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "annopref.checkpoint" || !manifest.contains("files")) {
    throw CheckpointMismatch("checkpoint: malformed manifest");
  }
  const auto actual = detail::hash_tree(dir);
  const auto& expected = manifest.at("files");
  for (const auto& [name, hash] : expected.items()) {
    if (!actual.contains(name)) throw CheckpointMismatch("checkpoint: missing file " + name);
    if (actual.at(name) != hash) throw CheckpointMismatch("checkpoint: hash mismatch for " + name);
  }
  for (const auto& [name, hash] : actual.items()) {
    if (!expected.contains(name)) throw CheckpointMismatch("checkpoint: unlisted file " + name);
  }
}

/// One training run: experience collection, feedback sessions, reward
/// learning, relabelling and policy learning, with periodic evaluation.
class TrainingRun {
 public:
  TrainingRun(RunConfig cfg, RunOptions opts = {}) : cfg_(std::move(cfg)), opts_(std::move(opts)) {
    cfg_.validate();
    paths_.root = cfg_.output_dir;
    if (fs::exists(paths_.events()) && detail::count_lines(paths_.events()) > 0) {
      throw Conflict("output directory " + paths_.root.string() + " already holds a run; use resume");
    }
    fs::create_directories(paths_.root);
    detail::write_text(paths_.config(), to_json(cfg_).dump(2) + "\n");
    fs::remove(paths_.dataset());
    fs::remove(paths_.events());
    setup();
    reset_env();
    emit({{"event", "run_start"},
          {"step", 0},
          {"env", cfg_.env},
          {"condition", cfg_.condition_tag()},
          {"labeler", labeler_->name()},
          {"env_seed", *cfg_.env_seed},
          {"agent_seed", *cfg_.agent_seed},
          {"total_steps", sched_.total_steps},
          {"session_interval", sched_.session_interval},
          {"budget", sched_.budget},
          {"per_session", sched_.per_session},
          {"eval_interval", sched_.eval_interval}});
    if (opts_.checkpoints) checkpoint();
  }

  /// Continues a run from its checkpoint directory. The manifest is checked
  /// before anything is modified.
  static std::unique_ptr<TrainingRun> resume(const fs::path& checkpoint_dir, RunOptions opts = {}) {
    verify_checkpoint(checkpoint_dir);
    auto cfg = config_from_json(detail::read_json(checkpoint_dir / "config.json"));
    const auto state = detail::read_json(checkpoint_dir / "state.json");
    RunPaths paths{fs::absolute(checkpoint_dir).parent_path()};
    const auto events_needed = state.at("events_count").get<std::size_t>();
    const auto records_needed = state.at("store_count").get<std::size_t>();
    if (detail::count_lines(paths.events()) < events_needed) {
      throw CheckpointMismatch("checkpoint: event log is shorter than the checkpoint records");
    }
    if (detail::count_lines(paths.dataset()) < records_needed) {
      throw CheckpointMismatch("checkpoint: dataset is shorter than the checkpoint records");
    }
    cfg.output_dir = paths.root.string();
    return std::unique_ptr<TrainingRun>(new TrainingRun(std::move(cfg), std::move(opts), checkpoint_dir, state));
  }

  RunResult run() { return run_until(std::nullopt); }

  /// Advances until `stop_step` env steps (or the end). Returns early without
  /// finalizing when stopped; the latest checkpoint stays resumable.
  RunResult run_until(std::optional<std::uint64_t> stop_step) {
    while (step_ < sched_.total_steps) {
      if (stop_step && step_ >= *stop_step) return result(false);
      env_step();
      ++step_;
      if (step_ % sched_.eval_interval == 0 || step_ == sched_.total_steps) evaluate();
      if (step_ % sched_.session_interval == 0 && step_ < sched_.total_steps && spent_ < sched_.budget) session();
      if (opts_.checkpoints && step_ < sched_.total_steps && step_ % sched_.checkpoint_interval == 0) checkpoint();
    }
    if (!finished_) finish();
    return result(true);
  }

  const RunConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return sched_; }
  const RunPaths& paths() const { return paths_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t feedback_spent() const { return spent_; }
  const PreferenceStore& store() const { return *store_; }
  PreferenceStore& mutable_store() { return *store_; }
  const reward::RewardEnsemble& ensemble() const { return ensemble_; }
  const agent::ReplayBuffer& buffer() const { return *buffer_; }
  const std::vector<evalkit::Measurement>& measurements() const { return measurements_; }
  const std::vector<RewardEpochsResult>& reward_history() const { return reward_history_; }

  evalkit::MeasurementSeries series() const {
    evalkit::MeasurementSeries s;
    s.run_id = cfg_.env + "/" + cfg_.condition_tag() + "/" + std::to_string(*cfg_.env_seed);
    s.env = cfg_.env;
    s.condition = cfg_.condition_tag();
    s.seed = *cfg_.env_seed;
    s.points = measurements_;
    return s;
  }

 private:
  TrainingRun(RunConfig cfg, RunOptions opts, const fs::path& checkpoint_dir, const nlohmann::json& state)
      : cfg_(std::move(cfg)), opts_(std::move(opts)) {
    cfg_.validate();
    paths_.root = cfg_.output_dir;
    detail::truncate_lines(paths_.events(), state.at("events_count").get<std::size_t>());
    setup();
    store_->truncate(state.at("store_count").get<std::size_t>());
    events_count_ = state.at("events_count").get<std::size_t>();
    step_ = state.at("step").get<std::uint64_t>();
    spent_ = state.at("feedback_spent").get<std::uint64_t>();
    carried_ = state.at("carried").get<std::uint64_t>();
    session_index_ = state.at("session_index").get<std::uint64_t>();
    episode_index_ = state.at("episode_index").get<std::uint64_t>();
    const auto& rng = state.at("rng");
    agent_rng_.load(rng.at("agent").get<std::string>());
    teacher_rng_.load(rng.at("teacher").get<std::string>());
    selection_rng_.load(rng.at("selection").get<std::string>());
    reward_rng_.load(rng.at("reward").get<std::string>());
    const auto& env = state.at("env");
    env_->restore({env.at("state").get<std::vector<double>>(), env.at("step").get<std::size_t>(),
                   env.at("done").get<bool>()});
    const auto& cur = state.at("current_episode");
    cur_id_ = cur.at("id").get<std::uint64_t>();
    cur_states_ = cur.at("states").get<std::vector<double>>();
    cur_actions_ = cur.at("actions").get<std::vector<double>>();
    cur_rewards_ = cur.at("rewards").get<std::vector<double>>();
    for (const auto& m : state.at("measurements")) {
      measurements_.push_back({m.at(0).get<std::uint64_t>(), m.at(1).get<double>()});
    }
    episodes_ = detail::load_episodes(checkpoint_dir / "episodes.bin");
    episode_steps_ = 0;
    for (const auto& e : episodes_) episode_steps_ += e.length();
    *buffer_ = agent::ReplayBuffer::load(checkpoint_dir / "buffer.bin");
    ensemble_ = reward::load_ensemble(checkpoint_dir / "ensemble");
    if (sac_) sac_->load(checkpoint_dir / "agent");
    spdlog::info("resumed {} at step {}", paths_.root.string(), step_);
  }

  void setup() {
    sched_ = cfg_.schedule_effective();
    env_ = opts_.env_factory(cfg_);
    eval_env_ = opts_.env_factory(cfg_);
    const auto& spec = env_->spec();
    const std::uint64_t es = *cfg_.env_seed;
    const std::uint64_t as = *cfg_.agent_seed;
    env_seed_base_ = derive_seed(es, detail::kEnvTag);
    eval_seed_base_ = derive_seed(es, detail::kEvalTag);
    agent_rng_ = Rng(derive_seed(as, detail::kAgentTag));
    teacher_rng_ = Rng(derive_seed(es, detail::kTeacherTag));
    selection_rng_ = Rng(derive_seed(as, detail::kSelectionTag));
    reward_rng_ = Rng(derive_seed(as, detail::kRewardTag));
    if (cfg_.agent.algorithm == "sac") {
      sac_ = std::make_unique<agent::Sac>(spec, cfg_.agent.sac, derive_seed(as, detail::kSacTag));
    }
    buffer_ = std::make_unique<agent::ReplayBuffer>(cfg_.agent.buffer_capacity, spec.state_dim, spec.action_dim);
    diffnet::MlpSpec rspec{spec.state_dim + spec.action_dim, cfg_.reward.hidden_layers, cfg_.reward.activation, 1,
                           cfg_.reward.output_activation};
    ensemble_ = reward::RewardEnsemble::create(rspec, cfg_.reward.ensemble_size, derive_seed(as, detail::kRewardInitTag),
                                               cfg_.reward.optimizer);
    store_ = std::make_unique<PreferenceStore>(paths_.dataset(), std::max(cfg_.schedule.segment_len, kDefaultMaxSegmentLen));
    if (opts_.labeler != nullptr) {
      labeler_ = opts_.labeler;
    } else {
      if (cfg_.feedback.source == "gateway") {
        throw ConfigError("feedback.source=gateway needs a gateway labeler supplied by the caller");
      }
      std::optional<diffnet::MlpParams> reference;
      if (cfg_.feedback.reference_network) reference = diffnet::load_snapshot(*cfg_.feedback.reference_network);
      owned_labeler_ = std::make_unique<TeacherLabeler>(cfg_.feedback.teacher, std::move(reference));
      labeler_ = owned_labeler_.get();
    }
  }

  void reset_env() {
    cur_id_ = episode_index_;
    env_->reset(derive_seed(env_seed_base_, episode_index_));
    cur_states_.clear();
    cur_actions_.clear();
    cur_rewards_.clear();
  }

  std::vector<double> random_action(Rng& rng) const {
    const auto& b = env_->spec().action_bounds;
    std::vector<double> a(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) a[i] = rng.uniform(b[i].lo, b[i].hi);
    return a;
  }

  void env_step() {
    const std::vector<double> s = env_->state();
    const bool learned = sac_ && step_ >= cfg_.agent.warmup_steps;
    const auto a = learned ? sac_->act(s, agent::ActMode::stochastic, agent_rng_) : random_action(agent_rng_);
    const auto tr = env_->step(a);
    buffer_->add(tr, reward::predict_reward(ensemble_, tr.state, tr.action));
    cur_states_.insert(cur_states_.end(), tr.state.begin(), tr.state.end());
    cur_actions_.insert(cur_actions_.end(), tr.action.begin(), tr.action.end());
    cur_rewards_.push_back(tr.true_reward);
    if (tr.done) {
      close_episode();
      ++episode_index_;
      reset_env();
    }
    if (sac_ && step_ + 1 >= cfg_.agent.warmup_steps && buffer_->size() >= cfg_.agent.sac.batch_size) {
      for (std::size_t u = 0; u < cfg_.agent.updates_per_step; ++u) {
        const auto d = sac_->update(*buffer_, cfg_.agent.sac.batch_size, agent_rng_);
        if (d.skipped) {
          emit({{"event", "agent_update_skipped"}, {"step", step_ + 1}, {"update", sac_->updates()}});
        }
      }
    }
  }

  void close_episode() {
    const auto& spec = env_->spec();
    Episode e;
    e.id = cur_id_;
    const auto len = static_cast<Eigen::Index>(cur_rewards_.size());
    e.states = Eigen::Map<const RowMatrix>(cur_states_.data(), len, static_cast<Eigen::Index>(spec.state_dim));
    e.actions = Eigen::Map<const RowMatrix>(cur_actions_.data(), len, static_cast<Eigen::Index>(spec.action_dim));
    e.true_rewards = cur_rewards_;
    episode_steps_ += e.length();
    episodes_.push_back(std::move(e));
    // Segment candidates come from the same window of experience the replay buffer holds.
    while (episodes_.size() > 1 && episode_steps_ > cfg_.agent.buffer_capacity) {
      episode_steps_ -= episodes_.front().length();
      episodes_.erase(episodes_.begin());
    }
  }

  void evaluate() {
    const std::size_t n = cfg_.schedule.eval_episodes;
    const std::uint64_t index = measurements_.size();
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::uint64_t seed = derive_seed(eval_seed_base_, index * n + k);
      std::vector<double> s = eval_env_->reset(seed);
      Rng act_rng(derive_seed(seed, 1));
      Rng unused(0);
      while (!eval_env_->done()) {
        const auto a = sac_ ? sac_->act(s, agent::ActMode::deterministic, unused) : random_action(act_rng);
        const auto tr = eval_env_->step(a);
        total += tr.true_reward;
        s = tr.next_state;
      }
    }
    const double mean = total / static_cast<double>(n);
    measurements_.push_back({step_, mean});
    emit({{"event", "eval"}, {"step", step_}, {"episodes", n}, {"mean_return", mean}});
  }

  void session() {
    ++session_index_;
    const std::uint64_t quota = std::min(sched_.per_session + carried_, sched_.budget - spent_);
    emit({{"event", "session_start"},
          {"step", step_},
          {"session", session_index_},
          {"quota", quota},
          {"carried", carried_},
          {"feedback_spent", spent_}});
    std::uint64_t consumed = 0;
    std::uint64_t skipped = 0;
    bool deferred = false;
    std::string note;
    if (episodes_.empty()) {
      note = "no_complete_episode";
    } else {
      const std::size_t n_pairs = static_cast<std::size_t>(quota) * cfg_.schedule.candidate_multiplier;
      auto segs = extract_segments(episodes_, 2 * n_pairs,
                                   cfg_.schedule.segment_len, selection_rng_);
      std::vector<SegmentPair> pairs(n_pairs);
      for (std::size_t i = 0; i < n_pairs; ++i) pairs[i] = {std::move(segs[2 * i]), std::move(segs[2 * i + 1])};
      const auto ranking = select_queries(pairs, ensemble_, n_pairs, selection_rng_).pairs;
      const std::size_t allowance = static_cast<std::size_t>(quota) * (1 + cfg_.schedule.resample_factor);
      std::size_t cursor = 0;
      while (consumed < quota && cursor < ranking.size() && cursor < allowance && !deferred) {
        const std::size_t n = std::min({static_cast<std::size_t>(quota - consumed), allowance - cursor,
                                        ranking.size() - cursor});
        std::vector<SegmentPair> batch;
        for (std::size_t i = 0; i < n; ++i) batch.push_back(pairs[ranking[cursor + i].candidate_index]);
        auto labels = labeler_->label(batch, session_index_, teacher_rng_);
        for (std::size_t i = 0; i < n; ++i) {
          const auto& ranked = ranking[cursor + i];
          auto& o = labels.outcomes.at(i);
          if (o.record) {
            if (!o.stored) store_->append(*o.record);
            ++consumed;
            ++spent_;
            emit({{"event", "query"},
                  {"step", step_},
                  {"session", session_index_},
                  {"rank", cursor + i},
                  {"candidate", ranked.candidate_index},
                  {"disagreement", ranked.score},
                  {"y", {o.record->y.y0, o.record->y.y1}},
                  {"annotated", o.record->annotated()},
                  {"source", to_string(o.record->source)},
                  {"feedback_spent", spent_}});
          } else {
            ++skipped;
            emit({{"event", "skip"},
                  {"step", step_},
                  {"session", session_index_},
                  {"rank", cursor + i},
                  {"candidate", ranked.candidate_index},
                  {"reason", o.reason}});
          }
        }
        cursor += n;
        deferred = labels.deferred;
      }
      if (deferred) note = "deferred";
    }
    carried_ = quota - consumed;
    nlohmann::json end{{"event", "session_end"},
                       {"step", step_},
                       {"session", session_index_},
                       {"consumed", consumed},
                       {"skipped", skipped},
                       {"carried", carried_},
                       {"feedback_spent", spent_}};
    if (!note.empty()) end["note"] = note;
    if (consumed > 0) {
      const auto records = store_->snapshot();
      auto diag = reward_epochs(ensemble_, records, cfg_.reward.train, cfg_.reward.target_accuracy,
                                cfg_.reward.max_epochs, reward_rng_);
      buffer_->relabel(ensemble_);
      end["reward_epochs"] = diag.epochs;
      end["reward_steps"] = diag.steps;
      end["reward_accuracy"] = diag.accuracy;
      end["reward_loss"] = diag.mean_loss;
      end["reward_cap_reached"] = diag.cap_reached;
      end["dataset_size"] = records.size();
      reward_history_.push_back(std::move(diag));
    }
    emit(end);
  }

  void emit(nlohmann::json ev) {
    std::ofstream out(paths_.events(), std::ios::app);
    out << ev.dump() << '\n';
    if (!out) throw std::runtime_error("event log write failed");
    ++events_count_;
    if (opts_.on_event) opts_.on_event(ev);
  }

  nlohmann::json state_json() const {
    nlohmann::json m = nlohmann::json::array();
    for (const auto& p : measurements_) m.push_back({p.env_step, p.raw_return});
    const auto snap = env_->snapshot();
    return {{"format", "annopref.run_state"},
            {"version", 1},
            {"step", step_},
            {"feedback_spent", spent_},
            {"carried", carried_},
            {"session_index", session_index_},
            {"episode_index", episode_index_},
            {"rng",
             {{"agent", agent_rng_.save()},
              {"teacher", teacher_rng_.save()},
              {"selection", selection_rng_.save()},
              {"reward", reward_rng_.save()}}},
            {"env", {{"state", snap.state}, {"step", snap.step}, {"done", snap.done}}},
            {"current_episode",
             {{"id", cur_id_}, {"states", cur_states_}, {"actions", cur_actions_}, {"rewards", cur_rewards_}}},
            {"measurements", m},
            {"store_count", store_->size()},
            {"events_count", events_count_}};
  }

  void checkpoint() {
    const auto dir = paths_.checkpoint();
    const auto tmp = paths_.root / "checkpoint.tmp";
    const auto old = paths_.root / "checkpoint.old";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    detail::write_text(tmp / "config.json", to_json(cfg_).dump(2) + "\n");
    detail::write_text(tmp / "state.json", state_json().dump() + "\n");
    detail::save_episodes(tmp / "episodes.bin", episodes_, env_->spec().state_dim, env_->spec().action_dim);
    buffer_->save(tmp / "buffer.bin");
    reward::save_ensemble(tmp / "ensemble", ensemble_, cfg_.reward.train.weights);
    if (sac_) sac_->save(tmp / "agent");
    const nlohmann::json manifest{
        {"format", "annopref.checkpoint"}, {"version", 1}, {"step", step_}, {"files", detail::hash_tree(tmp)}};
    detail::write_text(tmp / "manifest.json", manifest.dump(2) + "\n");
    fs::remove_all(old);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
  }

  void finish() {
    const auto series = this->series();
    detail::write_text(paths_.measurements(), evalkit::to_json(series).dump(2) + "\n");
    evalkit::AggregateOptions agg;
    const std::vector<evalkit::MeasurementSeries> one{series};
    evalkit::emit_report(evalkit::aggregate(one, agg), evalkit::ReportFormat::json, paths_.report());
    reward::save_ensemble(paths_.final_dir() / "ensemble", ensemble_, cfg_.reward.train.weights);
    if (sac_) sac_->save(paths_.final_dir() / "agent");
    emit({{"event", "run_end"},
          {"step", step_},
          {"feedback_spent", spent_},
          {"dataset_size", store_->size()},
          {"measurements", measurements_.size()},
          {"final_return", measurements_.empty() ? nlohmann::json(nullptr) : nlohmann::json(measurements_.back().raw_return)}});
    detail::write_text(paths_.summary(), nlohmann::json{{"finished", true},
                                                        {"run_id", series.run_id},
                                                        {"env", cfg_.env},
                                                        {"condition", cfg_.condition_tag()},
                                                        {"seed", *cfg_.env_seed},
                                                        {"steps", step_},
                                                        {"feedback_spent", spent_},
                                                        {"measurements", measurements_.size()}}
                                                .dump(2) + "\n");
    finished_ = true;
  }

  RunResult result(bool finished) const { return {finished, step_, spent_, series()}; }

  RunConfig cfg_;
  RunOptions opts_;
  RunPaths paths_;
  Schedule sched_;
  std::unique_ptr<envs::Environment> env_;
  std::unique_ptr<envs::Environment> eval_env_;
  std::unique_ptr<agent::Sac> sac_;
  std::unique_ptr<agent::ReplayBuffer> buffer_;
  reward::RewardEnsemble ensemble_;
  std::unique_ptr<PreferenceStore> store_;
  std::unique_ptr<Labeler> owned_labeler_;
  Labeler* labeler_ = nullptr;

  Rng agent_rng_;
  Rng teacher_rng_;
  Rng selection_rng_;
  Rng reward_rng_;
  std::uint64_t env_seed_base_ = 0;
  std::uint64_t eval_seed_base_ = 0;

  std::uint64_t step_ = 0;
  std::uint64_t spent_ = 0;
  std::uint64_t carried_ = 0;
  std::uint64_t session_index_ = 0;
  std::uint64_t episode_index_ = 0;
  std::size_t events_count_ = 0;
  bool finished_ = false;

  std::uint64_t cur_id_ = 0;
  std::vector<double> cur_states_;
  std::vector<double> cur_actions_;
  std::vector<double> cur_rewards_;
  std::vector<Episode> episodes_;
  std::size_t episode_steps_ = 0;

  std::vector<evalkit::Measurement> measurements_;
  std::vector<RewardEpochsResult> reward_history_;
};

}  // namespace annopref::orchestrator
