#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "annopref/agent.hpp"
#include "annopref/core/error.hpp"
#include "annopref/diffnet/adamw.hpp"
#include "annopref/diffnet/mlp.hpp"
#include "annopref/reward_model.hpp"
#include "annopref/saliency.hpp"
#include "annopref/teacher.hpp"

extern char** environ;

namespace annopref::orchestrator {

inline constexpr int kConfigSchemaVersion = 1;

/// Feedback and training schedule, stated at full scale (S=1). Every count except
/// the evaluation cadence is divided by `scale` (see `Schedule`).
struct ScheduleConfig {
  std::uint64_t scale = 10;
  std::uint64_t total_steps = 2'000'000;
  std::uint64_t session_interval = 20'000;
  std::uint64_t total_budget = 700;
  std::uint64_t per_session = 70;
  std::uint64_t eval_interval = 2'000;  // absolute, not scaled
  std::size_t eval_episodes = 5;
  std::size_t segment_len = 50;
  std::size_t candidate_multiplier = 10;
  std::size_t resample_factor = 3;
  std::uint64_t checkpoint_interval = 0;  // 0: at every feedback session step
};

/// Effective (desk-scaled) schedule.
struct Schedule {
  std::uint64_t total_steps = 0;
  std::uint64_t session_interval = 0;
  std::uint64_t budget = 0;
  std::uint64_t per_session = 0;
  std::uint64_t eval_interval = 0;
  std::uint64_t checkpoint_interval = 0;

  std::uint64_t measurement_count() const { return (total_steps + eval_interval - 1) / eval_interval; }
};

struct RewardSection {
  std::vector<std::size_t> hidden_layers{300, 300, 300};
  diffnet::Activation activation = diffnet::Activation::leaky_relu;
  diffnet::Activation output_activation = diffnet::Activation::tanh;
  std::size_t ensemble_size = 3;
  diffnet::AdamWConfig optimizer;
  reward::RewardTrainConfig train;
  double target_accuracy = 0.97;
  std::size_t max_epochs = 50;
};

struct AgentSection {
  std::string algorithm = "sac";  // "sac" or "random"
  agent::SacConfig sac;
  std::size_t buffer_capacity = 100'000;
  std::uint64_t warmup_steps = 2'000;
  std::size_t updates_per_step = 1;
};

struct GatewaySection {
  std::string host = "127.0.0.1";
  int port = 8080;
  double query_expiry_s = 1800.0;
  double session_timeout_s = 3600.0;
};

struct FeedbackSection {
  std::string source = "teacher";  // "teacher" or "gateway"
  teacher::TeacherConfig teacher;
  std::optional<std::string> reference_network;  // diffnet snapshot for the IG oracle
  GatewaySection gateway;
};

struct RunConfig {
  std::string env = "point_reach";
  std::size_t episode_len = 200;
  std::string condition;  // report tag; derived from the loss weights when empty
  FeedbackSection feedback;
  ScheduleConfig schedule;
  RewardSection reward;
  AgentSection agent;
  std::optional<std::uint64_t> env_seed;
  std::optional<std::uint64_t> agent_seed;
  std::string output_dir = "runs/default";

  std::string condition_tag() const {
    if (!condition.empty()) return condition;
    const auto& w = reward.train.weights;
    return (w.alpha1 > 0.0 || w.alpha2 > 0.0) ? "annotated" : "baseline";
  }

  Schedule schedule_effective() const {
    const auto& s = schedule;
    Schedule e;
    e.total_steps = s.total_steps / s.scale;
    e.session_interval = s.session_interval / s.scale;
    e.budget = s.total_budget / s.scale;
    e.per_session = s.per_session / s.scale;
    e.eval_interval = s.eval_interval;
    e.checkpoint_interval = s.checkpoint_interval == 0 ? e.session_interval : s.checkpoint_interval;
    return e;
  }

  void validate() const {
    const auto& s = schedule;
    if (s.scale < 1) throw ConfigError("schedule.scale must be >= 1");
    const auto e = schedule_effective();
    if (e.total_steps < 1) throw ConfigError("schedule.total_steps / scale must be >= 1");
    if (e.session_interval < 1) throw ConfigError("schedule.session_interval / scale must be >= 1");
    if (e.eval_interval < 1) throw ConfigError("schedule.eval_interval must be >= 1");
    if (e.budget > 0 && e.per_session < 1) throw ConfigError("schedule.per_session / scale must be >= 1");
    if (e.budget > 0 && e.budget < e.per_session) throw ConfigError("schedule: budget must be >= per-session count");
    if (s.eval_episodes < 1) throw ConfigError("schedule.eval_episodes must be >= 1");
    if (s.segment_len < 1) throw ConfigError("schedule.segment_len must be >= 1");
    if (s.candidate_multiplier < 1) throw ConfigError("schedule.candidate_multiplier must be >= 1");
    if (episode_len < 1) throw ConfigError("episode_len must be >= 1");
    if (reward.ensemble_size < 1) throw ConfigError("reward.ensemble_size must be >= 1");
    if (reward.hidden_layers.empty()) throw ConfigError("reward.hidden_layers must be nonempty");
    if (!(reward.target_accuracy > 0.0 && reward.target_accuracy <= 1.0)) {
      throw ConfigError("reward.target_accuracy must be in (0, 1]");
    }
    if (reward.max_epochs < 1) throw ConfigError("reward.max_epochs must be >= 1");
    if (reward.train.batch_size < 1) throw ConfigError("reward.batch_size must be >= 1");
    try {
      reward.train.weights.validate();
      reward.train.saliency.validate();
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
    if (agent.algorithm != "sac" && agent.algorithm != "random") {
      throw ConfigError("agent.algorithm must be 'sac' or 'random'");
    }
    agent.sac.validate();
    if (agent.buffer_capacity < agent.sac.batch_size) throw ConfigError("agent.buffer_capacity must be >= batch_size");
    if (agent.updates_per_step < 1) throw ConfigError("agent.updates_per_step must be >= 1");
    if (feedback.source != "teacher" && feedback.source != "gateway") {
      throw ConfigError("feedback.source must be 'teacher' or 'gateway'");
    }
    feedback.teacher.validate();
    if (feedback.teacher.annotation_mode == teacher::AnnotationMode::integrated_gradients &&
        feedback.source == "teacher" && !feedback.reference_network) {
      throw ConfigError("feedback.reference_network is required for integrated_gradients annotations");
    }
    if (!env_seed || !agent_seed) throw ConfigError("seeds.env and seeds.agent must be set explicitly");
  }
};

// ---- JSON ----

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline diffnet::Activation activation(const nlohmann::json& j, const char* key, diffnet::Activation fallback,
                                      const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return diffnet::activation_from_string(j.at(key).get<std::string>());
  } catch (const std::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& t = c.feedback.teacher;
  const auto& tr = c.reward.train;
  const auto& o = c.reward.optimizer;
  const auto& s = c.schedule;
  const auto& a = c.agent.sac;
  json teacher{{"kind", teacher::to_string(t.kind)},
               {"beta", t.beta},
               {"gamma", t.gamma_t},
               {"epsilon", t.epsilon},
               {"skip_threshold", t.skip_threshold ? json(*t.skip_threshold) : json(nullptr)},
               {"equal_threshold", t.equal_threshold},
               {"annotation_mode", teacher::to_string(t.annotation_mode)},
               {"annotation_fraction", t.annotation_fraction},
               {"ig_steps", t.ig.ig_steps},
               {"ig_baseline", saliency::to_string(t.ig.ig_baseline)}};
  return {
      {"schema_version", kConfigSchemaVersion},
      {"env", {{"name", c.env}, {"episode_len", c.episode_len}}},
      {"condition", c.condition},
      {"seeds",
       {{"env", c.env_seed ? json(*c.env_seed) : json(nullptr)},
        {"agent", c.agent_seed ? json(*c.agent_seed) : json(nullptr)}}},
      {"output_dir", c.output_dir},
      {"feedback",
       {{"source", c.feedback.source},
        {"teacher", teacher},
        {"reference_network", c.feedback.reference_network ? json(*c.feedback.reference_network) : json(nullptr)},
        {"gateway",
         {{"host", c.feedback.gateway.host},
          {"port", c.feedback.gateway.port},
          {"query_expiry_s", c.feedback.gateway.query_expiry_s},
          {"session_timeout_s", c.feedback.gateway.session_timeout_s}}}}},
      {"schedule",
       {{"scale", s.scale},
        {"total_steps", s.total_steps},
        {"session_interval", s.session_interval},
        {"total_budget", s.total_budget},
        {"per_session", s.per_session},
        {"eval_interval", s.eval_interval},
        {"eval_episodes", s.eval_episodes},
        {"segment_len", s.segment_len},
        {"candidate_multiplier", s.candidate_multiplier},
        {"resample_factor", s.resample_factor},
        {"checkpoint_interval", s.checkpoint_interval}}},
      {"reward",
       {{"hidden_layers", c.reward.hidden_layers},
        {"activation", diffnet::to_string(c.reward.activation)},
        {"output_activation", diffnet::to_string(c.reward.output_activation)},
        {"ensemble_size", c.reward.ensemble_size},
        {"learning_rate", o.learning_rate},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"weight_decay", o.weight_decay},
        {"epsilon", o.epsilon},
        {"alpha1", tr.weights.alpha1},
        {"alpha2", tr.weights.alpha2},
        {"label_smoothing", tr.weights.label_smoothing},
        {"logit_mode", tr.logit_mode == saliency::Normalization::raw ? "raw" : "standardized"},
        {"saliency_gradient", tr.saliency_gradient == reward::SaliencyGradient::exact ? "exact" : "final_layer"},
        {"batch_size", tr.batch_size},
        {"target_accuracy", c.reward.target_accuracy},
        {"max_epochs", c.reward.max_epochs},
        {"saliency",
         {{"n_smooth", tr.saliency.n_smooth},
          {"noise_scale", tr.saliency.noise_scale},
          {"ig_steps", tr.saliency.ig_steps},
          {"ig_baseline", saliency::to_string(tr.saliency.ig_baseline)}}}}},
      {"agent",
       {{"algorithm", c.agent.algorithm},
        {"hidden_layers", a.hidden_layers},
        {"gamma", a.gamma},
        {"tau", a.tau},
        {"learning_rate", a.learning_rate},
        {"batch_size", a.batch_size},
        {"init_temperature", a.init_temperature},
        {"auto_temperature", a.auto_temperature},
        {"buffer_capacity", c.agent.buffer_capacity},
        {"warmup_steps", c.agent.warmup_steps},
        {"updates_per_step", c.agent.updates_per_step}}},
  };
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::get_to;
  RunConfig c;
  check_keys(j, "config",
             {"schema_version", "env", "condition", "seeds", "output_dir", "feedback", "schedule", "reward", "agent"});
  const int version = j.value("schema_version", kConfigSchemaVersion);
  if (version != kConfigSchemaVersion) throw ConfigError("config: unsupported schema_version " + std::to_string(version));
  if (j.contains("env")) {
    const auto& e = j.at("env");
    check_keys(e, "env", {"name", "episode_len"});
    get_to(e, "name", c.env, "env");
    get_to(e, "episode_len", c.episode_len, "env");
  }
  get_to(j, "condition", c.condition, "config");
  get_to(j, "output_dir", c.output_dir, "config");
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    check_keys(s, "seeds", {"env", "agent"});
    if (s.contains("env") && !s.at("env").is_null()) c.env_seed = s.at("env").get<std::uint64_t>();
    if (s.contains("agent") && !s.at("agent").is_null()) c.agent_seed = s.at("agent").get<std::uint64_t>();
  }
  if (j.contains("feedback")) {
    const auto& f = j.at("feedback");
    check_keys(f, "feedback", {"source", "teacher", "reference_network", "gateway"});
    get_to(f, "source", c.feedback.source, "feedback");
    if (f.contains("reference_network") && !f.at("reference_network").is_null()) {
      c.feedback.reference_network = f.at("reference_network").get<std::string>();
    }
    if (f.contains("teacher")) {
      const auto& t = f.at("teacher");
      check_keys(t, "feedback.teacher",
                 {"kind", "beta", "gamma", "epsilon", "skip_threshold", "equal_threshold", "annotation_mode",
                  "annotation_fraction", "ig_steps", "ig_baseline"});
      auto& tc = c.feedback.teacher;
      try {
        if (t.contains("kind")) tc.kind = teacher::kind_from_string(t.at("kind").get<std::string>());
        if (t.contains("annotation_mode")) {
          tc.annotation_mode = teacher::annotation_mode_from_string(t.at("annotation_mode").get<std::string>());
        }
        if (t.contains("ig_baseline")) tc.ig.ig_baseline = saliency::ig_baseline_from_string(t.at("ig_baseline").get<std::string>());
      } catch (const InvalidInput& e) {
        throw ConfigError(std::string("feedback.teacher: ") + e.what());
      }
      get_to(t, "beta", tc.beta, "feedback.teacher");
      get_to(t, "gamma", tc.gamma_t, "feedback.teacher");
      get_to(t, "epsilon", tc.epsilon, "feedback.teacher");
      if (t.contains("skip_threshold") && !t.at("skip_threshold").is_null()) {
        tc.skip_threshold = t.at("skip_threshold").get<double>();
      }
      get_to(t, "equal_threshold", tc.equal_threshold, "feedback.teacher");
      get_to(t, "annotation_fraction", tc.annotation_fraction, "feedback.teacher");
      get_to(t, "ig_steps", tc.ig.ig_steps, "feedback.teacher");
    }
    if (f.contains("gateway")) {
      const auto& g = f.at("gateway");
      check_keys(g, "feedback.gateway", {"host", "port", "query_expiry_s", "session_timeout_s"});
      get_to(g, "host", c.feedback.gateway.host, "feedback.gateway");
      get_to(g, "port", c.feedback.gateway.port, "feedback.gateway");
      get_to(g, "query_expiry_s", c.feedback.gateway.query_expiry_s, "feedback.gateway");
      get_to(g, "session_timeout_s", c.feedback.gateway.session_timeout_s, "feedback.gateway");
    }
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, "schedule",
               {"scale", "total_steps", "session_interval", "total_budget", "per_session", "eval_interval",
                "eval_episodes", "segment_len", "candidate_multiplier", "resample_factor", "checkpoint_interval"});
    auto& sc = c.schedule;
    get_to(s, "scale", sc.scale, "schedule");
    get_to(s, "total_steps", sc.total_steps, "schedule");
    get_to(s, "session_interval", sc.session_interval, "schedule");
    get_to(s, "total_budget", sc.total_budget, "schedule");
    get_to(s, "per_session", sc.per_session, "schedule");
    get_to(s, "eval_interval", sc.eval_interval, "schedule");
    get_to(s, "eval_episodes", sc.eval_episodes, "schedule");
    get_to(s, "segment_len", sc.segment_len, "schedule");
    get_to(s, "candidate_multiplier", sc.candidate_multiplier, "schedule");
    get_to(s, "resample_factor", sc.resample_factor, "schedule");
    get_to(s, "checkpoint_interval", sc.checkpoint_interval, "schedule");
  }
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    check_keys(r, "reward",
               {"hidden_layers", "activation", "output_activation", "ensemble_size", "learning_rate", "beta1", "beta2",
                "weight_decay", "epsilon", "alpha1", "alpha2", "label_smoothing", "logit_mode", "saliency_gradient",
                "batch_size", "target_accuracy", "max_epochs", "saliency"});
    auto& rs = c.reward;
    get_to(r, "hidden_layers", rs.hidden_layers, "reward");
    rs.activation = detail::activation(r, "activation", rs.activation, "reward");
    rs.output_activation = detail::activation(r, "output_activation", rs.output_activation, "reward");
    get_to(r, "ensemble_size", rs.ensemble_size, "reward");
    get_to(r, "learning_rate", rs.optimizer.learning_rate, "reward");
    get_to(r, "beta1", rs.optimizer.beta1, "reward");
    get_to(r, "beta2", rs.optimizer.beta2, "reward");
    get_to(r, "weight_decay", rs.optimizer.weight_decay, "reward");
    get_to(r, "epsilon", rs.optimizer.epsilon, "reward");
    get_to(r, "alpha1", rs.train.weights.alpha1, "reward");
    get_to(r, "alpha2", rs.train.weights.alpha2, "reward");
    get_to(r, "label_smoothing", rs.train.weights.label_smoothing, "reward");
    if (r.contains("logit_mode")) {
      const auto m = r.at("logit_mode").get<std::string>();
      if (m != "raw" && m != "standardized") throw ConfigError("reward.logit_mode must be 'raw' or 'standardized'");
      rs.train.logit_mode = m == "raw" ? saliency::Normalization::raw : saliency::Normalization::standardized;
    }
    if (r.contains("saliency_gradient")) {
      const auto m = r.at("saliency_gradient").get<std::string>();
      if (m != "exact" && m != "final_layer") {
        throw ConfigError("reward.saliency_gradient must be 'exact' or 'final_layer'");
      }
      rs.train.saliency_gradient = m == "exact" ? reward::SaliencyGradient::exact : reward::SaliencyGradient::final_layer;
    }
    get_to(r, "batch_size", rs.train.batch_size, "reward");
    get_to(r, "target_accuracy", rs.target_accuracy, "reward");
    get_to(r, "max_epochs", rs.max_epochs, "reward");
    if (r.contains("saliency")) {
      const auto& s = r.at("saliency");
      check_keys(s, "reward.saliency", {"n_smooth", "noise_scale", "ig_steps", "ig_baseline"});
      get_to(s, "n_smooth", rs.train.saliency.n_smooth, "reward.saliency");
      get_to(s, "noise_scale", rs.train.saliency.noise_scale, "reward.saliency");
      get_to(s, "ig_steps", rs.train.saliency.ig_steps, "reward.saliency");
      if (s.contains("ig_baseline")) {
        try {
          rs.train.saliency.ig_baseline = saliency::ig_baseline_from_string(s.at("ig_baseline").get<std::string>());
        } catch (const InvalidInput& e) {
          throw ConfigError(std::string("reward.saliency: ") + e.what());
        }
      }
    }
  }
  if (j.contains("agent")) {
    const auto& a = j.at("agent");
    check_keys(a, "agent",
               {"algorithm", "hidden_layers", "gamma", "tau", "learning_rate", "batch_size", "init_temperature",
                "auto_temperature", "buffer_capacity", "warmup_steps", "updates_per_step"});
    auto& ag = c.agent;
    get_to(a, "algorithm", ag.algorithm, "agent");
    get_to(a, "hidden_layers", ag.sac.hidden_layers, "agent");
    get_to(a, "gamma", ag.sac.gamma, "agent");
    get_to(a, "tau", ag.sac.tau, "agent");
    get_to(a, "learning_rate", ag.sac.learning_rate, "agent");
    get_to(a, "batch_size", ag.sac.batch_size, "agent");
    get_to(a, "init_temperature", ag.sac.init_temperature, "agent");
    get_to(a, "auto_temperature", ag.sac.auto_temperature, "agent");
    get_to(a, "buffer_capacity", ag.buffer_capacity, "agent");
    get_to(a, "warmup_steps", ag.warmup_steps, "agent");
    get_to(a, "updates_per_step", ag.updates_per_step, "agent");
  }
  return c;
}

// ---- environment-variable overrides ----

inline constexpr const char* kEnvPrefix = "ANNOPREF_";

/// Applies ANNOPREF_<A>__<B>__<C>=value overrides to a config tree: the path
/// is lower-cased, "__" separates levels, and the value is parsed as JSON
/// when possible (numbers, booleans, null, arrays) and taken as a string
/// otherwise. Returns the applied keys.
inline std::vector<std::string> apply_env_overrides(nlohmann::json& j, char** envp = environ) {
  std::vector<std::string> applied;
  if (envp == nullptr) return applied;
  const std::string prefix = kEnvPrefix;
  std::vector<std::pair<std::string, std::string>> entries;
  for (char** e = envp; *e != nullptr; ++e) {
    const std::string kv = *e;
    if (kv.rfind(prefix, 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    entries.emplace_back(kv.substr(prefix.size(), eq - prefix.size()), kv.substr(eq + 1));
  }
  std::sort(entries.begin(), entries.end());
  for (const auto& [raw_key, raw_value] : entries) {
    std::string key = raw_key;
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (key.empty()) continue;
    std::vector<std::string> path;
    std::size_t pos = 0;
    while (true) {
      const auto next = key.find("__", pos);
      path.push_back(key.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    nlohmann::json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      if (!node->is_object()) throw ConfigError("override " + raw_key + ": '" + path[i] + "' is not an object");
      node = &(*node)[path[i]];
      if (node->is_null()) *node = nlohmann::json::object();
    }
    nlohmann::json value = nlohmann::json::parse(raw_value, nullptr, false);
    if (value.is_discarded()) value = raw_value;
    (*node)[path.back()] = value;
    applied.push_back(kEnvPrefix + raw_key);
  }
  return applied;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

/// Reads a config file and applies environment overrides.
inline RunConfig load_config(const std::filesystem::path& path, char** envp = environ) {
  auto j = read_json_file(path);
  apply_env_overrides(j, envp);
  return config_from_json(j);
}

}  // namespace annopref::orchestrator
