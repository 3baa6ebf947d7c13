#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "annopref/core/error.hpp"
#include "annopref/diffnet/adamw.hpp"
#include "annopref/diffnet/mlp.hpp"

// Parameter snapshot format (JSON):
//   {"format": "annopref.mlp", "version": 1,
//    "spec": {"input_dim", "hidden_layers", "activation", "output_dim", "output_activation"},
//    "values": [flat parameters, layer-major: W (out x in, row-major) then b],
//    "optimizer": {"learning_rate", "beta1", "beta2", "weight_decay", "epsilon",
//                  "step", "m": [...], "v": [...]}          (optional)}
// Doubles are written in shortest round-trip form, so reload is bit-exact.

namespace annopref::diffnet {

inline constexpr int kSnapshotVersion = 1;

inline nlohmann::json to_json(const MlpSpec& s) {
  return {{"input_dim", s.input_dim},
          {"hidden_layers", s.hidden_layers},
          {"activation", to_string(s.activation)},
          {"output_dim", s.output_dim},
          {"output_activation", to_string(s.output_activation)}};
}

inline MlpSpec spec_from_json(const nlohmann::json& j) {
  MlpSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden_layers = j.at("hidden_layers").get<std::vector<std::size_t>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.output_activation = activation_from_string(j.at("output_activation").get<std::string>());
  s.validate();
  return s;
}

inline nlohmann::json to_json(const AdamWConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"epsilon", c.epsilon}};
}

inline AdamWConfig adamw_config_from_json(const nlohmann::json& j) {
  AdamWConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

inline nlohmann::json to_json(const OptimizerState& s) {
  auto j = to_json(s.config);
  j["step"] = s.step;
  j["m"] = s.m;
  j["v"] = s.v;
  return j;
}

inline OptimizerState optimizer_from_json(const nlohmann::json& j) {
  OptimizerState s;
  s.config = adamw_config_from_json(j);
  s.step = j.at("step").get<std::uint64_t>();
  s.m = j.at("m").get<std::vector<double>>();
  s.v = j.at("v").get<std::vector<double>>();
  return s;
}

inline nlohmann::json to_json(const MlpParams& p) {
  return {{"format", "annopref.mlp"},
          {"version", kSnapshotVersion},
          {"spec", to_json(p.spec())},
          {"values", std::vector<double>(p.values().begin(), p.values().end())}};
}

inline MlpParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "annopref.mlp") throw InvalidInput("snapshot: not an annopref.mlp document");
  if (j.value("version", 0) != kSnapshotVersion) throw InvalidInput("snapshot: unsupported version");
  MlpParams p(spec_from_json(j.at("spec")));
  const auto values = j.at("values").get<std::vector<double>>();
  if (values.size() != p.size()) throw InvalidInput("snapshot: parameter count does not match spec");
  std::copy(values.begin(), values.end(), p.values().begin());
  return p;
}

inline void save_snapshot(const std::filesystem::path& path, const MlpParams& p,
                          const OptimizerState* opt = nullptr) {
  auto j = to_json(p);
  if (opt != nullptr) j["optimizer"] = to_json(*opt);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump();
}

inline MlpParams load_snapshot(const std::filesystem::path& path, OptimizerState* opt = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  if (opt != nullptr && j.contains("optimizer")) *opt = optimizer_from_json(j.at("optimizer"));
  return params_from_json(j);
}

}  // namespace annopref::diffnet
