#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "hawkes/autodiff.hpp"
#include "hawkes/hexp.hpp"
#include "hawkes/isahp.hpp"

namespace hawkes {

// Versioned JSON checkpoints: parameters as an ordered array of
// {name, shape, values} (row-major, full double precision) plus the model
// configuration needed to rebuild the network.

inline constexpr const char* kCheckpointFormat = "hawkes-causal-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const ad::ParamStore& store) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : store.entries())
    arr.push_back({{"name", e.name}, {"shape", e.shape}, {"values", e.values}});
  return arr;
}

inline ad::ParamStore params_from_json(const nlohmann::json& arr) {
  ad::ParamStore store;
  for (const auto& e : arr)
    store.add(e.at("name").get<std::string>(),
              e.at("shape").get<std::vector<std::size_t>>(),
              e.at("values").get<std::vector<double>>());
  return store;
}

namespace detail {

inline nlohmann::json checkpoint_header(const std::string& model) {
  return {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"model", model}};
}

inline nlohmann::json read_checkpoint(const std::string& path, const std::string& expect_model) {
  std::ifstream in(path);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path + "': " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat)
    throw ParseError("checkpoint '" + path + "': unrecognized format");
  if (j.value("version", -1) != kCheckpointVersion)
    throw ParseError("checkpoint '" + path + "': unsupported version");
  if (!expect_model.empty() && j.value("model", "") != expect_model)
    throw ParseError("checkpoint '" + path + "': model is '" + j.value("model", "") +
                     "', expected '" + expect_model + "'");
  return j;
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

inline nlohmann::json isahp_config_to_json(const IsahpConfig& cfg) {
  return {{"K", cfg.K},
          {"embed_dim", cfg.embed_dim},
          {"value_dim", cfg.value_dim},
          {"heads", cfg.heads},
          {"hidden", cfg.hidden},
          {"omega1", cfg.omega1},
          {"omega2", cfg.omega2},
          {"compensator_mode",
           cfg.compensator_mode == IsahpConfig::CompensatorMode::AllTypes ? "all-types"
                                                                          : "observed-type"},
          {"gamma_floor", cfg.gamma_floor}};
}

inline IsahpConfig isahp_config_from_json(const nlohmann::json& j) {
  IsahpConfig cfg;
  cfg.K = j.at("K").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.value_dim = j.at("value_dim").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.hidden = j.at("hidden").get<int>();
  cfg.omega1 = j.at("omega1").get<double>();
  cfg.omega2 = j.at("omega2").get<double>();
  const auto mode = j.at("compensator_mode").get<std::string>();
  if (mode == "all-types")
    cfg.compensator_mode = IsahpConfig::CompensatorMode::AllTypes;
  else if (mode == "observed-type")
    cfg.compensator_mode = IsahpConfig::CompensatorMode::ObservedType;
  else
    throw ParseError("checkpoint: unknown compensator_mode '" + mode + "'");
  cfg.gamma_floor = j.at("gamma_floor").get<double>();
  cfg.validate();
  return cfg;
}

inline void save_checkpoint(const IsahpParams& P, const std::string& path) {
  nlohmann::json j = detail::checkpoint_header("isahp");
  j["isahp_config"] = isahp_config_to_json(P.cfg);
  j["dt_scale"] = P.dt_scale;
  j["params"] = params_to_json(P.store);
  detail::write_json_file(j, path);
}

inline IsahpParams load_checkpoint_isahp(const std::string& path) {
  const nlohmann::json j = detail::read_checkpoint(path, "isahp");
  IsahpParams P;
  P.cfg = isahp_config_from_json(j.at("isahp_config"));
  P.dt_scale = j.at("dt_scale").get<double>();
  P.store = params_from_json(j.at("params"));
  return P;
}

inline void save_checkpoint(const HexpModel& m, const std::string& path) {
  nlohmann::json j = detail::checkpoint_header("hexp");
  j["hexp_config"] = {{"K", m.K()},
                      {"freeze_gamma", m.config().freeze_gamma},
                      {"gamma_init", m.config().gamma_init}};
  j["params"] = params_to_json(m.params());
  detail::write_json_file(j, path);
}

inline HexpModel load_checkpoint_hexp(const std::string& path) {
  const nlohmann::json j = detail::read_checkpoint(path, "hexp");
  const auto& hc = j.at("hexp_config");
  HexpConfig cfg;
  cfg.freeze_gamma = hc.at("freeze_gamma").get<bool>();
  cfg.gamma_init = hc.at("gamma_init").get<double>();
  HexpModel m(hc.at("K").get<int>(), cfg);
  ad::ParamStore loaded = params_from_json(j.at("params"));
  for (const auto& e : loaded.entries()) m.params().at(e.name).values = e.values;
  return m;
}

// Model kind recorded in a checkpoint file, for commands that accept either.
inline std::string checkpoint_model_kind(const std::string& path) {
  return detail::read_checkpoint(path, "").value("model", "");
}

}  // namespace hawkes
