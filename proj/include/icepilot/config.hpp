#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "icepilot/guidance.hpp"
#include "icepilot/train.hpp"

namespace icepilot {

nlohmann::json to_json(const OracleParams& p);
OracleParams oracle_params_from_json(const nlohmann::json& j);

/// Scene source: a scene file, a generated scene, or the template when neither is set.
struct SceneConfig {
  std::string path;
  std::optional<std::uint64_t> seed;
  ScaleAndJitterParams variation{};
};

AnatomyScene load_scene(const SceneConfig& c);

struct ServiceConfig {
  std::string bind = "127.0.0.1";
  int port = 8765;                 // 0 picks a free port
  std::string checkpoint;          // learned estimator when set
  std::optional<OracleParams> oracle = OracleParams{};
  GuidanceConfig guidance{};
  int max_sessions = 32;
  double idle_timeout_s = 600.0;
  int threads = 2;

  void validate() const;
};

/// Everything a run needs. File sections: catheter, fan (with render), scene,
/// model (with train and data), service (with guidance). The fan section is
/// the only place imaging is configured; data and guidance copy it.
struct AppConfig {
  AppConfig();
  /// Copies fan and render into data and service.guidance.
  void sync_imaging();

  CatheterModel catheter{};
  FanParams fan{};
  RenderParams render{};
  SceneConfig scene{};
  ModelConfig model = ModelConfig::desk();
  TrainConfig train{};
  DatasetSpec data{};
  ServiceConfig service{};
};

nlohmann::json to_json(const AppConfig& c);
/// Unknown sections or keys are ConfigErrors.
AppConfig app_config_from_json(const nlohmann::json& j);
/// ICEPILOT_CONFIG, when set, replaces `cli_path`. Empty result: defaults.
std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::filesystem::path>& cli_path);
AppConfig load_app_config(const std::optional<std::filesystem::path>& path);
std::string config_hash(const AppConfig& c);

}  // namespace icepilot
