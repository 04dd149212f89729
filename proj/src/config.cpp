#include "icepilot/config.hpp"

#include <cstdlib>
#include <set>

#include "icepilot/errors.hpp"
#include "icepilot/io.hpp"

namespace icepilot {

namespace {

void only_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

}  // namespace

nlohmann::json to_json(const OracleParams& p) {
  return {{"margin_mm", p.margin_mm}, {"margin_rad", p.margin_rad}, {"noise_mm", p.noise_mm},
          {"noise_rad", p.noise_rad}, {"seed", p.seed}};
}

OracleParams oracle_params_from_json(const nlohmann::json& j) {
  only_keys(j, "oracle", {"margin_mm", "margin_rad", "noise_mm", "noise_rad", "seed"});
  OracleParams p;
  p.margin_mm = j.value("margin_mm", p.margin_mm);
  p.margin_rad = j.value("margin_rad", p.margin_rad);
  p.noise_mm = j.value("noise_mm", p.noise_mm);
  p.noise_rad = j.value("noise_rad", p.noise_rad);
  p.seed = j.value("seed", p.seed);
  if (p.margin_mm < 0 || p.margin_rad < 0 || p.noise_mm < 0 || p.noise_rad < 0)
    throw ConfigError("oracle: margins and noise must be non-negative");
  return p;
}

AnatomyScene load_scene(const SceneConfig& c) {
  if (!c.path.empty() && c.seed) throw ConfigError("scene: set either path or seed, not both");
  if (!c.path.empty()) return read_scene(c.path);
  if (c.seed) return generate_scene(*c.seed, c.variation);
  return canonical_scene();
}

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw ConfigError("service: port out of range");
  if (checkpoint.empty() == !oracle.has_value())
    throw ConfigError("service: configure exactly one estimator (oracle or checkpoint)");
  if (max_sessions < 1) throw ConfigError("service: max_sessions must be positive");
  if (!(idle_timeout_s > 0)) throw ConfigError("service: idle_timeout_s must be positive");
  if (threads < 1) throw ConfigError("service: threads must be positive");
}

AppConfig::AppConfig() {
  render.width = render.height = model.input_size;
  sync_imaging();
}

void AppConfig::sync_imaging() {
  data.fan = service.guidance.fan = fan;
  data.render = service.guidance.render = render;
}

nlohmann::json to_json(const AppConfig& c) {
  nlohmann::json fan = to_json(c.fan);
  fan["render"] = to_json(c.render);
  nlohmann::json scene = {{"variation", to_json(c.scene.variation)}};
  if (!c.scene.path.empty()) scene["path"] = c.scene.path;
  if (c.scene.seed) scene["seed"] = *c.scene.seed;
  nlohmann::json model = to_json(c.model);
  model["train"] = to_json(c.train);
  model["data"] = to_json(c.data);
  model["data"].erase("fan");
  model["data"].erase("render");
  const ServiceConfig& s = c.service;
  nlohmann::json guidance = to_json(s.guidance);
  guidance.erase("fan");
  guidance.erase("render");
  nlohmann::json estimator = nlohmann::json::object();
  if (!s.checkpoint.empty()) estimator["checkpoint"] = s.checkpoint;
  if (s.oracle) estimator["oracle"] = to_json(*s.oracle);
  nlohmann::json service{{"bind", s.bind},
                         {"port", s.port},
                         {"estimator", estimator},
                         {"guidance", guidance},
                         {"max_sessions", s.max_sessions},
                         {"idle_timeout_s", s.idle_timeout_s},
                         {"threads", s.threads}};
  return {{"catheter", to_json(c.catheter)}, {"fan", fan}, {"scene", scene}, {"model", model}, {"service", service}};
}

namespace {

// Every key the user wrote must survive a round trip through the parsed config.
void check_known(const nlohmann::json& given, const nlohmann::json& parsed, const std::string& where) {
  if (!given.is_object() || !parsed.is_object()) return;
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!parsed.contains(k)) throw ConfigError("config: unknown key '" + path + "'");
    check_known(v, parsed.at(k), path);
  }
}

}  // namespace

AppConfig app_config_from_json(const nlohmann::json& j) {
  AppConfig c;
  try {
    only_keys(j, "config", {"catheter", "fan", "scene", "model", "service"});
    if (j.contains("catheter")) c.catheter = catheter_from_json(j.at("catheter"));
    if (j.contains("fan")) {
      nlohmann::json fan = j.at("fan");
      only_keys(fan, "fan", {"sector_angle", "depth", "render"});
      if (fan.contains("render")) c.render = render_params_from_json(fan.at("render"));
      fan.erase("render");
      c.fan = fan_params_from_json(fan);
    }
    if (j.contains("scene")) {
      const auto& sc = j.at("scene");
      only_keys(sc, "scene", {"path", "seed", "variation"});
      c.scene.path = sc.value("path", std::string());
      if (sc.contains("seed")) c.scene.seed = sc.at("seed").get<std::uint64_t>();
      if (sc.contains("variation")) c.scene.variation = variation_from_json(sc.at("variation"));
      if (!c.scene.path.empty() && c.scene.seed) throw ConfigError("scene: set either path or seed, not both");
    }
    if (j.contains("model")) {
      nlohmann::json m = j.at("model");
      if (!m.is_object()) throw ConfigError("model: expected an object");
      if (m.contains("train")) c.train = train_config_from_json(m.at("train"));
      if (m.contains("data")) c.data = dataset_spec_from_json(m.at("data"));
      m.erase("train");
      m.erase("data");
      c.model = model_config_from_json(m);
    }
    if (j.contains("service")) {
      const auto& s = j.at("service");
      only_keys(s, "service", {"bind", "port", "estimator", "guidance", "max_sessions", "idle_timeout_s", "threads"});
      ServiceConfig& out = c.service;
      out.bind = s.value("bind", out.bind);
      out.port = s.value("port", out.port);
      if (s.contains("estimator")) {
        const auto& e = s.at("estimator");
        only_keys(e, "service.estimator", {"oracle", "checkpoint"});
        out.oracle.reset();
        out.checkpoint = e.value("checkpoint", std::string());
        if (e.contains("oracle")) out.oracle = oracle_params_from_json(e.at("oracle"));
      }
      if (s.contains("guidance")) out.guidance = guidance_config_from_json(s.at("guidance"));
      out.max_sessions = s.value("max_sessions", out.max_sessions);
      out.idle_timeout_s = s.value("idle_timeout_s", out.idle_timeout_s);
      out.threads = s.value("threads", out.threads);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.sync_imaging();
  c.model.validate();
  c.service.validate();
  check_known(j, to_json(c), "");
  return c;
}

std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::filesystem::path>& cli_path) {
  if (const char* env = std::getenv("ICEPILOT_CONFIG"); env && *env) return std::filesystem::path(env);
  return cli_path;
}

AppConfig load_app_config(const std::optional<std::filesystem::path>& path) {
  if (!path) return AppConfig{};
  std::string text;
  try {
    text = read_file(*path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path->string() + ": " + e.what());
  }
  return app_config_from_json(j);
}

std::string config_hash(const AppConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace icepilot
