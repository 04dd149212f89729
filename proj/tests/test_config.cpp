#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "icepilot/config.hpp"
#include "icepilot/errors.hpp"
#include "icepilot/io.hpp"

using namespace icepilot;
namespace fs = std::filesystem;

TEST_CASE("default config round trips") {
  const AppConfig c;
  const auto j = to_json(c);
  for (const char* k : {"catheter", "fan", "scene", "model", "service"}) CHECK(j.contains(k));
  CHECK(j["fan"].contains("render"));
  CHECK(j["model"].contains("train"));
  CHECK(j["model"].contains("data"));
  const AppConfig back = app_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(app_config_from_json(nlohmann::json::object()).service.port == 8765);
}

TEST_CASE("partial sections override single fields") {
  const auto c = app_config_from_json(nlohmann::json::parse(R"({
    "fan": {"depth": 120, "render": {"width": 96, "height": 96}},
    "model": {"train": {"max_epochs": 3}},
    "service": {"port": 0, "max_sessions": 4}
  })"));
  CHECK(c.fan.depth == 120);
  CHECK(c.render.width == 96);
  CHECK(c.train.max_epochs == 3);
  CHECK(c.service.port == 0);
  CHECK(c.service.max_sessions == 4);
  CHECK(c.service.oracle.has_value());
  CHECK(config_hash(c) != config_hash(AppConfig{}));
}

TEST_CASE("unknown keys and bad values are config errors") {
  CHECK_THROWS_AS(app_config_from_json({{"extra", 1}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"fan", {{"dpeth", 1}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"service", {{"prot", 1}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"service", {{"port", "x"}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"service", {{"port", 70000}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"scene", {{"path", "a.json"}, {"seed", 3}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"fan", {{"depth", -1}}}}), ConfigError);
  for (const char* nested : {R"({"catheter": {"zzz": 1}})", R"({"fan": {"render": {"zzz": 1}}})",
                             R"({"scene": {"variation": {"zzz": 1}}})", R"({"model": {"train": {"epochs": 3}}})",
                             R"({"model": {"data": {"zzz": 1}}})", R"({"service": {"guidance": {"limits": {"zzz": 1}}}})"})
    CHECK_THROWS_AS(app_config_from_json(nlohmann::json::parse(nested)), ConfigError);
}

TEST_CASE("exactly one estimator") {
  CHECK_THROWS_AS(app_config_from_json({{"service", {{"estimator", nlohmann::json::object()}}}}), ConfigError);
  CHECK_THROWS_AS(app_config_from_json({{"service", {{"estimator", {{"checkpoint", "m.ckpt"}, {"oracle", nlohmann::json::object()}}}}}}),
                  ConfigError);
  const auto c = app_config_from_json({{"service", {{"estimator", {{"checkpoint", "m.ckpt"}}}}}});
  CHECK(c.service.checkpoint == "m.ckpt");
  CHECK(!c.service.oracle);
}

TEST_CASE("config file and environment override") {
  const fs::path dir = fs::temp_directory_path() / "icepilot_test_config";
  fs::create_directories(dir);
  write_file(dir / "a.json", R"({"service": {"port": 1111}})");
  write_file(dir / "b.json", R"({"service": {"port": 2222}})");
  write_file(dir / "bad.json", "{");

  ::unsetenv("ICEPILOT_CONFIG");
  CHECK(!resolve_config_path(std::nullopt));
  CHECK(load_app_config(resolve_config_path(dir / "a.json")).service.port == 1111);
  ::setenv("ICEPILOT_CONFIG", (dir / "b.json").c_str(), 1);
  CHECK(load_app_config(resolve_config_path(dir / "a.json")).service.port == 2222);
  CHECK(load_app_config(resolve_config_path(std::nullopt)).service.port == 2222);
  ::unsetenv("ICEPILOT_CONFIG");
  CHECK_THROWS_AS(load_app_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_app_config(dir / "missing.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("scene sources") {
  SceneConfig s;
  const auto tmpl = load_scene(s);
  CHECK(to_json(tmpl) == to_json(canonical_scene()));
  s.seed = 5;
  const auto gen = load_scene(s);
  CHECK(to_json(gen) == to_json(load_scene(s)));
  CHECK(to_json(gen) != to_json(tmpl));
  s.path = "x.json";
  CHECK_THROWS_AS(load_scene(s), ConfigError);
}
