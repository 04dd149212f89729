#include "cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "icepilot/config.hpp"
#include "icepilot/errors.hpp"
#include "icepilot/eval.hpp"
#include "icepilot/io.hpp"
#include "icepilot/pipeline.hpp"
#include "icepilot/service.hpp"

namespace icepilot {
namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool verbose = false;
};

void note(const Globals& g, const std::string& text) {
  if (g.verbose) std::cerr << text << '\n';
}

void apply_seed(AppConfig& c, std::uint64_t seed) {
  c.data.seed = seed;
  c.train.seed = seed;
  if (c.scene.seed) c.scene.seed = seed;
  if (c.service.oracle) c.service.oracle->seed = seed;
  c.service.guidance.noise_seed = seed;
}

void stanza(const std::string& command, const Globals& g, const std::optional<fs::path>& path, const AppConfig& c) {
  nlohmann::json seeds{{"data", c.data.seed},
                       {"train", c.train.seed},
                       {"scene", c.scene.seed ? nlohmann::json(*c.scene.seed) : nlohmann::json(nullptr)},
                       {"oracle", c.service.oracle ? nlohmann::json(c.service.oracle->seed) : nlohmann::json(nullptr)},
                       {"noise", c.service.guidance.noise_seed}};
  nlohmann::json j{{"command", command},
                   {"version", version_string()},
                   {"git", git_describe()},
                   {"config", path ? nlohmann::json(path->string()) : nlohmann::json(nullptr)},
                   {"config_hash", config_hash(c)},
                   {"seed_flag", g.seed_set ? nlohmann::json(g.seed) : nlohmann::json(nullptr)},
                   {"seeds", seeds}};
  std::cerr << "# run " << j.dump() << '\n';
}

std::shared_ptr<const Estimator> load_estimator(const std::string& which, const AppConfig& c) {
  std::shared_ptr<const Estimator> e;
  if (which == "oracle") {
    e = std::make_shared<OracleEstimator>(c.service.oracle.value_or(OracleParams{}));
  } else {
    e = std::make_shared<LearnedEstimator>(load_checkpoint(which).network);
  }
  if (const auto side = e->input_size(); side && (*side != c.render.width || *side != c.render.height))
    throw ConfigError("checkpoint expects " + std::to_string(*side) + " px renders; set fan.render width and height");
  return e;
}

/// A dataset directory, or a directory of scene files rendered on the fly.
Dataset load_cases(const fs::path& dir, const AppConfig& c, int renders, std::string* hash) {
  if (fs::exists(dir / "manifest.json")) {
    if (hash) *hash = dataset_hash(dir);
    return read_dataset(dir, c.catheter);
  }
  if (!fs::is_directory(dir)) throw FormatError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw EmptyDatasetError(dir.string() + ": no scene files");
  std::vector<SceneBundle> scenes;
  std::string names;
  for (const auto& f : files) {
    scenes.push_back(make_bundle(read_scene(f), c.catheter));
    names += read_file(f);
  }
  DatasetSpec spec = c.data;
  spec.renders_per_scene = renders;
  if (hash) *hash = sha256_hex(names + to_json(spec).dump());
  return render_dataset(std::move(scenes), spec, c.catheter);
}

int run_gen_data(const Globals& g, const AppConfig& c, int scenes, int renders, const fs::path& out, int shard) {
  DatasetSpec spec = c.data;
  spec.scenes = scenes;
  spec.renders_per_scene = renders;
  note(g, "generating " + std::to_string(scenes) + " scenes x " + std::to_string(renders) + " renders");
  const Dataset d = generate_dataset(spec, c.catheter);
  write_dataset(out, d, spec, shard);
  std::cout << nlohmann::json{{"out", out.string()},
                              {"scenes", d.scenes.size()},
                              {"records", d.records.size()},
                              {"dataset_hash", dataset_hash(out)}}
                   .dump()
            << '\n';
  return 0;
}

int run_train(const Globals& g, const AppConfig& c, const fs::path& data, const std::string& val_dir, double holdout,
              const fs::path& out) {
  Dataset all = read_dataset(data, c.catheter);
  Dataset train_data, val_data;
  if (val_dir.empty()) {
    std::tie(train_data, val_data) = split_by_scene(all, holdout);
  } else {
    train_data = std::move(all);
    val_data = read_dataset(val_dir, c.catheter);
  }
  note(g, "training on " + std::to_string(train_data.records.size()) + " renders, validating on " +
              std::to_string(val_data.records.size()));
  const TrainedModel m = train_model(c.model, c.train, train_data, val_data, [&](const EpochLog& e) {
    note(g, to_json(e).dump());
  });
  nlohmann::json meta{{"train", to_json(m.result)},
                      {"train_config", to_json(c.train)},
                      {"config_hash", config_hash(c)},
                      {"dataset_hash", dataset_hash(data)},
                      {"git", git_describe()}};
  save_checkpoint(out, *m.network, meta);
  std::cout << nlohmann::json{{"out", out.string()},
                              {"initial_val_loss", m.result.initial_val_loss},
                              {"best_val_loss", m.result.best_val_loss},
                              {"best_epoch", m.result.best_epoch},
                              {"epochs", m.result.epochs.size()}}
                   .dump()
            << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  bool oracle = false;
  fs::path scenes, out;
  int renders = 50;
  bool all_goals = false;
  int nearby = 0;
  int stability = 0;
};

int run_eval(const Globals& g, const AppConfig& c, const EvalArgs& a) {
  const auto estimator = load_estimator(a.oracle ? "oracle" : a.ckpt, c);
  std::string hash;
  const Dataset d = load_cases(a.scenes, c, a.renders, &hash);
  const auto cases = make_cases(d, a.all_goals);
  note(g, "evaluating " + std::to_string(cases.size()) + " cases with the " + estimator->name() + " estimator");
  const EvalOptions opt{c.fan, c.render, true};
  EvalReport r = evaluate(d.scenes, cases, c.catheter, *estimator, opt);
  std::mt19937_64 rng(c.data.seed);
  if (a.nearby > 0) {
    const auto pairs = make_nearby_pairs(a.nearby, static_cast<int>(d.scenes.size()), c.catheter, c.data.box, 2.0, 0.05, rng);
    r.nearby = nearby_view_test(d.scenes, pairs, c.catheter, *estimator, opt);
  }
  if (a.stability > 0) {
    const auto trajs = make_trajectories(a.stability, 20, c.data.box, rng);
    std::vector<ViewClass> goals;
    for (int i = 0; i < a.stability; ++i) goals.push_back(kTargetViews[i % kTargetViews.size()]);
    r.stability = stability_test(d.scenes[0], c.catheter, *estimator, trajs, goals, c.service.guidance);
  }
  r.config = to_json(c);
  r.dataset_hash = hash;
  write_file(a.out, to_json(r).dump(2));
  fs::path csv = a.out;
  csv.replace_extension(".csv");
  write_file(csv, histograms_csv(r));
  std::cout << nlohmann::json{{"out", a.out.string()},
                              {"csv", csv.string()},
                              {"estimator", r.estimator},
                              {"cases", r.total},
                              {"accuracy", r.accuracy},
                              {"all_quantile_fraction", r.all_quantile_fraction}}
                   .dump()
            << '\n';
  return 0;
}

struct SimArgs {
  std::string scene, estimator = "oracle", goal, log = "session.jsonl";
  std::vector<double> start;
  bool auto_mode = false;
};

int run_simulate(const Globals& g, const AppConfig& c, const SimArgs& a) {
  AnatomyScene scene = a.scene.empty() ? load_scene(c.scene) : read_scene(a.scene);
  auto bundle = std::make_shared<const SceneBundle>(make_bundle(std::move(scene), c.catheter));
  const auto estimator = load_estimator(a.estimator, c);
  const ViewClass goal = view_class_from_string(a.goal);
  JointState start = c.catheter.home;
  if (!a.start.empty()) start = {a.start[0], a.start[1], a.start[2], a.start[3]};
  GuidanceSession s(bundle, c.catheter, start, estimator, c.service.guidance);
  s.set_goal(goal);
  if (a.auto_mode) {
    while (s.status() == SessionStatus::Guiding) {
      const GuidanceStep st = s.step();
      note(g, "step " + std::to_string(st.index) + " " + to_string(st.status) + " distance " +
                  std::to_string(st.metrics.normalized_distance));
    }
  } else {
    // One delta per stdin line, as [theta1, theta2, theta3, d4] or an object.
    std::string line;
    while (std::getline(std::cin, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const JointDelta d = delta_from_json(nlohmann::json::parse(line));
      try {
        s.apply(d);
      } catch (const JointLimitError& e) {
        std::cerr << "joint limit: " << e.what() << "; feasible " << to_json(s.feasible(d)).dump() << '\n';
      }
    }
  }
  std::ofstream log(a.log);
  if (!log) throw Error("cannot write " + a.log);
  s.write_log(log);
  log.close();
  std::cout << nlohmann::json{{"session", s.id()},
                              {"goal", to_string(goal)},
                              {"status", to_string(s.status())},
                              {"steps", s.history().size()},
                              {"joints", to_json(s.joints())},
                              {"metrics", to_json(s.metrics())},
                              {"log", a.log}}
                   .dump()
            << '\n';
  return 0;
}

int run_serve(const Globals& g, AppConfig c, const std::string& ckpt, double duration) {
  if (!ckpt.empty()) {
    c.service.checkpoint = ckpt;
    c.service.oracle.reset();
  }
  c.service.validate();
  auto bundle = std::make_shared<const SceneBundle>(make_bundle(load_scene(c.scene), c.catheter));
  const auto estimator = c.service.checkpoint.empty() ? load_estimator("oracle", c) : load_estimator(c.service.checkpoint, c);

  // Signals go to a dedicated waiter, not to the worker threads.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Service svc(c.service, bundle, c.catheter, estimator);
  const int port = svc.start();
  std::cerr << "listening on http://" << c.service.bind << ":" << port << " (" << estimator->name() << " estimator)"
            << std::endl;
  if (duration > 0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(duration));
  } else {
    int sig = 0;
    sigwait(&set, &sig);
    note(g, "signal " + std::to_string(sig) + ", shutting down");
  }
  svc.stop();
  pthread_sigmask(SIG_UNBLOCK, &set, nullptr);
  return 0;
}

int run_report(const fs::path& in, const std::string& plot, const std::string& csv) {
  const EvalReport r = eval_report_from_json(nlohmann::json::parse(read_file(in)));
  if (!plot.empty()) write_file(plot, histogram_svg(r));
  if (!csv.empty()) write_file(csv, histograms_csv(r));
  std::ostringstream s;
  s << "estimator " << r.estimator << ", " << r.total << " cases\n";
  s << "accuracy " << r.correct << "/" << r.total << " = " << r.accuracy << "\n";
  s << "all quantile fans in volume " << r.all_quantile_fraction << "\n";
  s << "coverage px py pz ox oy oz:";
  for (double v : r.coverage) s << ' ' << v;
  s << "\n";
  for (const auto& [v, b] : r.per_view) s << "  " << to_string(v) << ": " << b.correct << "/" << b.count << "\n";
  if (r.nearby) s << "nearby cells within 10 mm / 0.3 rad: " << r.nearby->fraction_within(10.0, 0.3) << "\n";
  if (r.stability) s << "max endpoint std: " << r.stability->max_endpoint_std() << " mm\n";
  std::cout << s.str();
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"icepilot: simulated intracardiac echo view guidance"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file (ICEPILOT_CONFIG overrides)");
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed for data, training, oracle noise and render noise");
  app.add_flag("--verbose,-v", g.verbose, "Progress on stderr");

  auto* gen = app.add_subcommand("gen-data", "Generate scenes and rendered slices");
  int scenes = 0, renders = 0, shard = 256;
  fs::path gen_out;
  auto* scenes_opt = gen->add_option("--scenes", scenes, "Number of scenes")->check(CLI::PositiveNumber);
  auto* renders_opt = gen->add_option("--renders", renders, "Renders per scene")->check(CLI::NonNegativeNumber);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--shard-size", shard, "Records per shard")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train the view estimator");
  fs::path data_dir, ckpt_out;
  std::string val_dir;
  double holdout = 0.2;
  int epochs = 0;
  double lr = 0;
  tr->add_option("--data", data_dir, "Dataset directory from gen-data")->required();
  tr->add_option("--val", val_dir, "Validation dataset directory (default: hold out scenes)");
  tr->add_option("--holdout", holdout, "Fraction of scenes held out")->check(CLI::Range(0.0, 1.0));
  tr->add_option("--out", ckpt_out, "Checkpoint path")->required();
  auto* epochs_opt = tr->add_option("--epochs", epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  auto* lr_opt = tr->add_option("--lr", lr, "Learning rate")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate an estimator");
  EvalArgs ea;
  auto* which = ev->add_option_group("estimator");
  which->add_option("--ckpt", ea.ckpt, "Checkpoint");
  which->add_flag("--oracle", ea.oracle, "Ground-truth oracle");
  which->require_option(1);
  ev->add_option("--scenes", ea.scenes, "Dataset directory or directory of scene files")->required();
  ev->add_option("--out", ea.out, "Report JSON; histogram CSV goes next to it")->required();
  ev->add_option("--renders", ea.renders, "Renders per scene for scene directories")->check(CLI::PositiveNumber);
  ev->add_flag("--all-goals", ea.all_goals, "Every goal per render instead of round-robin");
  ev->add_option("--nearby", ea.nearby, "Nearby-view pairs")->check(CLI::NonNegativeNumber);
  ev->add_option("--stability", ea.stability, "Stability trajectories")->check(CLI::NonNegativeNumber);

  auto* sim = app.add_subcommand("simulate", "Run one guidance session and write its JSON-lines log");
  SimArgs sa;
  sim->add_option("--scene", sa.scene, "Scene file (default: config scene)");
  sim->add_option("--estimator", sa.estimator, "'oracle' or a checkpoint path");
  sim->add_option("--goal", sa.goal, "Goal view")->required()->check(CLI::IsMember({"RV", "LV", "LPV", "RPV", "LAA", "ESO"}));
  sim->add_option("--start", sa.start, "theta1,theta2,theta3,d4")->delimiter(',')->expected(4);
  sim->add_flag("--auto", sa.auto_mode, "Follow the guidance (otherwise read deltas from stdin)");
  sim->add_option("--log", sa.log, "Session log path");

  auto* srv = app.add_subcommand("serve", "Run the HTTP and WebSocket session service");
  std::string serve_ckpt, bind;
  int port = -1;
  double duration = 0;
  srv->add_option("--ckpt", serve_ckpt, "Checkpoint (replaces the configured estimator)");
  auto* bind_opt = srv->add_option("--bind", bind, "Bind address");
  srv->add_option("--port", port, "Port, 0 for any free port")->check(CLI::Range(0, 65535));
  srv->add_option("--duration", duration, "Stop after this many seconds (default: until signalled)");

  auto* rep = app.add_subcommand("report", "Summarize an eval report");
  fs::path report_in;
  std::string plot, csv;
  rep->add_option("report", report_in, "Report JSON from eval")->required();
  rep->add_option("--plot", plot, "Write SVG histograms here");
  rep->add_option("--csv", csv, "Write histogram CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << '\n' << app.help();
    return 2;
  }
  g.seed_set = seed_opt->count() > 0;
  const CLI::App* sub = app.get_subcommands().front();

  AppConfig c;
  std::optional<fs::path> path;
  try {
    path = resolve_config_path(g.config.empty() ? std::nullopt : std::optional<fs::path>(g.config));
    c = load_app_config(path);
    if (g.seed_set) apply_seed(c, g.seed);
    if (sub == gen) {
      if (scenes_opt->count() == 0) scenes = c.data.scenes;
      if (renders_opt->count() == 0) renders = c.data.renders_per_scene;
    }
    if (epochs_opt->count()) c.train.max_epochs = epochs;
    if (lr_opt->count()) c.train.learning_rate = lr;
    if (port >= 0) c.service.port = port;
    if (bind_opt->count()) c.service.bind = bind;
    c.sync_imaging();
    c.model.validate();
    c.service.validate();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  stanza(sub->get_name(), g, path, c);

  try {
    if (sub == gen) return run_gen_data(g, c, scenes, renders, gen_out, shard);
    if (sub == tr) return run_train(g, c, data_dir, val_dir, holdout, ckpt_out);
    if (sub == ev) return run_eval(g, c, ea);
    if (sub == sim) return run_simulate(g, c, sa);
    if (sub == srv) return run_serve(g, c, serve_ckpt, duration);
    if (sub == rep) return run_report(report_in, plot, csv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace icepilot
