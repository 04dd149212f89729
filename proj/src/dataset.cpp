#include "icepilot/dataset.hpp"

#include "icepilot/errors.hpp"

namespace icepilot {

JointState StartBox::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> k(-knob, knob), r(-roll, roll), d(d4_min, d4_max);
  JointState q;
  q.theta1 = k(rng);
  q.theta2 = k(rng);
  q.theta3 = r(rng);
  q.d4 = d(rng);
  return q;
}

bool StartBox::contains(const JointState& q) const {
  return std::abs(q.theta1) <= knob && std::abs(q.theta2) <= knob && std::abs(q.theta3) <= roll &&
         q.d4 >= d4_min && q.d4 <= d4_max;
}

nlohmann::json to_json(const StartBox& b) {
  return {{"knob", b.knob}, {"roll", b.roll}, {"d4_min", b.d4_min}, {"d4_max", b.d4_max}};
}

StartBox start_box_from_json(const nlohmann::json& j) {
  StartBox b;
  b.knob = j.value("knob", b.knob);
  b.roll = j.value("roll", b.roll);
  b.d4_min = j.value("d4_min", b.d4_min);
  b.d4_max = j.value("d4_max", b.d4_max);
  if (b.knob < 0 || b.roll < 0 || b.d4_min > b.d4_max) throw ConfigError("invalid start box");
  return b;
}

nlohmann::json to_json(const DatasetSpec& s) {
  return {{"scenes", s.scenes},         {"renders_per_scene", s.renders_per_scene},
          {"seed", s.seed},             {"variation", to_json(s.variation)},
          {"render", to_json(s.render)}, {"fan", to_json(s.fan)},
          {"box", to_json(s.box)}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  try {
    s.scenes = j.value("scenes", s.scenes);
    s.renders_per_scene = j.value("renders_per_scene", s.renders_per_scene);
    s.seed = j.value("seed", s.seed);
    if (j.contains("variation")) s.variation = variation_from_json(j.at("variation"));
    if (j.contains("render")) s.render = render_params_from_json(j.at("render"));
    if (j.contains("fan")) s.fan = fan_params_from_json(j.at("fan"));
    if (j.contains("box")) s.box = start_box_from_json(j.at("box"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
  if (s.scenes < 1 || s.renders_per_scene < 0) throw ConfigError("dataset spec: need at least one scene");
  return s;
}

SceneBundle make_bundle(AnatomyScene scene, const CatheterModel& catheter) {
  SceneBundle b;
  b.targets = build_target_states(scene, catheter);
  b.scene = std::move(scene);
  return b;
}

std::array<PoseLabel, kQueryClassCount> labels_for(const SceneBundle& b, const CatheterModel& catheter,
                                                   const JointState& joints) {
  const RigidTransform current = forward_transform_home(catheter, joints);
  std::array<PoseLabel, kQueryClassCount> out;
  for (const auto& [view, target] : b.targets)
    out[class_index(view)] = PoseLabel::from_transform(relative_to_frame(current, pose_to_transform(target.pose)));
  return out;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::uint64_t stream) {
  std::uint64_t x = base ^ (0x9e3779b97f4a7c15ULL * (index + 1)) ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Dataset generate_dataset(const DatasetSpec& spec, const CatheterModel& catheter) {
  if (spec.scenes < 1 || spec.renders_per_scene < 0) throw ConfigError("dataset needs at least one scene");
  std::vector<SceneBundle> scenes;
  scenes.reserve(spec.scenes);
  for (int i = 0; i < spec.scenes; ++i)
    scenes.push_back(make_bundle(
        generate_scene(derive_seed(spec.seed, i, 1), spec.variation, catheter, spec.fan.depth), catheter));
  return render_dataset(std::move(scenes), spec, catheter);
}

Dataset render_dataset(std::vector<SceneBundle> scenes, const DatasetSpec& spec, const CatheterModel& catheter) {
  if (scenes.empty() || spec.renders_per_scene < 0) throw ConfigError("dataset needs at least one scene");
  Dataset ds;
  ds.scenes = std::move(scenes);
  ds.records.resize(ds.scenes.size() * static_cast<std::size_t>(spec.renders_per_scene));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < static_cast<int>(ds.records.size()); ++i) {
    const int si = i / spec.renders_per_scene;
    std::mt19937_64 rng(derive_seed(spec.seed, i, 2));
    SliceRecord& r = ds.records[i];
    const SceneBundle& b = ds.scenes[si];
    r.scene_index = si;
    r.joints = spec.box.sample(rng);
    const RigidTransform world = b.scene.world_to_home * forward_transform_home(catheter, r.joints);
    r.image = render_slice(b.scene, fan_from_transform(world, spec.fan), derive_seed(spec.seed, i, 3), spec.render);
    r.labels = labels_for(b, catheter, r.joints);
  }
  return ds;
}

}  // namespace icepilot
