#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "icepilot/catheter.hpp"
#include "icepilot/fan.hpp"
#include "icepilot/network.hpp"
#include "icepilot/phantom.hpp"

namespace icepilot {

/// Joint region a catheter may start from after home-view acquisition.
struct StartBox {
  double knob = 0.5;   // |theta1|, |theta2| bound (rad)
  double roll = 0.8;   // |theta3| bound (rad)
  double d4_min = 40.0;
  double d4_max = 60.0;

  JointState sample(std::mt19937_64& rng) const;
  bool contains(const JointState& q) const;
};

nlohmann::json to_json(const StartBox& b);
StartBox start_box_from_json(const nlohmann::json& j);

struct SceneBundle {
  AnatomyScene scene;
  TargetMap targets;
};

SceneBundle make_bundle(AnatomyScene scene, const CatheterModel& catheter);

/// Relative pose of every query class seen from the transducer at `joints`
/// (indexed by class_index; HOME is the inverse of the current home-frame pose).
std::array<PoseLabel, kQueryClassCount> labels_for(const SceneBundle& b, const CatheterModel& catheter,
                                                   const JointState& joints);

struct SliceRecord {
  SliceImage image;
  JointState joints;
  std::array<PoseLabel, kQueryClassCount> labels;
  int scene_index = 0;
};

struct DatasetSpec {
  int scenes = 10;
  int renders_per_scene = 100;
  std::uint64_t seed = 1;
  ScaleAndJitterParams variation{};
  RenderParams render{};
  FanParams fan{};
  StartBox box{};
};

nlohmann::json to_json(const DatasetSpec& s);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

struct Dataset {
  std::vector<SceneBundle> scenes;
  std::vector<SliceRecord> records;
};

/// Scene i uses a seed derived from (spec.seed, i); record noise seeds and
/// start states are derived the same way, so any record can be regenerated.
Dataset generate_dataset(const DatasetSpec& spec, const CatheterModel& catheter);
/// Records for given scenes; spec.scenes and spec.variation are ignored.
Dataset render_dataset(std::vector<SceneBundle> scenes, const DatasetSpec& spec, const CatheterModel& catheter);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::uint64_t stream = 0);

}  // namespace icepilot
