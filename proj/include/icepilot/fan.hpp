#pragma once

#include <cstdint>
#include <vector>

#include "icepilot/phantom.hpp"
#include "icepilot/se3.hpp"

namespace icepilot {

struct FanParams {
  double sector_angle = 1.571;  // rad
  double depth = 90.0;          // mm
};

/// Planar imaging sector. Direction runs from the apex to the center of the
/// far edge; the fan plane is spanned by direction and lateral().
struct FanGeometry {
  Vec3 apex = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  Vec3 plane_normal = Vec3::UnitX();
  double sector_angle = 1.571;
  double depth = 90.0;

  Vec3 lateral() const { return direction.cross(plane_normal); }
  Vec3 far_edge_center() const { return apex + depth * direction; }
};

/// Direction is the pose's +z axis and the plane normal its +x axis.
FanGeometry fan_from_transform(const RigidTransform& pose, const FanParams& params = {});
FanGeometry fan_from_pose(const Pose& pose, const FanParams& params = {});
FanGeometry transform_fan(const RigidTransform& t, const FanGeometry& fan);

/// Perpendicular distance (mm) from the mesh center to the fan plane.
double real_distance(const FanGeometry& fan, const VolumeMesh& mesh);
/// real_distance over the mesh half-extent along the plane normal; 1.0 is the
/// volume edge. Throws DegenerateExtentError when the half-extent < 0.1 mm.
double normalized_distance(const FanGeometry& fan, const VolumeMesh& mesh);
/// Center projection inside the sector and normalized distance below 1.
bool fan_in_volume(const FanGeometry& fan, const VolumeMesh& mesh);
/// Only the sector half of fan_in_volume.
bool center_projects_into_sector(const FanGeometry& fan, const VolumeMesh& mesh);

struct FanMetrics {
  bool in_volume = false;
  double real_distance = 0.0;
  double normalized_distance = 0.0;
};

FanMetrics fan_metrics(const FanGeometry& fan, const VolumeMesh& mesh);
nlohmann::json to_json(const FanMetrics& m);

struct RenderParams {
  int width = 224;
  int height = 224;
  double speckle_sigma = 0.25;
  double background = 0.40;
  double edge_gain = 0.35;
  double edge_width_mm = 1.5;
};

nlohmann::json to_json(const FanParams& p);
FanParams fan_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RenderParams& p);
RenderParams render_params_from_json(const nlohmann::json& j);

/// Rendered fan-sector image. Intensities in [0, 1], exactly 0 outside the
/// sector. labels holds 0 for background or 1 + Structure for the innermost
/// mesh containing the sample point.
struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<float> intensity;
  std::vector<std::uint8_t> labels;
  Pose pose;  // world pose of the transducer
  std::uint64_t scene_seed = 0;
  std::uint64_t noise_seed = 0;

  float at(int row, int col) const { return intensity[static_cast<std::size_t>(row) * width + col]; }
};

inline constexpr std::uint8_t kBackgroundLabel = 0;

double base_echogenicity(Structure s);

/// Maps a pixel center to the in-plane offsets (lateral, axial) in mm.
struct PixelGeometry {
  double lateral;
  double axial;
  bool in_sector;
};
PixelGeometry pixel_geometry(const FanGeometry& fan, int width, int height, int row, int col);

/// OpenMP kernel; rows are rendered in parallel with per-pixel counter-based noise.
SliceImage render_slice(const AnatomyScene& scene, const FanGeometry& fan, std::uint64_t noise_seed,
                        const RenderParams& params = {});
/// Single-threaded reference with the same per-pixel model.
SliceImage render_slice_reference(const AnatomyScene& scene, const FanGeometry& fan,
                                  std::uint64_t noise_seed, const RenderParams& params = {});

}  // namespace icepilot
