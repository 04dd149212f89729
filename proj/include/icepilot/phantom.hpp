#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icepilot/catheter.hpp"
#include "icepilot/se3.hpp"

namespace icepilot {

/// Clinically named target views plus the home view.
enum class ViewClass : int { RV = 0, LV, LPV, RPV, LAA, ESO, HOME };

inline constexpr int kTargetViewCount = 6;
inline constexpr int kQueryClassCount = 7;  // targets + HOME
inline constexpr std::array<ViewClass, kTargetViewCount> kTargetViews{
    ViewClass::RV, ViewClass::LV, ViewClass::LPV, ViewClass::RPV, ViewClass::LAA, ViewClass::ESO};

std::string to_string(ViewClass v);
/// Accepts the names above, case-insensitive. Throws ConfigError.
ViewClass view_class_from_string(const std::string& s);
/// One-hot of size 6; HOME is not representable and throws.
std::array<float, kTargetViewCount> one_hot(ViewClass v);

/// Anatomical structures a scene may carry.
enum class Structure : int { RA = 0, RV, LV, LA, LAA, LPV, RPV, ESO };
inline constexpr int kStructureCount = 8;

std::string to_string(Structure s);
Structure structure_from_string(const std::string& s);
/// Mesh that defines correctness for a view. HOME uses the RV it images.
Structure target_structure(ViewClass v);

struct Triangle {
  std::array<int, 3> v;
};

/// A labeled closed volume: an ellipsoid or a watertight triangle mesh.
struct VolumeMesh {
  enum class Kind { Ellipsoid, TriMesh };

  Structure label = Structure::RA;
  Kind kind = Kind::Ellipsoid;
  Vec3 center = Vec3::Zero();
  // Ellipsoid
  Vec3 semi_axes = Vec3::Ones();
  Mat3 rotation = Mat3::Identity();
  // Triangle mesh
  std::vector<Vec3> vertices;
  std::vector<Triangle> faces;
  /// Set when the center was inferred from other structures.
  bool center_estimated = false;

  static VolumeMesh ellipsoid(Structure label, const Vec3& center, const Vec3& semi_axes,
                              const Mat3& rotation = Mat3::Identity());
  static VolumeMesh trimesh(Structure label, const Vec3& center, std::vector<Vec3> vertices,
                            std::vector<Triangle> faces);

  /// Ellipsoid shape matrix M with (p-c)^T M (p-c) <= 1 inside.
  Mat3 shape_matrix() const;
  /// Radius of the smallest center-based sphere enclosing the mesh.
  double bounding_radius() const;
  double volume_estimate() const;
  /// Every edge shared by exactly two faces with opposite orientation.
  bool watertight() const;
};

/// Tessellates an ellipsoid into a closed triangle mesh (UV sphere).
VolumeMesh tessellate(const VolumeMesh& ellipsoid, int rings = 16, int segments = 32);

/// Inside test; boundary points within 1e-9 count as inside. Throws
/// NonWatertightError for malformed triangle meshes.
bool point_in_mesh(const VolumeMesh& mesh, const Vec3& p);

/// Distance from the center to the surface along +dir and -dir, averaged.
double half_extent_along(const VolumeMesh& mesh, const Vec3& dir);

struct ScaleAndJitterParams {
  double scale_min = 0.9;
  double scale_max = 1.1;
  double center_jitter_mm = 4.0;
  double rotation_jitter_rad = 0.1;
  /// Place the scene under a random world frame, as separate acquisitions do.
  bool randomize_world = true;

  static ScaleAndJitterParams none() { return {1.0, 1.0, 0.0, 0.0, false}; }
  void validate() const;
};

nlohmann::json to_json(const ScaleAndJitterParams& p);
ScaleAndJitterParams variation_from_json(const nlohmann::json& j);

struct AnatomyScene {
  std::vector<VolumeMesh> meshes;
  RigidTransform world_to_home;  // pose of the home-view transducer in world
  Vec3 ra_interior_point = Vec3::Zero();  // world frame
  std::uint64_t seed = 0;

  bool has(Structure s) const;
  const VolumeMesh& mesh(Structure s) const;
  VolumeMesh& mesh(Structure s);
  /// Centers expressed in the home-view frame.
  Vec3 center_in_home(Structure s) const;
};

/// Canonical template layout, home frame == world.
AnatomyScene canonical_scene();

/// Rigidly moves every element of the scene (meshes, home frame, RA point).
AnatomyScene transform_scene(const AnatomyScene& scene, const RigidTransform& t);

/// Deterministic per seed. Retries up to 20 derived seeds when the jittered
/// layout breaks reachability, then throws SceneInfeasibleError.
AnatomyScene generate_scene(std::uint64_t seed, const ScaleAndJitterParams& variation,
                            const CatheterModel& catheter = {}, double fan_depth = 90.0);

struct MissingCenters {
  Vec3 ra, rv, lv;
};

/// Transfers RA/RV/LV centers from a reference scene through a similarity
/// frame anchored at the LA center (x toward the LAA center, scale = LA-LAA
/// distance, y toward the RPV center).
MissingCenters estimate_missing_centers(const AnatomyScene& reference, const AnatomyScene& subject);
/// Adds estimated RA/RV/LV ellipsoids (reference shapes carried through the
/// same similarity frame) to a subject scene that lacks them.
AnatomyScene complete_missing_structures(const AnatomyScene& reference, const AnatomyScene& subject);

struct TargetState {
  enum class Source { Constructed, EstimatedCenter };

  ViewClass view = ViewClass::HOME;
  Pose pose;  // in the home-view frame
  JointState joints;
  Source source = Source::Constructed;
};

using TargetMap = std::map<ViewClass, TargetState>;

/// One target per view (HOME included, as the identity pose). Each target's
/// fan direction passes through the mesh center and its pose comes from a
/// joint state, so it is reachable by construction; among the aligned poses the
/// one whose transducer lies closest to the RA interior point is chosen.
TargetMap build_target_states(const AnatomyScene& scene, const CatheterModel& catheter);

/// Cosine between the pose's fan direction (+z) and the direction to `point`.
double fan_alignment(const RigidTransform& pose, const Vec3& point);

nlohmann::json to_json(const AnatomyScene& scene);
AnatomyScene scene_from_json(const nlohmann::json& j);

}  // namespace icepilot
