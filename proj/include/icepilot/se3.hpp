#pragma once

#include <Eigen/Dense>
#include <json.hpp>

namespace icepilot {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid-body transform in SE(3). Lengths in mm.
///
/// The constructor checks orthonormality (tolerance 1e-6, so transforms read
/// back from text files are accepted) and re-orthonormalizes the rotation so
/// downstream products stay on the manifold to machine precision.
class RigidTransform {
public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
  RigidTransform(const Mat3& rotation, const Vec3& translation);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  static RigidTransform from_rotation(const Mat3& r) { return {r, Vec3::Zero()}; }

  const Mat3& rotation() const noexcept { return rotation_; }
  const Vec3& translation() const noexcept { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 apply_direction(const Vec3& d) const { return rotation_ * d; }

  RigidTransform operator*(const RigidTransform& rhs) const;

  bool approx_equal(const RigidTransform& other, double tol) const;

private:
  struct Unchecked {};
  RigidTransform(const Mat3& r, const Vec3& t, Unchecked) : rotation_(r), translation_(t) {}
  friend RigidTransform invert(const RigidTransform& t);

  Mat3 rotation_;
  Vec3 translation_;
};

/// Position (mm) plus rotation vector (axis * angle, rad).
struct Pose {
  Vec3 position = Vec3::Zero();
  Vec3 orientation = Vec3::Zero();
};

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);

/// Target expressed in the coordinates of `frame`: invert(frame) * target.
RigidTransform relative_to_frame(const RigidTransform& frame, const RigidTransform& target);

Mat3 rotation_from_vector(const Vec3& rotvec);

/// Logarithm of a rotation. At angle pi the axis sign is canonicalized so the
/// first nonzero component is positive.
Vec3 rotation_to_vector(const Mat3& r);

RigidTransform pose_to_transform(const Pose& p);
Pose transform_to_pose(const RigidTransform& t);

Mat3 rotation_z(double angle);
Mat3 skew(const Vec3& v);

/// Largest of |R^T R - I| and |det R - 1|.
double orthonormality_error(const Mat3& r);

// Flat JSON arrays: transforms as row-major 3x3 followed by the translation
// (12 numbers), poses as [x, y, z, rx, ry, rz].
nlohmann::json to_json(const RigidTransform& t);
RigidTransform transform_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Pose& p);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Vec3& v);
Vec3 vec3_from_json(const nlohmann::json& j);

}  // namespace icepilot
