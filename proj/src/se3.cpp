#include "icepilot/se3.hpp"

#include <cassert>
#include <cmath>
#include <numbers>

#include "icepilot/errors.hpp"

namespace icepilot {
namespace {

constexpr double kConstructionTolerance = 1e-6;

Mat3 orthonormalize(const Mat3& r) {
  // Nearest rotation in the Frobenius sense.
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    out = u * svd.matrixV().transpose();
  }
  return out;
}

}  // namespace

double orthonormality_error(const Mat3& r) {
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(r.determinant() - 1.0));
}

RigidTransform::RigidTransform(const Mat3& rotation, const Vec3& translation)
    : translation_(translation) {
  if (!rotation.allFinite() || !translation.allFinite()) {
    throw InvalidTransformError("transform has non-finite entries");
  }
  if (orthonormality_error(rotation) > kConstructionTolerance) {
    throw InvalidTransformError("rotation is not orthonormal with det +1");
  }
  rotation_ = orthonormality_error(rotation) > 1e-14 ? orthonormalize(rotation) : rotation;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out(rotation_ * rhs.rotation_, rotation_ * rhs.translation_ + translation_,
                     Unchecked{});
  assert(orthonormality_error(out.rotation_) < 1e-9);
  return out;
}

bool RigidTransform::approx_equal(const RigidTransform& other, double tol) const {
  return (rotation_ - other.rotation_).cwiseAbs().maxCoeff() <= tol &&
         (translation_ - other.translation_).cwiseAbs().maxCoeff() <= tol;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) { return a * b; }

RigidTransform invert(const RigidTransform& t) {
  const Mat3 rt = t.rotation_.transpose();
  return RigidTransform(rt, -(rt * t.translation_), RigidTransform::Unchecked{});
}

RigidTransform relative_to_frame(const RigidTransform& frame, const RigidTransform& target) {
  return invert(frame) * target;
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

Mat3 rotation_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

Mat3 rotation_from_vector(const Vec3& rotvec) {
  const double theta = rotvec.norm();
  const Mat3 k = skew(rotvec);
  double a, b;  // sin(t)/t, (1 - cos(t))/t^2
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Mat3::Identity() + a * k + b * k * k;
}

Vec3 rotation_to_vector(const Mat3& r) {
  const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double s = 0.5 * v.norm();
  const double theta = std::atan2(s, c);

  if (theta < 1e-4) {
    const double t2 = theta * theta;
    return 0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * v;
  }
  if (s > 1e-6) {
    return (theta / (2.0 * s)) * v;
  }

  // Near pi the skew part vanishes; recover the axis from the symmetric part.
  const Mat3 b = 0.5 * (r + r.transpose()) - c * Mat3::Identity();
  int col = 0;
  b.diagonal().maxCoeff(&col);
  Vec3 axis = b.col(col) / std::sqrt(std::max(b(col, col), 1e-300));
  axis.normalize();
  if (axis.dot(v) < 0) axis = -axis;
  // Exactly pi up to rounding: the skew part carries no sign information.
  if (s < 1e-12) {
    for (int i = 0; i < 3; ++i) {
      if (std::abs(axis[i]) > 1e-12) {
        if (axis[i] < 0) axis = -axis;
        break;
      }
    }
  }
  return theta * axis;
}

RigidTransform pose_to_transform(const Pose& p) {
  return RigidTransform(rotation_from_vector(p.orientation), p.position);
}

Pose transform_to_pose(const RigidTransform& t) {
  return Pose{t.translation(), rotation_to_vector(t.rotation())};
}

nlohmann::json to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-element array");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

nlohmann::json to_json(const RigidTransform& t) {
  auto out = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) out.push_back(t.rotation()(i, k));
  for (int i = 0; i < 3; ++i) out.push_back(t.translation()[i]);
  return out;
}

RigidTransform transform_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 12) throw FormatError("expected a 12-element transform array");
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r(i, k) = j[i * 3 + k].get<double>();
  return RigidTransform(r, Vec3(j[9].get<double>(), j[10].get<double>(), j[11].get<double>()));
}

nlohmann::json to_json(const Pose& p) {
  return nlohmann::json::array({p.position.x(), p.position.y(), p.position.z(),
                                p.orientation.x(), p.orientation.y(), p.orientation.z()});
}

Pose pose_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 6) throw FormatError("expected a 6-element pose array");
  Pose p;
  for (int i = 0; i < 3; ++i) {
    p.position[i] = j[i].get<double>();
    p.orientation[i] = j[i + 3].get<double>();
  }
  return p;
}

}  // namespace icepilot
