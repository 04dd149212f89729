#include "icepilot/catheter.hpp"

#include <array>
#include <cmath>
#include <string>

#include "icepilot/dls.hpp"
#include "icepilot/errors.hpp"

namespace icepilot {
namespace {

constexpr double kPi = std::numbers::pi;

Eigen::VectorXd pose_residual(const CatheterModel& model, const RigidTransform& target,
                              const RigidTransform& actual) {
  Eigen::VectorXd r(6);
  r.head<3>() = model.ik.position_weight * (actual.translation() - target.translation());
  r.tail<3>() = model.ik.orientation_weight *
                rotation_to_vector(target.rotation().transpose() * actual.rotation());
  return r;
}

// Bend seeds: neutral first, then eight directions around the bend plane.
std::array<JointState, 9> ik_seeds(const CatheterModel& model) {
  std::array<JointState, 9> seeds;
  seeds[0] = JointState{0.0, 0.0, 0.0, model.home.d4};
  for (int k = 0; k < 8; ++k) {
    const double phi = k * kPi / 4.0;
    seeds[k + 1] = JointState{std::cos(phi), std::sin(phi), 0.0, model.home.d4};
  }
  return seeds;
}

}  // namespace

void CatheterModel::validate() const {
  if (!(bend_section_length > 0.0)) throw ConfigError("bend_section_length must be > 0");
  if (!(limits.bend > 0.0) || !(limits.d4_max > 0.0)) throw ConfigError("joint limits must be > 0");
  if (ik.max_iterations < 1) throw ConfigError("ik.max_iterations must be >= 1");
  if (!within_limits(*this, home)) throw ConfigError("home joint state outside limits");
}

RigidTransform CatheterModel::home_transform() const { return forward_transform(*this, home); }

double wrap_angle(double angle) {
  double r = std::remainder(angle, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

bool within_limits(const CatheterModel& model, const JointState& j) {
  const double eps = 1e-12;
  return std::abs(j.theta1) <= model.limits.bend + eps &&
         std::abs(j.theta2) <= model.limits.bend + eps && j.theta3 > -kPi - eps &&
         j.theta3 <= kPi + eps && j.d4 >= -eps && j.d4 <= model.limits.d4_max + eps;
}

void check_limits(const CatheterModel& model, const JointState& j) {
  auto fail = [](const std::string& name, double v) {
    throw JointLimitError("joint " + name + " = " + std::to_string(v) + " outside limits");
  };
  const double eps = 1e-12;
  if (!std::isfinite(j.theta1) || std::abs(j.theta1) > model.limits.bend + eps) fail("theta1", j.theta1);
  if (!std::isfinite(j.theta2) || std::abs(j.theta2) > model.limits.bend + eps) fail("theta2", j.theta2);
  if (!std::isfinite(j.theta3) || j.theta3 <= -kPi - eps || j.theta3 > kPi + eps) fail("theta3", j.theta3);
  if (!std::isfinite(j.d4) || j.d4 < -eps || j.d4 > model.limits.d4_max + eps) fail("d4", j.d4);
}

JointState clip_to_limits(const CatheterModel& model, const JointState& j) {
  return {std::clamp(j.theta1, -model.limits.bend, model.limits.bend),
          std::clamp(j.theta2, -model.limits.bend, model.limits.bend), wrap_angle(j.theta3),
          std::clamp(j.d4, 0.0, model.limits.d4_max)};
}

JointState apply_delta(const JointState& j, const JointDelta& d) {
  return {j.theta1 + d.theta1, j.theta2 + d.theta2, wrap_angle(j.theta3 + d.theta3), j.d4 + d.d4};
}

JointDelta joint_difference(const JointState& a, const JointState& b) {
  return {a.theta1 - b.theta1, a.theta2 - b.theta2, wrap_angle(a.theta3 - b.theta3), a.d4 - b.d4};
}

RigidTransform forward_transform(const CatheterModel& model, const JointState& j) {
  const double length = model.bend_section_length;
  const double t1 = j.theta1, t2 = j.theta2;
  const double tb2 = t1 * t1 + t2 * t2;
  const double tb = std::sqrt(tb2);

  // (1 - cos t)/t^2 and sin(t)/t, series below 1e-4 so FK stays smooth at t -> 0.
  double one_minus_cos_over_t2, sin_over_t;
  if (tb < 1e-4) {
    one_minus_cos_over_t2 = 0.5 - tb2 / 24.0;
    sin_over_t = 1.0 - tb2 / 6.0;
  } else {
    one_minus_cos_over_t2 = (1.0 - std::cos(tb)) / tb2;
    sin_over_t = std::sin(tb) / tb;
  }
  const Vec3 arc_tip(length * one_minus_cos_over_t2 * t1, length * one_minus_cos_over_t2 * t2,
                     length * sin_over_t);
  // Bending toward +x (theta1) is a rotation about +y; toward +y (theta2) about -x.
  const Mat3 bend = rotation_from_vector(Vec3(-t2, t1, 0.0));
  const Mat3 roll = rotation_z(j.theta3);
  return RigidTransform(roll * bend, roll * arc_tip + Vec3(0.0, 0.0, j.d4));
}

Pose forward_kinematics(const CatheterModel& model, const JointState& j) {
  check_limits(model, j);
  return transform_to_pose(forward_transform(model, j));
}

RigidTransform forward_transform_home(const CatheterModel& model, const JointState& j) {
  return relative_to_frame(model.home_transform(), forward_transform(model, j));
}

double weighted_pose_error(const CatheterModel& model, const RigidTransform& a,
                           const RigidTransform& b) {
  return pose_residual(model, a, b).norm();
}

IkResult solve_ik_nearest(const CatheterModel& model, const RigidTransform& target) {
  const auto residual = [&](const Eigen::VectorXd& x) {
    const JointState j{x[0], x[1], x[2], x[3]};
    return pose_residual(model, target, forward_transform(model, j));
  };
  const auto project = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    const JointState j = clip_to_limits(model, JointState{x[0], x[1], x[2], x[3]});
    return j.as_vector();
  };

  detail::DlsOptions options;
  options.max_iterations = model.ik.max_iterations;
  options.initial_damping = model.ik.initial_damping;
  options.jacobian_step = model.ik.jacobian_step;

  IkResult best;
  best.residual = std::numeric_limits<double>::infinity();
  const auto seeds = ik_seeds(model);
  for (const JointState& seed : seeds) {
    const auto res = detail::damped_least_squares(residual, project, seed.as_vector(), options);
    ++best.seeds_tried;
    const double r = std::sqrt(res.cost);
    if (r < best.residual) {
      best.residual = r;
      best.joints = JointState::from_vector(res.x);
      best.iterations = res.iterations;
    }
    // A solve well inside tolerance means the target is exactly reachable; stop.
    if (best.residual < 1e-6) break;
  }
  best.joints.theta3 = wrap_angle(best.joints.theta3);
  return best;
}

IkResult solve_ik(const CatheterModel& model, const RigidTransform& target) {
  const double reach = model.limits.d4_max + model.bend_section_length;
  if (target.translation().norm() > reach) {
    throw UnreachableError("target lies outside the catheter workspace",
                           model.ik.position_weight * (target.translation().norm() - reach));
  }
  IkResult best = solve_ik_nearest(model, target);
  if (!(best.residual < model.ik.tolerance)) {
    throw UnreachableError("IK did not converge (best weighted residual " +
                               std::to_string(best.residual) + ")",
                           best.residual);
  }
  return best;
}

JointState inverse_kinematics(const CatheterModel& model, const Pose& s) {
  return solve_ik(model, pose_to_transform(s)).joints;
}

JointState inverse_kinematics_home(const CatheterModel& model, const RigidTransform& s_home) {
  return solve_ik(model, model.home_transform() * s_home).joints;
}

JointDelta joint_delta(const CatheterModel& model, const Pose& s_i, const Pose& s_j) {
  const JointState ji = inverse_kinematics_home(model, pose_to_transform(s_i));
  const JointState jj = inverse_kinematics_home(model, pose_to_transform(s_j));
  return joint_difference(ji, jj);
}

JointDelta guidance_delta(const CatheterModel& model, const RigidTransform& s_home_goal,
                          const RigidTransform& s_curr_home) {
  const JointState goal = inverse_kinematics_home(model, s_home_goal);
  const JointState current = inverse_kinematics_home(model, invert(s_curr_home));
  return joint_difference(goal, current);
}

JointDelta nearest_guidance_delta(const CatheterModel& model, const RigidTransform& s_home_goal,
                                  const RigidTransform& s_curr_home, double* residual) {
  const IkResult goal = solve_ik_nearest(model, model.home_transform() * s_home_goal);
  const IkResult current = solve_ik_nearest(model, model.home_transform() * invert(s_curr_home));
  if (residual) *residual = std::max(goal.residual, current.residual);
  return joint_difference(goal.joints, current.joints);
}

JointDelta guidance_delta(const CatheterModel& model, const Pose& s_home_goal,
                          const Pose& s_curr_home) {
  return guidance_delta(model, pose_to_transform(s_home_goal), pose_to_transform(s_curr_home));
}

nlohmann::json to_json(const JointState& j) {
  return nlohmann::json::array({j.theta1, j.theta2, j.theta3, j.d4});
}

JointState joints_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("expected [theta1, theta2, theta3, d4]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

nlohmann::json to_json(const JointDelta& d) {
  return nlohmann::json::array({d.theta1, d.theta2, d.theta3, d.d4});
}

JointDelta delta_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("expected [theta1, theta2, theta3, d4]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

nlohmann::json to_json(const CatheterModel& m) {
  return {{"bend_section_length", m.bend_section_length},
          {"limit_bend", m.limits.bend},
          {"d4_max", m.limits.d4_max},
          {"home", to_json(m.home)},
          {"ik",
           {{"max_iterations", m.ik.max_iterations},
            {"damping", m.ik.initial_damping},
            {"tolerance", m.ik.tolerance},
            {"position_weight", m.ik.position_weight},
            {"orientation_weight", m.ik.orientation_weight},
            {"jacobian_step", m.ik.jacobian_step}}}};
}

CatheterModel catheter_from_json(const nlohmann::json& j) {
  CatheterModel m;
  m.bend_section_length = j.value("bend_section_length", m.bend_section_length);
  m.limits.bend = j.value("limit_bend", m.limits.bend);
  m.limits.d4_max = j.value("d4_max", m.limits.d4_max);
  if (j.contains("home")) m.home = joints_from_json(j.at("home"));
  if (j.contains("ik")) {
    const auto& ik = j.at("ik");
    m.ik.max_iterations = ik.value("max_iterations", m.ik.max_iterations);
    m.ik.initial_damping = ik.value("damping", m.ik.initial_damping);
    m.ik.tolerance = ik.value("tolerance", m.ik.tolerance);
    m.ik.position_weight = ik.value("position_weight", m.ik.position_weight);
    m.ik.orientation_weight = ik.value("orientation_weight", m.ik.orientation_weight);
    m.ik.jacobian_step = ik.value("jacobian_step", m.ik.jacobian_step);
  }
  m.validate();
  return m;
}

}  // namespace icepilot
