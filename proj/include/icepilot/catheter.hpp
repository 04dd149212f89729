#pragma once

#include <numbers>

#include <Eigen/Dense>

#include "icepilot/se3.hpp"

namespace icepilot {

/// 4-DOF ICE catheter configuration. Angles in rad, translation in mm.
struct JointState {
  double theta1 = 0.0;  // anterior-posterior knob
  double theta2 = 0.0;  // right-left knob
  double theta3 = 0.0;  // bulk rotation
  double d4 = 0.0;      // axial translation

  Eigen::Vector4d as_vector() const { return {theta1, theta2, theta3, d4}; }
  static JointState from_vector(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }
};

/// Signed joint-space move; theta3 is kept in (-pi, pi].
struct JointDelta {
  double theta1 = 0.0;
  double theta2 = 0.0;
  double theta3 = 0.0;
  double d4 = 0.0;

  Eigen::Vector4d as_vector() const { return {theta1, theta2, theta3, d4}; }
  static JointDelta from_vector(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }
  JointDelta operator-() const { return {-theta1, -theta2, -theta3, -d4}; }
};

struct JointLimits {
  double bend = 2.0 * std::numbers::pi / 3.0;
  double d4_max = 120.0;
};

struct IkSettings {
  int max_iterations = 200;
  double initial_damping = 1e-3;
  double tolerance = 0.1;           // weighted residual counted as converged
  double position_weight = 1.0;     // per mm
  double orientation_weight = 20.0; // per rad
  double jacobian_step = 1e-5;
};

/// Constant-curvature single-section catheter. Immutable once built.
struct CatheterModel {
  double bend_section_length = 60.0;
  JointLimits limits;
  IkSettings ik;
  /// Neutral joint state that realizes the home view.
  JointState home{0.0, 0.0, 0.0, 50.0};

  void validate() const;
  /// Pose of the home-view transducer in the catheter base frame.
  RigidTransform home_transform() const;
};

double wrap_angle(double angle);

bool within_limits(const CatheterModel& model, const JointState& j);
/// Throws JointLimitError naming the offending joint.
void check_limits(const CatheterModel& model, const JointState& j);
JointState clip_to_limits(const CatheterModel& model, const JointState& j);

JointState apply_delta(const JointState& j, const JointDelta& d);
/// a - b with theta3 wrapped.
JointDelta joint_difference(const JointState& a, const JointState& b);

/// Tip pose in the catheter base frame: translate d4 along +z, rotate theta3
/// about +z, then bend through a constant-curvature arc.
RigidTransform forward_transform(const CatheterModel& model, const JointState& j);
Pose forward_kinematics(const CatheterModel& model, const JointState& j);
/// Tip pose expressed in the home-view frame.
RigidTransform forward_transform_home(const CatheterModel& model, const JointState& j);

struct IkResult {
  JointState joints;
  double residual = 0.0;  // weighted pose residual
  int iterations = 0;
  int seeds_tried = 0;
};

/// Damped least-squares IK on the weighted 6-D pose error; target in the base
/// frame. Throws UnreachableError when no seed converges.
IkResult solve_ik(const CatheterModel& model, const RigidTransform& target);
/// Same search without the convergence check: the least-residual joint state.
IkResult solve_ik_nearest(const CatheterModel& model, const RigidTransform& target);
JointState inverse_kinematics(const CatheterModel& model, const Pose& s);
/// IK for a pose expressed in the home-view frame.
JointState inverse_kinematics_home(const CatheterModel& model, const RigidTransform& s_home);

/// Weighted residual between two poses, using the IK weights.
double weighted_pose_error(const CatheterModel& model, const RigidTransform& a,
                           const RigidTransform& b);

/// IK(s_i) - IK(s_j) for two poses in the home frame.
JointDelta joint_delta(const CatheterModel& model, const Pose& s_i, const Pose& s_j);

/// Move from the current view to the goal view. `s_curr_home` is the pose of the
/// home view seen from the current view; it is inverted so both IK calls share
/// the home frame.
JointDelta guidance_delta(const CatheterModel& model, const Pose& s_home_goal,
                          const Pose& s_curr_home);
JointDelta guidance_delta(const CatheterModel& model, const RigidTransform& s_home_goal,
                          const RigidTransform& s_curr_home);
/// guidance_delta with least-squares IK, for estimated poses that may sit off
/// the reachable manifold. `residual` receives the larger IK residual.
JointDelta nearest_guidance_delta(const CatheterModel& model, const RigidTransform& s_home_goal,
                                  const RigidTransform& s_curr_home, double* residual = nullptr);

nlohmann::json to_json(const JointState& j);
JointState joints_from_json(const nlohmann::json& j);
nlohmann::json to_json(const JointDelta& d);
JointDelta delta_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CatheterModel& m);
CatheterModel catheter_from_json(const nlohmann::json& j);

}  // namespace icepilot
