#pragma once

#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "icepilot/estimator.hpp"

namespace icepilot {

enum class SessionStatus { Idle, Guiding, Reached, Failed };
std::string to_string(SessionStatus s);

/// Per-step magnitude limits. A delta exceeding any limit is scaled down
/// uniformly, so its direction and every sign are preserved.
struct StepLimits {
  bool enabled = true;
  double knob = 0.15;         // theta1, theta2 (rad)
  double rotation = 0.3;      // theta3 (rad)
  double translation = 5.0;   // d4 (mm)
};

JointDelta clamp_delta(const JointDelta& d, const StepLimits& limits);

struct GuidanceConfig {
  StepLimits limits{};
  int max_steps = 40;
  double reach_normalized_distance = 0.5;
  int reach_streak = 2;
  /// A guidance delta below these magnitudes means the next step would not
  /// move the catheter, so a satisfied state already counts as settled.
  JointDelta settle{0.015, 0.015, 0.03, 0.5};
  RenderParams render{};
  FanParams fan{};
  std::uint64_t noise_seed = 0;
};

nlohmann::json to_json(const GuidanceConfig& c);
GuidanceConfig guidance_config_from_json(const nlohmann::json& j);

/// Estimator output turned into joint-space advice.
struct GuidanceAdvice {
  QuantilePrediction current_home;  // pose of the home view seen from here
  JointDelta raw;                   // q50 guidance delta
  JointDelta clamped;
  double ik_residual = 0.0;  // weighted IK residual of the q50 poses
  /// Deltas from the q02 and q98 estimates; empty when IK cannot follow them.
  std::optional<JointDelta> lower, upper;
  /// Goal poses relative to the current transducer, per quantile level.
  std::array<Pose, 3> goal_in_current;
};

nlohmann::json to_json(const GuidanceAdvice& a);

struct GuidanceStep {
  int index = 0;  // steps since the current goal was set, from 1
  JointState before, after;
  JointDelta applied;
  std::optional<GuidanceAdvice> advice;  // guidance the step followed
  FanMetrics metrics;
  SessionStatus status = SessionStatus::Guiding;
  std::string diagnostics;
};

nlohmann::json to_json(const GuidanceStep& s);

/// Closed-loop guidance on one scene. Single writer: callers serialize access.
class GuidanceSession {
 public:
  /// Throws JointLimitError for out-of-limit start states.
  GuidanceSession(std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter, JointState start,
                  std::shared_ptr<const Estimator> estimator, GuidanceConfig config = {});

  const std::string& id() const { return id_; }
  SessionStatus status() const { return status_; }
  const JointState& joints() const { return joints_; }
  std::optional<ViewClass> goal() const { return goal_; }
  const SliceImage& slice() const { return slice_; }
  const std::vector<GuidanceStep>& history() const { return history_; }
  std::size_t goal_marker() const { return marker_; }
  const SceneBundle& bundle() const { return *bundle_; }
  const CatheterModel& catheter() const { return catheter_; }
  const GuidanceConfig& config() const { return config_; }
  const Estimator& estimator() const { return *estimator_; }
  /// Goal estimate from the home image (q02, q50, q98), set by set_goal.
  const std::optional<QuantilePrediction>& goal_estimate() const { return goal_estimate_; }
  std::string diagnostics() const { return diagnostics_; }

  /// Status becomes Guiding, or Reached at once when the current state
  /// already satisfies the goal and guidance asks for no motion.
  void set_goal(ViewClass goal);
  /// Guidance for the current state; no state change. Needs a goal.
  GuidanceAdvice advise() const;
  /// Auto mode: follow the clamped advice. Requires status Guiding.
  GuidanceStep step();
  /// Interactive mode: apply an operator move after clamping. Throws
  /// JointLimitError, leaving the state unchanged, when the clamped move
  /// leaves the joint limits. Allowed in every status; only Guiding updates status.
  GuidanceStep apply(const JointDelta& operator_delta);
  /// The clamped move cut back to the joint limits; what apply would accept.
  JointDelta feasible(const JointDelta& operator_delta) const;

  /// True pose of the transducer in the home frame and in the world.
  RigidTransform pose_home() const;
  RigidTransform pose_world() const;
  /// Fan metrics against the goal's target mesh.
  FanMetrics metrics() const;

  /// Appends the step records of this session as JSON lines.
  void write_log(std::ostream& out) const;

 private:
  SliceImage render_at(const JointState& q) const;
  QuantilePrediction query(const SliceImage& image, const RigidTransform& pose_home, ViewClass v) const;
  GuidanceAdvice advise_from(const QuantilePrediction& current_home) const;
  bool satisfied(const FanMetrics& m) const;
  bool settled(const JointDelta& d) const;
  GuidanceStep move(const JointDelta& delta, std::optional<GuidanceAdvice> advice);
  void fail(const std::string& why);

  std::shared_ptr<const SceneBundle> bundle_;
  CatheterModel catheter_;
  std::shared_ptr<const Estimator> estimator_;
  GuidanceConfig config_;
  std::string id_;
  JointState joints_;
  SliceImage slice_;
  SessionStatus status_ = SessionStatus::Idle;
  std::optional<ViewClass> goal_;
  std::optional<QuantilePrediction> goal_estimate_;
  std::vector<GuidanceStep> history_;
  std::size_t marker_ = 0;
  int steps_since_goal_ = 0;
  int streak_ = 0;
  std::string diagnostics_;
};

/// Predicted goal fan along a trajectory (Fig. 8 style stability check).
struct TrajectoryEstimate {
  std::vector<Vec3> apex;      // predicted goal transducer positions (home frame)
  std::vector<Vec3> endpoint;  // predicted far-edge centers (home frame)
  Vec3 apex_std = Vec3::Zero();
  Vec3 endpoint_std = Vec3::Zero();
};

nlohmann::json to_json(const TrajectoryEstimate& t);

TrajectoryEstimate estimate_state_trajectory(const SceneBundle& bundle, const CatheterModel& catheter,
                                             const Estimator& estimator, const std::vector<JointState>& trajectory,
                                             ViewClass goal, const GuidanceConfig& config = {});

/// n evenly spaced joint states from a to b inclusive (theta3 along the short arc).
std::vector<JointState> interpolate_joints(const JointState& a, const JointState& b, int n);

/// Per-axis population standard deviation.
Vec3 axis_std(const std::vector<Vec3>& points);

}  // namespace icepilot
