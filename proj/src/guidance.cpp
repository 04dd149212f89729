#include "icepilot/guidance.hpp"

#include <bit>
#include <cmath>
#include <cstdio>

#include "icepilot/errors.hpp"

namespace icepilot {

std::string to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::Idle: return "Idle";
    case SessionStatus::Guiding: return "Guiding";
    case SessionStatus::Reached: return "Reached";
    case SessionStatus::Failed: return "Failed";
  }
  return "?";
}

JointDelta clamp_delta(const JointDelta& d, const StepLimits& limits) {
  if (!limits.enabled) return d;
  double scale = 1.0;
  auto limit = [&](double v, double cap) {
    if (std::abs(v) > cap) scale = std::min(scale, cap / std::abs(v));
  };
  limit(d.theta1, limits.knob);
  limit(d.theta2, limits.knob);
  limit(d.theta3, limits.rotation);
  limit(d.d4, limits.translation);
  return {d.theta1 * scale, d.theta2 * scale, d.theta3 * scale, d.d4 * scale};
}

nlohmann::json to_json(const GuidanceConfig& c) {
  return {{"limits",
           {{"enabled", c.limits.enabled},
            {"knob", c.limits.knob},
            {"rotation", c.limits.rotation},
            {"translation", c.limits.translation}}},
          {"max_steps", c.max_steps},
          {"reach_normalized_distance", c.reach_normalized_distance},
          {"reach_streak", c.reach_streak},
          {"settle", to_json(c.settle)},
          {"render", to_json(c.render)},
          {"fan", to_json(c.fan)},
          {"noise_seed", c.noise_seed}};
}

GuidanceConfig guidance_config_from_json(const nlohmann::json& j) {
  GuidanceConfig c;
  try {
    if (j.contains("limits")) {
      const auto& l = j.at("limits");
      c.limits.enabled = l.value("enabled", c.limits.enabled);
      c.limits.knob = l.value("knob", c.limits.knob);
      c.limits.rotation = l.value("rotation", c.limits.rotation);
      c.limits.translation = l.value("translation", c.limits.translation);
    }
    c.max_steps = j.value("max_steps", c.max_steps);
    c.reach_normalized_distance = j.value("reach_normalized_distance", c.reach_normalized_distance);
    c.reach_streak = j.value("reach_streak", c.reach_streak);
    if (j.contains("settle")) c.settle = delta_from_json(j.at("settle"));
    if (j.contains("render")) c.render = render_params_from_json(j.at("render"));
    if (j.contains("fan")) c.fan = fan_params_from_json(j.at("fan"));
    c.noise_seed = j.value("noise_seed", c.noise_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("guidance config: ") + e.what());
  }
  if (c.limits.knob <= 0 || c.limits.rotation <= 0 || c.limits.translation <= 0 || c.max_steps < 1 ||
      c.reach_streak < 1 || c.render.width < 1 || c.render.height < 1 || c.fan.depth <= 0 || c.fan.sector_angle <= 0)
    throw ConfigError("guidance config out of range");
  return c;
}

nlohmann::json to_json(const GuidanceAdvice& a) {
  nlohmann::json j{{"current_home", to_json(a.current_home)},
                   {"delta", to_json(a.raw)},
                   {"clamped", to_json(a.clamped)},
                   {"ik_residual", a.ik_residual},
                   {"lower", a.lower ? to_json(*a.lower) : nlohmann::json(nullptr)},
                   {"upper", a.upper ? to_json(*a.upper) : nlohmann::json(nullptr)}};
  j["goal_in_current"] = {{"q02", to_json(a.goal_in_current[0])},
                          {"q50", to_json(a.goal_in_current[1])},
                          {"q98", to_json(a.goal_in_current[2])}};
  return j;
}

nlohmann::json to_json(const GuidanceStep& s) {
  return {{"step_index", s.index},
          {"joints_before", to_json(s.before)},
          {"joints", to_json(s.after)},
          {"delta", to_json(s.applied)},
          {"advice", s.advice ? to_json(*s.advice) : nlohmann::json(nullptr)},
          {"metrics", to_json(s.metrics)},
          {"status", to_string(s.status)},
          {"diagnostics", s.diagnostics}};
}

namespace {

std::uint64_t joints_hash(std::uint64_t seed, const JointState& q) {
  std::uint64_t h = seed;
  for (double v : {q.theta1, q.theta2, q.theta3, q.d4}) h = derive_seed(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace

GuidanceSession::GuidanceSession(std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter, JointState start,
                                 std::shared_ptr<const Estimator> estimator, GuidanceConfig config)
    : bundle_(std::move(bundle)),
      catheter_(std::move(catheter)),
      estimator_(std::move(estimator)),
      config_(std::move(config)),
      joints_(start) {
  check_limits(catheter_, start);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(joints_hash(bundle_->scene.seed, start)));
  id_ = buf;
  slice_ = render_at(joints_);
}

SliceImage GuidanceSession::render_at(const JointState& q) const {
  RenderParams params = config_.render;
  if (const auto size = estimator_->input_size()) params.width = params.height = *size;
  const RigidTransform world = bundle_->scene.world_to_home * forward_transform_home(catheter_, q);
  return render_slice(bundle_->scene, fan_from_transform(world, config_.fan),
                      joints_hash(config_.noise_seed ^ bundle_->scene.seed, q), params);
}

RigidTransform GuidanceSession::pose_home() const { return forward_transform_home(catheter_, joints_); }

RigidTransform GuidanceSession::pose_world() const { return bundle_->scene.world_to_home * pose_home(); }

FanMetrics GuidanceSession::metrics() const {
  const ViewClass g = goal_.value_or(ViewClass::HOME);
  return fan_metrics(fan_from_transform(pose_world(), config_.fan), bundle_->scene.mesh(target_structure(g)));
}

QuantilePrediction GuidanceSession::query(const SliceImage& image, const RigidTransform& pose_home,
                                          ViewClass v) const {
  EstimatorQuery q;
  q.bundle = bundle_.get();
  q.current_home = pose_home;
  q.image = &image;
  q.target = v;
  return estimator_->estimate(q);
}

bool GuidanceSession::satisfied(const FanMetrics& m) const {
  return m.in_volume && m.normalized_distance < config_.reach_normalized_distance;
}

bool GuidanceSession::settled(const JointDelta& d) const {
  return std::abs(d.theta1) < config_.settle.theta1 && std::abs(d.theta2) < config_.settle.theta2 &&
         std::abs(d.theta3) < config_.settle.theta3 && std::abs(d.d4) < config_.settle.d4;
}

void GuidanceSession::fail(const std::string& why) {
  status_ = SessionStatus::Failed;
  diagnostics_ = why;
}

GuidanceAdvice GuidanceSession::advise_from(const QuantilePrediction& current) const {
  GuidanceAdvice a;
  a.current_home = current;
  const QuantilePrediction& goal = *goal_estimate_;
  // Estimates need not lie on the reachable manifold; follow the nearest
  // reachable poses and report how far off they were.
  a.raw = nearest_guidance_delta(catheter_, pose_to_transform(goal.q50()), pose_to_transform(current.q50()),
                                 &a.ik_residual);
  a.clamped = clamp_delta(a.raw, config_.limits);
  for (int l : {0, 2}) {
    double r = 0.0;
    const JointDelta d =
        nearest_guidance_delta(catheter_, pose_to_transform(goal.at(l)), pose_to_transform(current.at(l)), &r);
    if (r < catheter_.ik.tolerance) (l == 0 ? a.lower : a.upper) = d;
  }
  for (int l = 0; l < 3; ++l)
    a.goal_in_current[l] = transform_to_pose(pose_to_transform(current.at(l)) * pose_to_transform(goal.at(l)));
  return a;
}

void GuidanceSession::set_goal(ViewClass goal) {
  goal_ = goal;
  marker_ = history_.size();
  steps_since_goal_ = 0;
  streak_ = 0;
  diagnostics_.clear();
  status_ = SessionStatus::Guiding;
  try {
    const SliceImage home = render_at(catheter_.home);
    goal_estimate_ = query(home, forward_transform_home(catheter_, catheter_.home), goal);
    if (satisfied(metrics()) && settled(advise().raw)) status_ = SessionStatus::Reached;
  } catch (const Error& e) {
    fail(e.what());
    throw EstimatorFailure(std::string("set_goal failed: ") + e.what());
  }
}

GuidanceAdvice GuidanceSession::advise() const {
  if (!goal_ || !goal_estimate_) throw SessionStateError("no goal set");
  return advise_from(query(slice_, pose_home(), ViewClass::HOME));
}

GuidanceStep GuidanceSession::step() {
  if (status_ != SessionStatus::Guiding)
    throw SessionStateError("step requires status Guiding, session is " + to_string(status_));
  GuidanceAdvice advice;
  try {
    advice = advise();
  } catch (const Error& e) {
    fail(e.what());
    GuidanceStep s;
    s.index = steps_since_goal_ + 1;
    s.before = s.after = joints_;
    s.metrics = metrics();
    s.status = status_;
    s.diagnostics = diagnostics_;
    history_.push_back(s);
    throw EstimatorFailure(e.what());
  }
  return move(advice.clamped, advice);
}

GuidanceStep GuidanceSession::apply(const JointDelta& operator_delta) {
  const JointDelta clamped = clamp_delta(operator_delta, config_.limits);
  const JointState next = apply_delta(joints_, clamped);
  check_limits(catheter_, next);
  return move(clamped, std::nullopt);
}

JointDelta GuidanceSession::feasible(const JointDelta& operator_delta) const {
  const JointDelta clamped = clamp_delta(operator_delta, config_.limits);
  JointState next = apply_delta(joints_, clamped);
  next.theta3 = wrap_angle(next.theta3);
  JointDelta d = joint_difference(clip_to_limits(catheter_, next), joints_);
  d.theta3 = clamped.theta3;
  return d;
}

GuidanceStep GuidanceSession::move(const JointDelta& delta, std::optional<GuidanceAdvice> advice) {
  GuidanceStep s;
  s.before = joints_;
  JointState next = apply_delta(joints_, delta);
  next.theta3 = wrap_angle(next.theta3);
  next = clip_to_limits(catheter_, next);
  joints_ = next;
  s.after = next;
  s.applied = joint_difference(next, s.before);
  s.advice = std::move(advice);
  slice_ = render_at(joints_);
  s.metrics = metrics();
  if (status_ == SessionStatus::Guiding) {
    ++steps_since_goal_;
    streak_ = satisfied(s.metrics) ? streak_ + 1 : 0;
    try {
      if (streak_ >= config_.reach_streak) {
        status_ = SessionStatus::Reached;
      } else if (streak_ > 0 && settled(advise().raw)) {
        status_ = SessionStatus::Reached;
      } else if (steps_since_goal_ >= config_.max_steps) {
        fail("goal not reached within " + std::to_string(config_.max_steps) + " steps");
      }
    } catch (const Error& e) {
      fail(e.what());
    }
  }
  s.index = steps_since_goal_;
  s.status = status_;
  s.diagnostics = diagnostics_;
  history_.push_back(s);
  return s;
}

void GuidanceSession::write_log(std::ostream& out) const {
  for (std::size_t i = 0; i < history_.size(); ++i) {
    nlohmann::json j = to_json(history_[i]);
    j["session"] = id_;
    j["record"] = i;
    const auto& a = history_[i].advice;
    j["q50"] = a ? to_json(a->goal_in_current[1]) : nlohmann::json(nullptr);
    j["bounds"] = a ? nlohmann::json{{"q02", to_json(a->goal_in_current[0])}, {"q98", to_json(a->goal_in_current[2])}}
                    : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
}

std::vector<JointState> interpolate_joints(const JointState& a, const JointState& b, int n) {
  std::vector<JointState> out;
  const JointDelta d = joint_difference(b, a);
  for (int i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    JointState q = apply_delta(a, {t * d.theta1, t * d.theta2, t * d.theta3, t * d.d4});
    q.theta3 = wrap_angle(q.theta3);
    out.push_back(q);
  }
  return out;
}

Vec3 axis_std(const std::vector<Vec3>& points) {
  if (points.empty()) return Vec3::Zero();
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  Vec3 var = Vec3::Zero();
  for (const Vec3& p : points) var += (p - mean).cwiseAbs2();
  return (var / static_cast<double>(points.size())).cwiseSqrt();
}

nlohmann::json to_json(const TrajectoryEstimate& t) {
  nlohmann::json apex = nlohmann::json::array(), end = nlohmann::json::array();
  for (const Vec3& v : t.apex) apex.push_back(to_json(v));
  for (const Vec3& v : t.endpoint) end.push_back(to_json(v));
  return {{"apex", apex}, {"endpoint", end}, {"apex_std", to_json(t.apex_std)}, {"endpoint_std", to_json(t.endpoint_std)}};
}

TrajectoryEstimate estimate_state_trajectory(const SceneBundle& bundle, const CatheterModel& catheter,
                                             const Estimator& estimator, const std::vector<JointState>& trajectory,
                                             ViewClass goal, const GuidanceConfig& config) {
  for (const JointState& q : trajectory) check_limits(catheter, q);
  RenderParams params = config.render;
  if (const auto size = estimator.input_size()) params.width = params.height = *size;
  TrajectoryEstimate out;
  for (const JointState& q : trajectory) {
    const RigidTransform home = forward_transform_home(catheter, q);
    const SliceImage img =
        render_slice(bundle.scene, fan_from_transform(bundle.scene.world_to_home * home, config.fan),
                     joints_hash(config.noise_seed ^ bundle.scene.seed, q), params);
    EstimatorQuery query;
    query.bundle = &bundle;
    query.current_home = home;
    query.image = &img;
    query.target = goal;
    const QuantilePrediction pred = estimator.estimate(query);
    const FanGeometry fan = fan_from_transform(home * pose_to_transform(pred.q50()), config.fan);
    out.apex.push_back(fan.apex);
    out.endpoint.push_back(fan.far_edge_center());
  }
  out.apex_std = axis_std(out.apex);
  out.endpoint_std = axis_std(out.endpoint);
  return out;
}

}  // namespace icepilot
