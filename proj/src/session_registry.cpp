#include <openssl/rand.h>

#include "icepilot/errors.hpp"
#include "icepilot/io.hpp"
#include "icepilot/service.hpp"

#ifndef ICEPILOT_VERSION
#define ICEPILOT_VERSION "0.0.0"
#endif
#ifndef ICEPILOT_GIT_DESCRIBE
#define ICEPILOT_GIT_DESCRIBE "unknown"
#endif

namespace icepilot {

std::string version_string() { return ICEPILOT_VERSION; }
std::string git_describe() { return ICEPILOT_GIT_DESCRIBE; }

std::string new_token() {
  unsigned char raw[16];
  if (RAND_bytes(raw, sizeof raw) != 1) throw Error("random source failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : raw) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

nlohmann::json error_message(const nlohmann::json& seq, const std::string& code, const std::string& text) {
  return {{"type", "error"}, {"seq", seq}, {"code", code}, {"message", text}};
}

namespace {

JointDelta parse_delta(const nlohmann::json& j) {
  if (j.is_array()) return delta_from_json(j);
  if (j.is_object()) {
    JointDelta d;
    d.theta1 = j.value("theta1", 0.0);
    d.theta2 = j.value("theta2", 0.0);
    d.theta3 = j.value("theta3", 0.0);
    d.d4 = j.value("d4", 0.0);
    return d;
  }
  throw FormatError("delta must be [theta1, theta2, theta3, d4] or an object of those keys");
}

nlohmann::json optional_delta(const std::optional<JointDelta>& d) { return d ? to_json(*d) : nlohmann::json(nullptr); }

}  // namespace

SessionRegistry::SessionRegistry(std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter,
                                 std::shared_ptr<const Estimator> estimator, ServiceConfig config)
    : bundle_(std::move(bundle)),
      catheter_(std::move(catheter)),
      estimator_(std::move(estimator)),
      config_(std::move(config)) {}

SessionRegistry::Created SessionRegistry::create(const nlohmann::json& request) {
  JointState start = catheter_.home;
  if (request.is_object() && request.contains("start")) {
    try {
      start = joints_from_json(request.at("start"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("start: ") + e.what());
    }
  }
  auto entry = std::make_shared<Entry>();
  entry->session = std::make_unique<GuidanceSession>(bundle_, catheter_, start, estimator_, config_.guidance);
  entry->last_active = Clock::now();
  Created out;
  out.token = new_token();
  out.state = state_update(*entry->session, nullptr, out.token);
  std::lock_guard lock(mutex_);
  if (static_cast<int>(sessions_.size()) >= config_.max_sessions)
    throw SessionStateError("session limit reached (" + std::to_string(config_.max_sessions) + ")");
  sessions_.emplace(out.token, std::move(entry));
  return out;
}

std::shared_ptr<SessionRegistry::Entry> SessionRegistry::find(const std::string& token) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(token);
  return it == sessions_.end() ? nullptr : it->second;
}

bool SessionRegistry::contains(const std::string& token) const { return find(token) != nullptr; }

bool SessionRegistry::end(const std::string& token) {
  std::lock_guard lock(mutex_);
  return sessions_.erase(token) > 0;
}

std::vector<std::string> SessionRegistry::reap(Clock::time_point now) {
  const auto limit = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config_.idle_timeout_s));
  std::vector<std::string> gone;
  std::lock_guard lock(mutex_);
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    // A session mid-command is busy, not idle.
    std::unique_lock busy(it->second->mutex, std::try_to_lock);
    if (busy.owns_lock() && now - it->second->last_active > limit) {
      gone.push_back(it->first);
      busy.unlock();
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
  return gone;
}

std::vector<std::string> SessionRegistry::tokens() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [k, v] : sessions_) out.push_back(k);
  return out;
}

std::size_t SessionRegistry::size() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

nlohmann::json SessionRegistry::scene_json() const {
  nlohmann::json targets = nlohmann::json::object();
  for (const auto& [v, t] : bundle_->targets)
    targets[to_string(v)] = {{"pose", to_json(t.pose)}, {"joints", to_json(t.joints)}};
  return {{"scene", to_json(bundle_->scene)},
          {"targets", targets},
          {"catheter", to_json(catheter_)},
          {"fan", to_json(config_.guidance.fan)}};
}

nlohmann::json SessionRegistry::state_update(const GuidanceSession& s, const nlohmann::json& seq,
                                             const std::string& token) const {
  const SliceImage& img = s.slice();
  const std::string_view raw(reinterpret_cast<const char*>(img.intensity.data()), 4 * img.intensity.size());
  nlohmann::json j{{"type", "state_update"},
                   {"seq", seq},
                   {"token", token},
                   {"session_id", s.id()},
                   {"status", to_string(s.status())},
                   {"goal", s.goal() ? nlohmann::json(to_string(*s.goal())) : nlohmann::json(nullptr)},
                   {"joints", to_json(s.joints())},
                   {"pose_home", to_json(transform_to_pose(s.pose_home()))},
                   {"steps", s.history().size() - s.goal_marker()},
                   {"slice",
                    {{"width", img.width},
                     {"height", img.height},
                     {"encoding", "png"},
                     {"data", base64_encode(encode_png(img))},
                     {"intensity_sha256", sha256_hex(raw)},
                     {"noise_seed", img.noise_seed}}},
                   {"metrics", s.goal() ? to_json(s.metrics()) : nlohmann::json(nullptr)},
                   {"diagnostics", s.diagnostics()}};
  return j;
}

nlohmann::json SessionRegistry::guidance(const GuidanceSession& s, const GuidanceAdvice& a, const nlohmann::json& seq,
                                         const std::string& token) const {
  return {{"type", "guidance"},
          {"seq", seq},
          {"token", token},
          {"goal", to_string(*s.goal())},
          {"status", to_string(s.status())},
          {"delta", to_json(a.raw)},
          {"clamped", to_json(a.clamped)},
          {"lower", optional_delta(a.lower)},
          {"upper", optional_delta(a.upper)},
          {"ik_residual", a.ik_residual},
          {"current_home", to_json(a.current_home)},
          {"target_poses",
           {{"q02", to_json(a.goal_in_current[0])},
            {"q50", to_json(a.goal_in_current[1])},
            {"q98", to_json(a.goal_in_current[2])}}}};
}

std::vector<nlohmann::json> SessionRegistry::handle_text(const std::string& token, const std::string& text) {
  nlohmann::json msg;
  try {
    msg = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    return {error_message(nullptr, "bad_request", std::string("malformed JSON: ") + e.what())};
  }
  return handle(token, msg);
}

std::vector<nlohmann::json> SessionRegistry::handle(const std::string& token, const nlohmann::json& msg) {
  const nlohmann::json seq = msg.is_object() ? msg.value("seq", nlohmann::json(nullptr)) : nlohmann::json(nullptr);
  if (!msg.is_object() || !msg.contains("type") || !msg.at("type").is_string())
    return {error_message(seq, "bad_request", "message needs a string 'type'")};
  if (!msg.contains("token") || !msg.at("token").is_string())
    return {error_message(seq, "bad_request", "message needs the session 'token'")};
  if (msg.at("token").get<std::string>() != token)
    return {error_message(seq, "bad_request", "token does not match this connection")};
  const auto entry = find(token);
  if (!entry) return {error_message(seq, "unknown_token", "no such session")};

  std::lock_guard lock(entry->mutex);
  entry->last_active = Clock::now();
  GuidanceSession& s = *entry->session;
  const std::string type = msg.at("type");
  std::vector<nlohmann::json> out;
  auto add_guidance = [&] {
    try {
      out.push_back(guidance(s, s.advise(), seq, token));
    } catch (const Error& e) {
      out.push_back(error_message(seq, "estimator_failure", e.what()));
    }
  };

  if (type == "hello") {
    out.push_back(state_update(s, seq, token));
    if (s.goal()) add_guidance();
  } else if (type == "set_goal") {
    ViewClass goal;
    try {
      goal = view_class_from_string(msg.at("goal").get<std::string>());
    } catch (const std::exception& e) {
      return {error_message(seq, "bad_request", std::string("set_goal needs a goal view name: ") + e.what())};
    }
    try {
      s.set_goal(goal);
    } catch (const Error& e) {
      out.push_back(error_message(seq, "estimator_failure", e.what()));
      out.push_back(state_update(s, seq, token));
      return out;
    }
    out.push_back(state_update(s, seq, token));
    add_guidance();
  } else if (type == "apply_delta") {
    JointDelta d;
    try {
      d = parse_delta(msg.at("delta"));
    } catch (const std::exception& e) {
      return {error_message(seq, "bad_request", std::string("apply_delta: ") + e.what())};
    }
    try {
      s.apply(d);
    } catch (const JointLimitError& e) {
      auto err = error_message(seq, "joint_limit", e.what());
      err["suggested_delta"] = to_json(s.feasible(d));
      return {err};
    }
    nlohmann::json update = state_update(s, seq, token);
    update["applied_delta"] = to_json(s.history().back().applied);
    out.push_back(std::move(update));
    if (s.goal()) add_guidance();
  } else if (type == "request_guidance") {
    if (!s.goal()) return {error_message(seq, "no_goal", "set a goal first")};
    add_guidance();
  } else if (type == "session_end") {
    out.push_back({{"type", "session_end"}, {"seq", seq}, {"token", token}, {"reason", "client"}});
    std::lock_guard registry_lock(mutex_);
    sessions_.erase(token);
  } else {
    return {error_message(seq, "bad_request", "unknown message type '" + type + "'")};
  }
  return out;
}

std::shared_ptr<const Estimator> make_estimator(const ServiceConfig& config) {
  config.validate();
  if (!config.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(config.checkpoint);
    return std::make_shared<LearnedEstimator>(ck.network);
  }
  return std::make_shared<OracleEstimator>(*config.oracle);
}

}  // namespace icepilot
