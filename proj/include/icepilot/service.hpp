#pragma once

#include <chrono>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "icepilot/config.hpp"

namespace icepilot {

std::string version_string();
std::string git_describe();

/// 128 random bits as 32 hex digits.
std::string new_token();

/// Sessions keyed by token, plus the wire-protocol handler. Transport free:
/// the server feeds it decoded messages and ships the replies.
class SessionRegistry {
 public:
  using Clock = std::chrono::steady_clock;

  SessionRegistry(std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter,
                  std::shared_ptr<const Estimator> estimator, ServiceConfig config);

  struct Created {
    std::string token;
    nlohmann::json state;  // state_update for the initial slice
  };
  /// Body may hold "start": [theta1, theta2, theta3, d4]. Throws
  /// SessionStateError when the service is full, JointLimitError or FormatError for bad starts.
  Created create(const nlohmann::json& request);

  /// Replies in order. Client mistakes come back as error messages; this
  /// never throws for them.
  std::vector<nlohmann::json> handle(const std::string& token, const nlohmann::json& message);
  std::vector<nlohmann::json> handle_text(const std::string& token, const std::string& text);

  bool contains(const std::string& token) const;
  /// Removes the session; returns false if unknown.
  bool end(const std::string& token);
  /// Ends sessions idle for longer than the configured timeout.
  std::vector<std::string> reap(Clock::time_point now);
  std::vector<std::string> tokens() const;
  std::size_t size() const;

  /// Scene meshes plus target states for the UI.
  nlohmann::json scene_json() const;
  const ServiceConfig& config() const { return config_; }

 private:
  struct Entry {
    std::mutex mutex;
    std::unique_ptr<GuidanceSession> session;
    Clock::time_point last_active;
  };

  std::shared_ptr<Entry> find(const std::string& token) const;
  nlohmann::json state_update(const GuidanceSession& s, const nlohmann::json& seq, const std::string& token) const;
  nlohmann::json guidance(const GuidanceSession& s, const GuidanceAdvice& a, const nlohmann::json& seq,
                          const std::string& token) const;

  std::shared_ptr<const SceneBundle> bundle_;
  CatheterModel catheter_;
  std::shared_ptr<const Estimator> estimator_;
  ServiceConfig config_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<Entry>> sessions_;
};

/// Error message body shared by every failure reply.
nlohmann::json error_message(const nlohmann::json& seq, const std::string& code, const std::string& text);

/// HTTP and WebSocket front end. GET /healthz, GET /scene, POST /session,
/// and the upgrade endpoint /ws/{token}.
class Service {
 public:
  Service(ServiceConfig config, std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter,
          std::shared_ptr<const Estimator> estimator);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and starts the worker threads; returns the bound port.
  int start();
  /// Sends session_end to every connected client, closes, and joins the workers.
  void stop();
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();

  SessionRegistry& registry();

  struct Impl;  // shared with the connection classes in the server source

 private:
  std::unique_ptr<Impl> impl_;
};

/// Builds the estimator a service config selects.
std::shared_ptr<const Estimator> make_estimator(const ServiceConfig& config);

}  // namespace icepilot
