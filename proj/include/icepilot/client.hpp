#pragma once

#include <chrono>
#include <memory>
#include <string>

#include <json.hpp>

namespace icepilot {

struct HttpReply {
  int status = 0;
  std::string body;
  nlohmann::json json() const { return nlohmann::json::parse(body); }
};

/// One request per connection; enough for scripts and tests.
HttpReply http_request(const std::string& host, int port, const std::string& method, const std::string& target,
                       const std::string& body = {});

/// Blocking WebSocket client for /ws/{token}. Stamps token and a fresh seq on
/// every message it sends.
class WsClient {
 public:
  WsClient(const std::string& host, int port, std::string token);
  ~WsClient();
  WsClient(const WsClient&) = delete;
  WsClient& operator=(const WsClient&) = delete;

  /// Returns the seq used.
  long send(nlohmann::json message);
  void send_raw(const std::string& text);
  /// Throws icepilot::Error on timeout or a closed connection.
  nlohmann::json receive(std::chrono::milliseconds timeout = std::chrono::seconds(60));
  void close();
  const std::string& token() const { return token_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string token_;
  long next_seq_ = 1;
};

}  // namespace icepilot
