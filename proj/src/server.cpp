#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/steady_timer.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <set>
#include <thread>

#include "icepilot/errors.hpp"
#include "icepilot/service.hpp"

namespace icepilot {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

class WsConnection;

struct Service::Impl {
  Impl(ServiceConfig c, std::shared_ptr<const SceneBundle> b, CatheterModel cat, std::shared_ptr<const Estimator> e)
      : config(c), registry(std::move(b), std::move(cat), std::move(e), c), ioc(c.threads), acceptor(ioc), reaper(ioc) {}

  ServiceConfig config;
  SessionRegistry registry;
  net::io_context ioc;
  tcp::acceptor acceptor;
  net::steady_timer reaper;
  std::vector<std::thread> workers;

  std::mutex mutex;
  std::condition_variable stopped_cv;
  bool running = false;
  std::unordered_map<std::string, std::weak_ptr<WsConnection>> sockets;  // token -> live connection
  std::vector<std::weak_ptr<WsConnection>> upgraded;                     // every connection, for shutdown

  void accept();
  void schedule_reap();
  void attach(const std::string& token, const std::shared_ptr<WsConnection>& c);
  void detach(const std::string& token, const WsConnection* c);
};

/// One upgraded connection bound to one session token. All handlers run on
/// the connection's strand; replies are queued so writes never overlap.
class WsConnection : public std::enable_shared_from_this<WsConnection> {
 public:
  WsConnection(tcp::socket&& socket, Service::Impl* service, std::string token)
      : ws_(std::move(socket)), service_(service), token_(std::move(token)) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.set_option(websocket::stream_base::decorator([](websocket::response_type& res) {
      res.set(http::field::server, "icepilot/" + version_string());
    }));
    ws_.async_accept(req, beast::bind_front_handler(&WsConnection::on_accept, shared_from_this()));
  }

  /// Server-initiated end: queue session_end, then close once it is written.
  void end(const std::string& reason) {
    net::post(ws_.get_executor(), [self = shared_from_this(), reason] {
      if (self->closing_) return;
      self->closing_ = true;
      self->queue_.push_back(nlohmann::json{{"type", "session_end"}, {"seq", nullptr}, {"token", self->token_}, {"reason", reason}}.dump());
      if (!self->writing_) self->write_next();
    });
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    {
      std::lock_guard lock(service_->mutex);
      auto& all = service_->upgraded;
      std::erase_if(all, [](const auto& w) { return w.expired(); });
      all.push_back(weak_from_this());
    }
    service_->attach(token_, shared_from_this());
    read();
  }

  void read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      service_->detach(token_, this);
      return;
    }
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    std::vector<nlohmann::json> replies;
    if (!ws_.got_text()) {
      replies.push_back(error_message(nullptr, "bad_request", "binary frames are not part of the protocol"));
    } else {
      replies = service_->registry.handle_text(token_, text);
    }
    for (const auto& r : replies) {
      queue_.push_back(r.dump());
      if (r.at("type") == "session_end") closing_ = true;
    }
    if (!writing_) write_next();
  }

  void write_next() {
    if (queue_.empty()) {
      writing_ = false;
      if (closing_) {
        ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {
          self->service_->detach(self->token_, self.get());
        });
      } else {
        read();
      }
      return;
    }
    writing_ = true;
    ws_.text(true);
    ws_.async_write(net::buffer(queue_.front()), beast::bind_front_handler(&WsConnection::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    queue_.pop_front();
    if (ec) {
      writing_ = false;
      service_->detach(token_, this);
      return;
    }
    write_next();
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  Service::Impl* service_;

 public:
  /// Only once the workers are joined.
  void force_close() {
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().close(ec);
  }

 private:
  std::string token_;
  std::deque<std::string> queue_;
  bool writing_ = false;
  bool closing_ = false;
};

namespace {

http::response<http::string_body> json_response(const http::request<http::string_body>& req, http::status status,
                                                const nlohmann::json& body) {
  http::response<http::string_body> res{status, req.version()};
  res.set(http::field::server, "icepilot/" + version_string());
  res.set(http::field::content_type, "application/json");
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = body.dump();
  res.prepare_payload();
  return res;
}

}  // namespace

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket&& socket, Service::Impl* service)
      : stream_(std::move(socket)), service_(service) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpConnection::read, shared_from_this()));
  }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    const std::string target(req_.target());
    if (websocket::is_upgrade(req_)) {
      const std::string prefix = "/ws/";
      const std::string token = target.rfind(prefix, 0) == 0 ? target.substr(prefix.size()) : std::string();
      if (token.empty() || !service_->registry.contains(token)) {
        respond(json_response(req_, http::status::not_found, error_message(nullptr, "unknown_token", "no such session")));
        return;
      }
      stream_.expires_never();
      std::make_shared<WsConnection>(stream_.release_socket(), service_, token)->run(std::move(req_));
      return;
    }
    respond(route());
  }

  http::response<http::string_body> route() {
    const std::string target(req_.target());
    SessionRegistry& reg = service_->registry;
    if (req_.method() == http::verb::get && target == "/healthz") {
      return json_response(req_, http::status::ok,
                           {{"status", "ok"}, {"version", version_string()}, {"git", git_describe()}, {"sessions", reg.size()}});
    }
    if (req_.method() == http::verb::get && target == "/scene") return json_response(req_, http::status::ok, reg.scene_json());
    if (target == "/session") {
      if (req_.method() != http::verb::post)
        return json_response(req_, http::status::method_not_allowed, error_message(nullptr, "bad_request", "use POST"));
      nlohmann::json body = nlohmann::json::object();
      if (!req_.body().empty()) {
        try {
          body = nlohmann::json::parse(req_.body());
        } catch (const nlohmann::json::exception& e) {
          return json_response(req_, http::status::bad_request, error_message(nullptr, "bad_request", e.what()));
        }
      }
      try {
        const auto created = reg.create(body);
        return json_response(req_, http::status::created, {{"token", created.token}, {"state", created.state}});
      } catch (const SessionStateError& e) {
        return json_response(req_, http::status::service_unavailable, error_message(nullptr, "session_limit", e.what()));
      } catch (const JointLimitError& e) {
        return json_response(req_, http::status::bad_request, error_message(nullptr, "joint_limit", e.what()));
      } catch (const Error& e) {
        return json_response(req_, http::status::bad_request, error_message(nullptr, "bad_request", e.what()));
      }
    }
    return json_response(req_, http::status::not_found, error_message(nullptr, "not_found", "no route " + target));
  }

  void respond(http::response<http::string_body> res) {
    res_ = std::make_shared<http::response<http::string_body>>(std::move(res));
    http::async_write(stream_, *res_, beast::bind_front_handler(&HttpConnection::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec || !res_->keep_alive()) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    read();
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
  std::shared_ptr<http::response<http::string_body>> res_;
  Service::Impl* service_;
};

void Service::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [self = this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // acceptor closed
    std::make_shared<HttpConnection>(std::move(socket), self)->run();
    self->accept();
  });
}

void Service::Impl::schedule_reap() {
  const double period = std::clamp(config.idle_timeout_s / 4.0, 0.05, 1.0);
  reaper.expires_after(std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(period)));
  reaper.async_wait([self = this](beast::error_code ec) {
    if (ec) return;
    for (const std::string& token : self->registry.reap(SessionRegistry::Clock::now())) {
      std::shared_ptr<WsConnection> c;
      {
        std::lock_guard lock(self->mutex);
        if (auto it = self->sockets.find(token); it != self->sockets.end()) c = it->second.lock();
      }
      if (c) c->end("idle");
    }
    self->schedule_reap();
  });
}

void Service::Impl::attach(const std::string& token, const std::shared_ptr<WsConnection>& c) {
  std::shared_ptr<WsConnection> previous;
  {
    std::lock_guard lock(mutex);
    auto& slot = sockets[token];
    previous = slot.lock();
    slot = c;
  }
  // A reconnect takes the session over from the older connection.
  if (previous) previous->end("replaced");
}

void Service::Impl::detach(const std::string& token, const WsConnection* c) {
  std::lock_guard lock(mutex);
  if (auto it = sockets.find(token); it != sockets.end()) {
    const auto live = it->second.lock();
    if (!live || live.get() == c) sockets.erase(it);
  }
}

Service::Service(ServiceConfig config, std::shared_ptr<const SceneBundle> bundle, CatheterModel catheter,
                 std::shared_ptr<const Estimator> estimator) {
  config.validate();
  impl_ = std::make_unique<Impl>(std::move(config), std::move(bundle), std::move(catheter), std::move(estimator));
}

Service::~Service() { stop(); }

SessionRegistry& Service::registry() { return impl_->registry; }

int Service::start() {
  Impl& s = *impl_;
  std::lock_guard lock(s.mutex);
  if (s.running) return s.acceptor.local_endpoint().port();
  beast::error_code ec;
  const tcp::endpoint ep(net::ip::make_address(s.config.bind, ec), static_cast<unsigned short>(s.config.port));
  if (ec) throw ConfigError("service: bad bind address " + s.config.bind);
  s.acceptor.open(ep.protocol());
  s.acceptor.set_option(net::socket_base::reuse_address(true));
  s.acceptor.bind(ep, ec);
  if (ec) throw Error("service: cannot bind " + s.config.bind + ":" + std::to_string(s.config.port) + ": " + ec.message());
  s.acceptor.listen(net::socket_base::max_listen_connections);
  s.running = true;
  s.accept();
  s.schedule_reap();
  for (int i = 0; i < s.config.threads; ++i) s.workers.emplace_back([&s] { s.ioc.run(); });
  return s.acceptor.local_endpoint().port();
}

void Service::stop() {
  if (!impl_) return;
  Impl& s = *impl_;
  std::vector<std::shared_ptr<WsConnection>> live;
  {
    std::lock_guard lock(s.mutex);
    if (!s.running) return;
    s.running = false;
    for (auto& [token, weak] : s.sockets)
      if (auto c = weak.lock()) live.push_back(c);
  }
  net::post(s.ioc, [&s] {
    beast::error_code ec;
    s.acceptor.close(ec);
    s.reaper.cancel();
  });
  for (auto& c : live) c->end("shutdown");
  // Let the goodbyes drain, then stop whatever is still pending.
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
  while (std::chrono::steady_clock::now() < deadline) {
    {
      std::lock_guard lock(s.mutex);
      if (s.sockets.empty()) break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  s.ioc.stop();
  for (auto& w : s.workers)
    if (w.joinable()) w.join();
  s.workers.clear();
  for (auto& w : s.upgraded)
    if (auto c = w.lock()) c->force_close();
  s.upgraded.clear();
  for (const std::string& t : s.registry.tokens()) s.registry.end(t);
  s.stopped_cv.notify_all();
}

void Service::wait() {
  std::unique_lock lock(impl_->mutex);
  impl_->stopped_cv.wait(lock, [this] { return !impl_->running; });
}

}  // namespace icepilot
