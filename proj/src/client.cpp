#include "icepilot/client.hpp"

#include <optional>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "icepilot/errors.hpp"

namespace icepilot {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

HttpReply http_request(const std::string& host, int port, const std::string& method, const std::string& target,
                       const std::string& body) {
  net::io_context ioc;
  tcp::resolver resolver(ioc);
  beast::tcp_stream stream(ioc);
  stream.expires_after(std::chrono::seconds(60));
  stream.connect(resolver.resolve(host, std::to_string(port)));
  http::request<http::string_body> req{http::string_to_verb(method), target, 11};
  req.set(http::field::host, host);
  if (!body.empty()) {
    req.set(http::field::content_type, "application/json");
    req.body() = body;
  }
  req.prepare_payload();
  http::write(stream, req);
  beast::flat_buffer buffer;
  http::response<http::string_body> res;
  http::read(stream, buffer, res);
  beast::error_code ec;
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return {static_cast<int>(res.result_int()), res.body()};
}

struct WsClient::Impl {
  net::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};
  beast::flat_buffer buffer;

  // Runs the pending async operation; on timeout the socket is closed and
  // the operation drained, so the stream is unusable afterwards.
  bool run_until(const std::optional<beast::error_code>& done, std::chrono::milliseconds timeout) {
    ioc.restart();
    ioc.run_for(timeout);
    if (done) return true;
    beast::error_code ec;
    ws.next_layer().close(ec);
    ioc.restart();
    ioc.run();
    return false;
  }
};

WsClient::WsClient(const std::string& host, int port, std::string token)
    : impl_(std::make_unique<Impl>()), token_(std::move(token)) {
  tcp::resolver resolver(impl_->ioc);
  net::connect(impl_->ws.next_layer(), resolver.resolve(host, std::to_string(port)));
  impl_->ws.handshake(host + ":" + std::to_string(port), "/ws/" + token_);
  impl_->ws.text(true);
}

WsClient::~WsClient() {
  try {
    close();
  } catch (...) {
  }
}

long WsClient::send(nlohmann::json message) {
  const long seq = next_seq_++;
  if (!message.contains("token")) message["token"] = token_;
  if (!message.contains("seq")) message["seq"] = seq;
  send_raw(message.dump());
  return message["seq"].is_number_integer() ? message["seq"].get<long>() : seq;
}

void WsClient::send_raw(const std::string& text) { impl_->ws.write(net::buffer(text)); }

nlohmann::json WsClient::receive(std::chrono::milliseconds timeout) {
  impl_->buffer.consume(impl_->buffer.size());
  std::optional<beast::error_code> result;
  impl_->ws.async_read(impl_->buffer, [&](beast::error_code ec, std::size_t) { result = ec; });
  if (!impl_->run_until(result, timeout)) throw Error("websocket receive timed out");
  if (*result) throw Error("websocket receive: " + result->message());
  return nlohmann::json::parse(beast::buffers_to_string(impl_->buffer.data()));
}

void WsClient::close() {
  if (!impl_ || !impl_->ws.is_open()) return;
  std::optional<beast::error_code> result;
  impl_->ws.async_close(websocket::close_code::normal, [&](beast::error_code ec) { result = ec; });
  impl_->run_until(result, std::chrono::seconds(2));
}

}  // namespace icepilot
