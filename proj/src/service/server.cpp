#include "nca/service/server.hpp"

#include <deque>
#include <iostream>

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

namespace nca::service {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

// ---- routing ----------------------------------------------------------------------

namespace {

std::vector<std::string> path_parts(const std::string& target) {
  std::string path = target.substr(0, target.find('?'));
  std::vector<std::string> parts;
  size_t i = 0;
  while (i < path.size()) {
    const size_t j = path.find('/', i);
    const size_t end = j == std::string::npos ? path.size() : j;
    if (end > i) parts.push_back(path.substr(i, end - i));
    i = end + 1;
  }
  return parts;
}

HttpResult json_result(int status, const json& j) { return {status, "application/json", j.dump()}; }
HttpResult error_result(int status, const std::string& msg) { return json_result(status, {{"error", msg}}); }

}  // namespace

HttpResult handle_http(Registry& registry, const std::string& method, const std::string& target, const std::string& body,
                       const std::filesystem::path& workdir) {
  const auto parts = path_parts(target);
  try {
    if (parts.size() == 1 && parts[0] == "models" && method == "POST") {
      const json j = json::parse(body);
      if (!j.contains("path") || !j["path"].is_string()) return error_result(400, "body needs a string 'path'");
      std::filesystem::path p = j["path"].get<std::string>();
      if (p.is_relative()) p = workdir / p;
      const std::string id = registry.load_model(p);
      return json_result(201, {{"model_id", id}});
    }
    if (parts.size() == 1 && parts[0] == "sessions" && method == "POST") {
      const json j = json::parse(body);
      if (!j.contains("model_id") || !j["model_id"].is_string()) return error_result(400, "body needs 'model_id'");
      const auto model = registry.model(j["model_id"].get<std::string>());
      SessionOptions opt;
      opt.height = j.value("h", 64);
      opt.width = j.value("w", 64);
      if (opt.height < 3 || opt.width < 3 || opt.height > 4096 || opt.width > 4096)
        return error_result(400, "h and w must be in [3, 4096]");
      const json layout = j.contains("layout") ? j["layout"] : json{{"kind", "halves"}, {"genomes", {0}}};
      opt.layout = parse_layout(layout, opt.height, opt.width);
      opt.layout.validate(opt.height, opt.width, model->params.shape.genome_channels);
      opt.seed = j.value("seed", uint64_t{0});
      opt.sps = j.value("sps", 30.0);
      opt.stride = j.value("stride", 1);
      auto s = registry.create_session(j["model_id"].get<std::string>(), opt);
      if (j.value("running", false)) s->submit(Command{"resume", std::nullopt, cmd::Resume{}});
      return json_result(201, {{"session_id", s->id()}});
    }
    if (parts.size() == 1 && parts[0] == "sessions" && method == "GET") {
      json list = json::array();
      for (const auto& s : registry.sessions()) list.push_back(s->status().to_json());
      return json_result(200, {{"sessions", list}});
    }
    if (parts.size() == 2 && parts[0] == "sessions") {
      if (method == "GET") return json_result(200, registry.session(parts[1])->status().to_json());
      if (method == "DELETE") {
        if (!registry.remove_session(parts[1])) return error_result(404, "unknown session '" + parts[1] + "'");
        return json_result(200, {{"deleted", parts[1]}});
      }
    }
    if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "snapshot.png" && method == "GET") {
      const auto png = registry.session(parts[1])->snapshot_png();
      return {200, "image/png", std::string(png.begin(), png.end())};
    }
    return error_result(404, "no route for " + method + " " + target);
  } catch (const NotFound& e) {
    return error_result(404, e.what());
  } catch (const json::exception& e) {
    return error_result(400, std::string("bad JSON: ") + e.what());
  } catch (const std::invalid_argument& e) {
    return error_result(400, e.what());
  } catch (const std::exception& e) {
    return error_result(422, e.what());
  }
}

// ---- transport ------------------------------------------------------------------------

namespace {

class WsConnection : public std::enable_shared_from_this<WsConnection> {
 public:
  WsConnection(tcp::socket&& socket, std::shared_ptr<Session> session, size_t max_pending)
      : ws_(std::move(socket)), session_(std::move(session)), max_pending_(max_pending) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsConnection::on_accept, shared_from_this()));
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    std::weak_ptr<WsConnection> weak = shared_from_this();
    auto exec = ws_.get_executor();
    token_ = session_->subscribe([weak, exec](const Message& m) {
      net::post(exec, [weak, m] {
        if (auto self = weak.lock()) self->enqueue(m);
      });
    });
    do_read();
  }

  void enqueue(Message m) {
    if (closed_) return;
    if (m.binary) {
      size_t frames = 0;
      for (const auto& q : queue_) frames += q.binary ? 1 : 0;
      // The head may be mid-write; drop the oldest frame behind it.
      while (frames >= max_pending_) {
        auto it = std::find_if(queue_.begin() + (writing_ ? 1 : 0), queue_.end(), [](const Message& q) { return q.binary; });
        if (it == queue_.end()) break;
        queue_.erase(it);
        --frames;
      }
    }
    queue_.push_back(std::move(m));
    if (!writing_) do_write();
  }

  void do_write() {
    writing_ = true;
    ws_.binary(queue_.front().binary);
    ws_.async_write(net::buffer(queue_.front().payload),
                    beast::bind_front_handler(&WsConnection::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) return close();
    queue_.pop_front();
    if (queue_.empty())
      writing_ = false;
    else
      do_write();
  }

  void do_read() { ws_.async_read(buffer_, beast::bind_front_handler(&WsConnection::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return close();
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    std::weak_ptr<WsConnection> weak = shared_from_this();
    auto exec = ws_.get_executor();
    auto reply = [weak, exec](const Ack& a) {
      Message m{false, a.to_json().dump()};
      net::post(exec, [weak, m] {
        if (auto self = weak.lock()) self->enqueue(m);
      });
    };
    try {
      const auto status = session_->status();
      session_->submit(parse_command(json::parse(text), status.height, status.width, session_->genome_channels()), reply);
    } catch (const std::exception& e) {
      std::optional<json> id;
      try {
        const json j = json::parse(text);
        if (j.is_object() && j.contains("id")) id = j["id"];
      } catch (const std::exception&) {
      }
      enqueue({false, Ack{false, "invalid", id, session_->status().step, e.what()}.to_json().dump()});
    }
    do_read();
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    session_->unsubscribe(token_);
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::shared_ptr<Session> session_;
  size_t max_pending_;
  std::deque<Message> queue_;
  bool writing_ = false;
  bool closed_ = false;
  int token_ = -1;
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(tcp::socket&& socket, Registry& registry, const std::filesystem::path& workdir, size_t max_pending)
      : stream_(std::move(socket)), registry_(registry), workdir_(workdir), max_pending_(max_pending) {}

  void run() { do_read(); }

 private:
  void do_read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return;
    const std::string target(req_.target());
    if (websocket::is_upgrade(req_)) {
      const auto parts = path_parts(target);
      std::shared_ptr<Session> session;
      if (parts.size() == 2 && parts[0] == "sessions") {
        try {
          session = registry_.session(parts[1]);
        } catch (const NotFound&) {
        }
      }
      if (session) {
        stream_.expires_never();
        std::make_shared<WsConnection>(stream_.release_socket(), session, max_pending_)->run(std::move(req_));
        return;
      }
      return send({404, "application/json", json{{"error", "unknown session for " + target}}.dump()});
    }
    send(handle_http(registry_, std::string(req_.method_string()), target, req_.body(), workdir_));
  }

  void send(const HttpResult& r) {
    auto res = std::make_shared<http::response<http::string_body>>(static_cast<http::status>(r.status), req_.version());
    res->set(http::field::content_type, r.content_type);
    res->set(http::field::access_control_allow_origin, "*");
    res->keep_alive(req_.keep_alive());
    res->body() = r.body;
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (res->keep_alive())
        self->do_read();
      else
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
    });
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
  Registry& registry_;
  std::filesystem::path workdir_;
  size_t max_pending_;
};

}  // namespace

struct Server::Impl {
  Registry& registry;
  std::filesystem::path workdir;
  size_t max_pending;
  net::io_context ioc;
  tcp::acceptor acceptor;
  std::vector<std::thread> threads;

  Impl(Registry& r, const std::string& address, unsigned short port, std::filesystem::path wd, size_t pending)
      : registry(r), workdir(std::move(wd)), max_pending(pending), ioc(), acceptor(ioc) {
    const tcp::endpoint ep(net::ip::make_address(address), port);
    acceptor.open(ep.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen(net::socket_base::max_listen_connections);
  }

  void do_accept() {
    acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) {
        if (ec == net::error::operation_aborted) return;
      } else {
        std::make_shared<HttpConnection>(std::move(socket), registry, workdir, max_pending)->run();
      }
      do_accept();
    });
  }
};

Server::Server(Registry& registry, const std::string& address, unsigned short port, std::filesystem::path workdir,
               size_t max_pending_frames)
    : impl_(std::make_unique<Impl>(registry, address, port, std::move(workdir), max_pending_frames)) {}

Server::~Server() { stop(); }

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::start(int threads) {
  impl_->do_accept();
  for (int i = 0; i < std::max(1, threads); ++i) impl_->threads.emplace_back([this] { impl_->ioc.run(); });
}

void Server::stop() {
  if (!impl_) return;
  impl_->ioc.stop();
  wait();
}

void Server::wait() {
  for (auto& t : impl_->threads)
    if (t.joinable()) t.join();
  impl_->threads.clear();
}

}  // namespace nca::service
