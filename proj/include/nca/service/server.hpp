#pragma once

#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "nca/service/session.hpp"

namespace nca::service {

struct HttpResult {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Routes the HTTP part of the API:
//   POST /models {"path"}                      -> {"model_id"}
//   POST /sessions {"model_id","h","w","layout", optional "seed","sps","stride","running"} -> {"session_id"}
//   GET /sessions, GET /sessions/{id}, DELETE /sessions/{id}
//   GET /sessions/{id}/snapshot.png
// `workdir` anchors relative model paths.
HttpResult handle_http(Registry& registry, const std::string& method, const std::string& target, const std::string& body,
                       const std::filesystem::path& workdir = ".");

// HTTP and WebSocket on one port. WS /sessions/{id} streams binary frames
// [u64 step LE | rgb] plus JSON text acks and heartbeats, and accepts JSON
// commands. A consumer that falls behind loses its oldest unsent frames.
class Server {
 public:
  Server(Registry& registry, const std::string& address, unsigned short port, std::filesystem::path workdir = ".",
         size_t max_pending_frames = 4);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  void start(int threads = 2);
  void stop();
  void wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nca::service
