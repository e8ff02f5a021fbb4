#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "poiverify/runtime.hpp"

namespace poiverify::serve {

// Wire protocol: UTF-8, one JSON object per LF-terminated line.
// Request:  {"signboard": "<base64>", "lon": .., "lat": .., "variant": "v2",
//            "name": "<depicted name, required by v1/v1*/v2*>"}
// Response: verification result object, or {"error": "..."} for a bad line;
// the connection stays open either way.
std::string handle_request_line(const runtime::Workbench& wb,
                                const std::string& line);

std::string result_to_json(const pipeline::VerificationResult& result);

// Line-oriented TCP verification service over an immutable workbench.
// stop() stops accepting, then drains in-flight connections.
class Server {
 public:
  explicit Server(std::shared_ptr<const runtime::Workbench> wb);
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // port 0 binds an ephemeral port; the bound port is returned.
  std::uint16_t start(std::uint16_t port);
  void stop();
  bool running() const { return running_.load(); }
  std::uint16_t port() const { return port_; }

 private:
  void accept_loop();
  void serve_connection(int fd);

  std::shared_ptr<const runtime::Workbench> wb_;
  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::thread accept_thread_;
  std::vector<std::thread> connections_;
  std::mutex connections_mu_;
};

}  // namespace poiverify::serve
