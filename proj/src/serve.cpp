#include "poiverify/serve.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <mutex>

#include "json.hpp"

namespace poiverify::serve {

using nlohmann::json;

std::string result_to_json(const pipeline::VerificationResult& result) {
  json ranked = json::array();
  for (const auto& c : result.ranked)
    ranked.push_back({{"id", c.id}, {"score", c.score}});
  json timings = json::object();
  for (const auto& [stage, ms] : result.stage_timings_ms) timings[stage] = ms;
  const json j = {{"variant", std::string(pipeline::variant_name(result.variant))},
                  {"ranked", ranked},
                  {"stage_timings_ms", timings}};
  return j.dump();
}

std::string handle_request_line(const runtime::Workbench& wb,
                                const std::string& line) {
  try {
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      return json{{"error", "malformed json request line"}}.dump();

    pipeline::VerificationRequest req;
    if (!j.contains("signboard") || !j.contains("lon") || !j.contains("lat"))
      return json{{"error", "request requires signboard, lon, lat"}}.dump();
    const auto bytes = base64_decode(j.at("signboard").get<std::string>());
    if (bytes.size() != req.signboard.pixels.size())
      return json{{"error", "signboard must decode to 32x128 bytes"}}.dump();
    req.signboard.pixels = bytes;
    req.shot_location = {j.at("lon").get<double>(), j.at("lat").get<double>()};
    req.depicted_name = j.value("name", "");
    const auto variant = pipeline::variant_from_name(j.value("variant", "v2"));
    return result_to_json(wb.verify(variant, req));
  } catch (const std::exception& e) {
    return json{{"error", e.what()}}.dump();
  }
}

Server::Server(std::shared_ptr<const runtime::Workbench> wb) : wb_(std::move(wb)) {}

Server::~Server() { stop(); }

std::uint16_t Server::start(std::uint16_t port) {
  if (running_.load()) throw state_error("server already running");
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("bind() failed on port " + std::to_string(port));
  }
  if (::listen(listen_fd_, 16) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("listen() failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);

  stopping_.store(false);
  running_.store(true);
  accept_thread_ = std::thread([this] { accept_loop(); });
  return port_;
}

void Server::accept_loop() {
  while (!stopping_.load()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 100);
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const std::lock_guard<std::mutex> lock(connections_mu_);
    connections_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

void Server::serve_connection(int fd) {
  std::string buffer;
  char chunk[4096];
  while (!stopping_.load()) {
    pollfd pfd{fd, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 100);
    if (ready < 0) break;
    if (ready == 0) continue;
    const ssize_t got = ::recv(fd, chunk, sizeof(chunk), 0);
    if (got <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(got));

    std::size_t newline;
    while ((newline = buffer.find('\n')) != std::string::npos) {
      std::string line = buffer.substr(0, newline);
      buffer.erase(0, newline + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string response = handle_request_line(*wb_, line) + "\n";
      std::size_t sent = 0;
      while (sent < response.size()) {
        const ssize_t n = ::send(fd, response.data() + sent, response.size() - sent, 0);
        if (n <= 0) {
          ::close(fd);
          return;
        }
        sent += static_cast<std::size_t>(n);
      }
    }
  }
  ::close(fd);
}

void Server::stop() {
  if (!running_.load()) return;
  stopping_.store(true);
  if (accept_thread_.joinable()) accept_thread_.join();
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  std::vector<std::thread> conns;
  {
    const std::lock_guard<std::mutex> lock(connections_mu_);
    conns.swap(connections_);
  }
  for (auto& t : conns) t.join();
  running_.store(false);
}

}  // namespace poiverify::serve
