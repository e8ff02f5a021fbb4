#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <thread>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "poiverify/serve.hpp"

using namespace poiverify;
using nlohmann::json;

namespace {

// in-process workbench, no disk artifacts
std::shared_ptr<runtime::Workbench> make_workbench() {
  auto wb = std::make_shared<runtime::Workbench>();
  auto& cfg = wb->cfg;
  cfg.corpus.seed = 91;
  cfg.corpus.n_pois = 20;
  cfg.corpus.views_per_poi = 2;
  cfg.corpus.test_poi_ratio = 0.3;
  cfg.corpus.test_views_per_poi = 2;
  cfg.corpus.noise = model::NoiseParams::none();
  cfg.hyper = {5, 8, 0.2};
  cfg.pipeline_cfg.search_nodes = 64;

  wb->corpus = model::generate_corpus(cfg.corpus);
  wb->channel = runtime::make_channel(cfg.ocr);
  wb->corrector = runtime::fit_corrector_from_corpus(*wb->corpus, *wb->channel);
  wb->spatial = geoindex::build_spatial_index(wb->corpus->pois, cfg.geo_precision);
  wb->table = pipeline::NameTable::from_corpus(wb->corpus->pois, true);
  wb->params = embedder::EmbedderParams::init(cfg.hyper, 3);
  annindex::EmbeddingSet set;
  for (const auto& poi : wb->corpus->pois)
    set.emplace_back(poi.id,
                     embedder::embed(poi.signboard, poi.location, *wb->params).vec);
  wb->forest = annindex::AnnForest::build(set, 4, 8, 9);
  return wb;
}

struct Client {
  int fd = -1;

  explicit Client(std::uint16_t port) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  }
  ~Client() {
    if (fd >= 0) ::close(fd);
  }

  void send_line(const std::string& line) {
    const std::string payload = line + "\n";
    std::size_t sent = 0;
    while (sent < payload.size()) {
      const ssize_t n = ::send(fd, payload.data() + sent, payload.size() - sent, 0);
      REQUIRE(n > 0);
      sent += static_cast<std::size_t>(n);
    }
  }

  std::string recv_line() {
    std::string line;
    char c;
    for (;;) {
      const ssize_t n = ::recv(fd, &c, 1, 0);
      REQUIRE(n == 1);
      if (c == '\n') return line;
      line.push_back(c);
    }
  }
};

json request_json(const runtime::Workbench& wb, std::size_t sub_index,
                  const std::string& variant) {
  const auto reqs = evalbench::test_requests(*wb.corpus, 0);
  const auto& req = reqs.at(sub_index);
  return {{"signboard", base64_encode(req.signboard.pixels)},
          {"lon", req.shot_location.lon},
          {"lat", req.shot_location.lat},
          {"variant", variant},
          {"name", req.depicted_name}};
}

}  // namespace

TEST_CASE("request/response roundtrip matches the in-process path") {
  const auto wb = make_workbench();
  serve::Server server(wb);
  const auto port = server.start(0);
  REQUIRE(port != 0);

  const auto reqs = evalbench::test_requests(*wb->corpus, 0);
  REQUIRE(!reqs.empty());

  Client client(port);
  for (const std::string variant : {"v1", "v1*", "v2", "v2*"}) {
    client.send_line(request_json(*wb, 0, variant).dump());
    const auto response = json::parse(client.recv_line());
    REQUIRE(!response.contains("error"));
    CHECK(response.at("variant").get<std::string>() == variant);

    const auto direct =
        wb->verify(pipeline::variant_from_name(variant), reqs[0]);
    const auto expected = json::parse(serve::result_to_json(direct));
    CHECK(response.at("ranked") == expected.at("ranked"));
  }
  server.stop();
  CHECK(!server.running());
}

TEST_CASE("malformed lines produce an error object and keep the connection") {
  const auto wb = make_workbench();
  serve::Server server(wb);
  const auto port = server.start(0);

  Client client(port);
  client.send_line("this is not json");
  auto response = json::parse(client.recv_line());
  CHECK(response.contains("error"));

  client.send_line("{\"lon\": 1}");
  response = json::parse(client.recv_line());
  CHECK(response.contains("error"));

  // a valid request still works on the same connection
  client.send_line(request_json(*wb, 0, "v2").dump());
  response = json::parse(client.recv_line());
  CHECK(!response.contains("error"));
  CHECK(response.contains("ranked"));
  server.stop();
}

TEST_CASE("four concurrent clients get responses matched to their requests") {
  const auto wb = make_workbench();
  serve::Server server(wb);
  const auto port = server.start(0);

  const auto reqs = evalbench::test_requests(*wb->corpus, 0);
  const std::size_t n_reqs = std::min<std::size_t>(reqs.size(), 8);

  std::vector<std::thread> clients;
  std::vector<std::string> failures(4);
  for (int c = 0; c < 4; ++c) {
    clients.emplace_back([&, c] {
      Client client(port);
      for (std::size_t i = 0; i < n_reqs; ++i) {
        const std::size_t idx = (c + i) % n_reqs;
        client.send_line(request_json(*wb, idx, "v2").dump());
        const auto response = json::parse(client.recv_line());
        const auto direct = wb->verify(pipeline::Variant::v2, reqs[idx]);
        const auto expected = json::parse(serve::result_to_json(direct));
        if (response.at("ranked") != expected.at("ranked")) {
          failures[c] = "mismatch at request " + std::to_string(idx);
          return;
        }
      }
    });
  }
  for (auto& t : clients) t.join();
  for (const auto& f : failures) CHECK(f.empty());
  server.stop();
}

TEST_CASE("stop drains and the port is reusable") {
  const auto wb = make_workbench();
  auto server = std::make_unique<serve::Server>(wb);
  const auto port = server->start(0);
  {
    Client client(port);
    client.send_line(request_json(*wb, 0, "v2").dump());
    (void)client.recv_line();
  }
  server->stop();
  CHECK(!server->running());

  serve::Server second(wb);
  const auto port2 = second.start(port);  // SO_REUSEADDR makes this safe
  CHECK(port2 == port);
  second.stop();
}
