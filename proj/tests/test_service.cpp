#include <doctest.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <cstring>

#include "nca/service/server.hpp"
#include "nca/service/session.hpp"
#include "oracles.hpp"

using namespace nca;
using namespace nca::service;

namespace {

std::shared_ptr<const io::Model> test_model(uint64_t seed = 1, int n_g = 1) {
  Rng rng(seed, Rng::init);
  io::Model m;
  m.params = UpdateRuleParams::initial({8, 16, n_g}, rng);
  for (float& v : m.params.w2.value.data()) v = 0.05f * rng.normal();
  m.metadata["fire_rate"] = 0.5f;
  return std::make_shared<const io::Model>(std::move(m));
}

SessionOptions options(int genome, int h = 8, int w = 8) {
  SessionOptions o;
  o.height = h;
  o.width = w;
  o.layout = GraftLayout::parse("halves", {genome, genome});
  o.seed = 5;
  return o;
}

Ack run_command(Session& s, const json& j) {
  const auto st = s.status();
  auto fut = s.submit_async(parse_command(j, st.height, st.width, s.genome_channels()));
  s.tick();
  return fut.get();
}

}  // namespace

TEST_CASE("frame encoding") {
  const std::string f = encode_frame(0x0102030405060708ull, {9, 10, 11});
  REQUIRE(f.size() == 11);
  CHECK(static_cast<uint8_t>(f[0]) == 0x08);
  CHECK(static_cast<uint8_t>(f[7]) == 0x01);
  CHECK(static_cast<uint8_t>(f[8]) == 9);
}

TEST_CASE("command parsing") {
  const Command d = parse_command(json{{"type", "damage"}, {"x", 3}, {"y", 4}, {"radius", 2.5}, {"id", "a"}}, 8, 8, 1);
  CHECK(d.type == "damage");
  CHECK(d.id == json("a"));
  CHECK(std::get<cmd::Damage>(d.body).radius == 2.5f);
  CHECK(std::get<cmd::Step>(parse_command(json{{"type", "step"}}, 8, 8, 1).body).count == 1);
  CHECK(std::get<cmd::Step>(parse_command(json{{"type", "step"}, {"k", 4}}, 8, 8, 1).body).count == 4);
  const Command r = parse_command(json::parse(R"({"type":"reset","layout":{"kind":"stripes","count":2,"genomes":[0,1]}})"), 8, 8, 1);
  CHECK(std::get<cmd::Reset>(r.body).layout.kind == LayoutKind::stripes);
  const Command p = parse_command(json::parse(R"({"type":"paint_genome","runs":[[0,4],[8,4]],"genome_index":1})"), 8, 8, 1);
  CHECK(std::get<cmd::PaintGenome>(p.body).runs.size() == 2);

  for (const char* bad : {R"({"x":1})", R"({"type":"explode"})", R"({"type":"damage","x":8,"y":0,"radius":1})",
                          R"({"type":"damage","x":1,"y":1})", R"({"type":"paint_genome","runs":[[60,10]],"genome_index":0})",
                          R"({"type":"paint_genome","runs":[[0,1]],"genome_index":2})", R"({"type":"step","k":0})",
                          R"({"type":"set_stride","stride":0})", R"({"type":"paint_genome","mask_id":"m","genome_index":0})"})
    CHECK_THROWS_AS(parse_command(json::parse(bad), 8, 8, 1), std::invalid_argument);
}

TEST_CASE("manual ticks follow plain synthesis") {
  const auto model = test_model();
  Session s("s", "m", model, options(1));
  CHECK_FALSE(s.tick());
  CHECK(s.grid() == seed_of_genome(8, 8, genome_of_index(1, 1), 8));

  std::vector<uint64_t> frames;
  const int token = s.subscribe([&](const Message& m) {
    if (m.binary) {
      uint64_t step = 0;
      std::memcpy(&step, m.payload.data(), 8);
      frames.push_back(step);
      CHECK(m.payload.size() == 8 + 3 * 64);
    }
  });
  const Ack a = run_command(s, {{"type", "step"}, {"k", 3}, {"id", 7}});
  CHECK(a.ok);
  CHECK(a.applied_at_step == 0);
  CHECK(a.to_json()["id"] == 7);
  CHECK(s.tick());
  CHECK(s.tick());
  CHECK_FALSE(s.tick());
  CHECK(s.status().step == 3);
  CHECK(frames == std::vector<uint64_t>{1, 2, 3});
  CHECK(s.grid() == synthesize(model->params, 1, 8, 8, 3, {0.5f, 5, 0}));
  CHECK(s.snapshot_rgb() == io::to_rgb8(to_rgb(s.grid())));
  s.unsubscribe(token);

  CHECK(run_command(s, {{"type", "set_stride"}, {"stride", 2}}).ok);
  CHECK(run_command(s, {{"type", "resume"}}).ok);
  CHECK(s.status().running);
  CHECK(s.status().step == 4);
  CHECK(run_command(s, {{"type", "pause"}}).ok);
  CHECK(s.status().step == 4);
  CHECK(s.status().stride == 2);
  CHECK(s.grid() == synthesize(model->params, 1, 8, 8, 4, {0.5f, 5, 0}));
}

TEST_CASE("damage, paint and reset commands") {
  const auto model = test_model();
  Session s("s", "m", model, options(0, 16, 16));
  run_command(s, {{"type", "step"}, {"k", 2}});
  s.tick();
  const CellGrid before = s.grid();
  CHECK(run_command(s, {{"type", "damage"}, {"x", 5}, {"y", 6}, {"radius", 3}, {"fill", "zero"}}).ok);
  const CellGrid after = s.grid();
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const bool in = (x - 5) * (x - 5) + (y - 6) * (y - 6) <= 9;
      for (int c = 0; c < 8; ++c) CHECK(after.at(c, y, x) == (in ? 0.0f : before.at(c, y, x)));
    }

  CHECK(run_command(s, {{"type", "paint_genome"}, {"runs", {{0, 16}}}, {"genome_index", 1}}).ok);
  for (int x = 0; x < 16; ++x) {
    CHECK(s.grid().at(7, 0, x) == 1.0f);
    CHECK(s.grid().at(7, 1, x) == after.at(7, 1, x));
  }

  CHECK(run_command(s, json::parse(R"({"type":"reset","layout":{"kind":"halves","genomes":[1,1]}})")).ok);
  CHECK(s.grid() == seed_of_genome(16, 16, genome_of_index(1, 1), 8));

  const Ack pt = run_command(s, json::parse(R"({"type":"patch_transfer","source_genome":0,"region":{"kind":"rect","x0":0,"y0":0,"x1":16,"y1":16}})"));
  CHECK(pt.ok);
  CHECK(s.grid() == seed_of_genome(16, 16, genome_of_index(0, 1), 8));
}

TEST_CASE("http routes") {
  Registry reg;
  const auto dir = std::filesystem::temp_directory_path();
  io::save_weights(dir / "nca_unit_service.ncaw", test_model()->params, {{"fire_rate", 0.5f}});

  HttpResult r = handle_http(reg, "POST", "/models", R"({"path":"nca_unit_service.ncaw"})", dir);
  REQUIRE(r.status == 201);
  const std::string model_id = json::parse(r.body)["model_id"];
  CHECK(handle_http(reg, "POST", "/models", R"({"path":"missing.ncaw"})", dir).status == 422);
  CHECK(handle_http(reg, "POST", "/models", R"({"path":)", dir).status == 400);

  r = handle_http(reg, "POST", "/sessions",
                  json{{"model_id", model_id}, {"h", 12}, {"w", 10}, {"layout", {{"kind", "halves"}, {"genomes", {0, 1}}}}}.dump());
  REQUIRE(r.status == 201);
  const std::string sid = json::parse(r.body)["session_id"];
  CHECK(handle_http(reg, "POST", "/sessions", R"({"model_id":"nope"})").status == 404);
  CHECK(handle_http(reg, "POST", "/sessions", json{{"model_id", model_id}, {"layout", {{"kind", "halves"}, {"genomes", {0, 5}}}}}.dump()).status == 400);

  r = handle_http(reg, "GET", "/sessions/" + sid, "");
  CHECK(r.status == 200);
  const json st = json::parse(r.body);
  CHECK(st["height"] == 12);
  CHECK(st["width"] == 10);
  CHECK(st["state"] == "paused");
  CHECK(json::parse(handle_http(reg, "GET", "/sessions", "").body)["sessions"].size() == 1);

  r = handle_http(reg, "GET", "/sessions/" + sid + "/snapshot.png", "");
  CHECK(r.status == 200);
  CHECK(r.content_type == "image/png");
  CHECK(r.body.substr(1, 3) == "PNG");

  CHECK(handle_http(reg, "DELETE", "/sessions/" + sid, "").status == 200);
  CHECK(handle_http(reg, "GET", "/sessions/" + sid, "").status == 404);
  CHECK(handle_http(reg, "GET", "/nothing", "").status == 404);
  std::filesystem::remove(dir / "nca_unit_service.ncaw");
}

TEST_CASE("websocket round trip") {
  namespace beast = boost::beast;
  namespace net = boost::asio;
  Registry reg;
  const std::string model_id = reg.add_model(test_model());
  SessionOptions opt = options(1);
  opt.heartbeat_seconds = 0.05;
  const auto session = reg.create_session(model_id, opt);

  Server server(reg, "127.0.0.1", 0);
  server.start(1);
  REQUIRE(server.port() != 0);

  net::io_context ioc;
  net::ip::tcp::resolver resolver(ioc);
  beast::websocket::stream<beast::tcp_stream> ws(ioc);
  beast::get_lowest_layer(ws).connect(*resolver.resolve("127.0.0.1", std::to_string(server.port())).begin());
  beast::get_lowest_layer(ws).expires_after(std::chrono::seconds(10));
  ws.handshake("127.0.0.1", "/sessions/" + session->id());
  ws.write(net::buffer(std::string(R"({"type":"step","k":2,"id":"q"})")));
  ws.write(net::buffer(std::string(R"({"type":"warp"})")));

  bool acked = false, rejected = false, heartbeat = false;
  std::vector<uint64_t> steps;
  std::string last_frame;
  while (!(acked && rejected && heartbeat && steps.size() >= 2)) {
    beast::flat_buffer buf;
    ws.read(buf);
    const std::string payload = beast::buffers_to_string(buf.data());
    if (ws.got_binary()) {
      uint64_t s = 0;
      std::memcpy(&s, payload.data(), 8);
      steps.push_back(s);
      last_frame = payload;
      continue;
    }
    const json j = json::parse(payload);
    if (j["type"] == "heartbeat") heartbeat = true;
    if (j["type"] == "ack" && j.value("id", json()) == "q") {
      CHECK(j["ok"] == true);
      acked = true;
    }
    if (j["type"] == "ack" && j["ok"] == false) rejected = true;
  }
  CHECK(steps == std::vector<uint64_t>{1, 2});
  CHECK(last_frame.substr(8) == std::string(reinterpret_cast<const char*>(io::to_rgb8(to_rgb(synthesize(test_model()->params, 1, 8, 8, 2, {0.5f, 5, 0}))).data()), 3 * 64));
  ws.close(beast::websocket::close_code::normal);
  server.stop();
}
