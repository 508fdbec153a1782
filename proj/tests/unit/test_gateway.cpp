#include <gtest/gtest.h>

#include <atomic>
#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <filesystem>
#include <random>
#include <thread>

#include "livewatch/agent.hpp"
#include "livewatch/gateway.hpp"
#include "livewatch/persistence.hpp"
#include "livewatch/wire.hpp"

using namespace livewatch;
using namespace std::chrono_literals;
namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

class Host {
 public:
  Host() {
    agent.register_observable("n", [this] { return Value(n.load()); });
    agent.register_observable("lr", [this] { return Value(lr.load()); },
                              [this](const Value& v) { lr = v.to_double(); });
    agent.declare_event("tick");
    thread = std::thread([this] {
      while (running) {
        ++n;
        agent.notify("tick");
        std::this_thread::sleep_for(1ms);
      }
    });
  }
  ~Host() {
    running = false;
    thread.join();
    agent.shutdown();
  }
  client::Address address() const { return {"127.0.0.1", agent.control_port()}; }

  Agent agent;
  std::atomic<std::int64_t> n{0};
  std::atomic<double> lr{0.1};
  std::atomic<bool> running{true};
  std::thread thread;
};

struct HttpResult {
  unsigned status;
  Value body;
};

HttpResult request(std::uint16_t port, http::verb verb, const std::string& target, const std::string& body = "") {
  asio::io_context io;
  tcp::socket sock(io);
  sock.connect({asio::ip::make_address("127.0.0.1"), port});
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "127.0.0.1");
  if (!body.empty()) {
    req.set(http::field::content_type, "application/json");
    req.body() = body;
  }
  req.prepare_payload();
  http::write(sock, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(sock, buf, res);
  Value v;
  if (!res.body().empty()) v = wire::decode_value(res.body());
  return {res.result_int(), v};
}

class WsClient {
 public:
  WsClient(std::uint16_t port, const std::string& target) : ws_(io_) {
    auto& sock = beast::get_lowest_layer(ws_);
    sock.connect({asio::ip::make_address("127.0.0.1"), port});
    ws_.handshake("127.0.0.1", target);
  }
  Value read() {
    beast::flat_buffer buf;
    ws_.read(buf);
    return wire::decode_value(beast::buffers_to_string(buf.data()));
  }
  void close() { ws_.close(websocket::close_code::normal); }

 private:
  asio::io_context io_;
  websocket::stream<tcp::socket> ws_;
};

gateway::GatewayOptions fast_options() {
  gateway::GatewayOptions o;
  o.ping_interval = 100ms;
  o.retry_interval = 200ms;
  return o;
}

std::string str(const Value& v, const char* key) { return v.find(key)->as_str(); }

}  // namespace

TEST(Gateway, AgentTableAndEvents) {
  Host host;
  auto opts = fast_options();
  opts.agents.push_back(host.address());
  gateway::Gateway gw(opts);
  auto r = request(gw.port(), http::verb::get, "/agents");
  ASSERT_EQ(r.status, 200u);
  const auto& agents = r.body.find("agents")->as_list();
  ASSERT_EQ(agents.size(), 1u);
  EXPECT_EQ(str(agents[0], "agent_id"), "a1");
  EXPECT_EQ(str(agents[0], "state"), "connected");
  auto ev = request(gw.port(), http::verb::get, "/agents/a1/events");
  ASSERT_EQ(ev.status, 200u);
  EXPECT_EQ(*ev.body.find("events"), Value::list({"tick"}));
  EXPECT_EQ(request(gw.port(), http::verb::get, "/agents/a9/events").status, 404u);
  EXPECT_EQ(request(gw.port(), http::verb::get, "/nope").status, 404u);
}

TEST(Gateway, StreamOverWebSocket) {
  Host host;
  auto opts = fast_options();
  opts.agents.push_back(host.address());
  gateway::Gateway gw(opts);
  auto created = request(gw.port(), http::verb::post, "/streams",
                         R"j({"agent_id":"a1","event":"tick","query":"map(b -> b.n)"})j");
  ASSERT_EQ(created.status, 200u) << wire::encode_value(created.body);
  const std::string gid = str(created.body, "gstream_id");
  WsClient ws(gw.port(), "/ws?streams=" + gid);
  std::optional<std::uint64_t> last;
  for (int i = 0; i < 20; ++i) {
    const Value m = ws.read();
    EXPECT_EQ(str(m, "gstream_id"), gid);
    EXPECT_EQ(str(m, "agent_id"), "a1");
    EXPECT_EQ(str(m, "kind"), "item");
    const auto seq = static_cast<std::uint64_t>(m.find("seq")->as_int());
    if (last) {
      EXPECT_GT(seq, *last);
    }
    last = seq;
  }
  auto listing = request(gw.port(), http::verb::get, "/streams");
  ASSERT_EQ(listing.body.find("streams")->as_list().size(), 1u);
  EXPECT_EQ(request(gw.port(), http::verb::delete_, "/streams/" + gid).status, 200u);
  for (;;) {
    const Value m = ws.read();
    if (str(m, "kind") == "closed") break;
  }
  EXPECT_EQ(request(gw.port(), http::verb::delete_, "/streams/" + gid).status, 404u);
}

TEST(Gateway, ErrorMapping) {
  Host host;
  auto opts = fast_options();
  opts.agents.push_back(host.address());
  gateway::Gateway gw(opts);
  auto bad = request(gw.port(), http::verb::post, "/streams", R"j({"agent_id":"a1","event":"tick","query":"map("})j");
  EXPECT_EQ(bad.status, 400u);
  EXPECT_EQ(str(bad.body, "code"), "parse_error");
  auto unknown = request(gw.port(), http::verb::post, "/streams", R"j({"agent_id":"a1","event":"x","query":"reduce(count)"})j");
  EXPECT_EQ(str(unknown.body, "code"), "unknown_event");
  auto noagent = request(gw.port(), http::verb::post, "/streams", R"j({"agent_id":"zz","event":"x","query":"reduce(count)"})j");
  EXPECT_EQ(noagent.status, 404u);
  EXPECT_EQ(str(noagent.body, "code"), "unknown_agent");
  auto ro = request(gw.port(), http::verb::post, "/observables", R"j({"agent_id":"a1","name":"n","value":3})j");
  EXPECT_EQ(str(ro.body, "code"), "readonly");
  auto body = request(gw.port(), http::verb::post, "/streams", "not json");
  EXPECT_EQ(body.status, 400u);
}

TEST(Gateway, SetObservable) {
  Host host;
  auto opts = fast_options();
  opts.agents.push_back(host.address());
  gateway::Gateway gw(opts);
  auto r = request(gw.port(), http::verb::post, "/observables", R"j({"agent_id":"a1","name":"lr","value":0.5})j");
  ASSERT_EQ(r.status, 200u);
  const auto deadline = std::chrono::steady_clock::now() + 5s;
  while (host.lr.load() != 0.5 && std::chrono::steady_clock::now() < deadline) std::this_thread::sleep_for(5ms);
  EXPECT_EQ(host.lr.load(), 0.5);
}

TEST(Gateway, LostAgentIsRetried) {
  auto host = std::make_unique<Host>();
  const auto addr = host->address();
  auto opts = fast_options();
  opts.agents.push_back(addr);
  gateway::Gateway gw(opts);
  host.reset();
  auto state = [&] { return str(request(gw.port(), http::verb::get, "/agents").body.find("agents")->as_list()[0], "state"); };
  auto deadline = std::chrono::steady_clock::now() + 5s;
  while (state() != "lost" && std::chrono::steady_clock::now() < deadline) std::this_thread::sleep_for(20ms);
  EXPECT_EQ(state(), "lost");
  auto unreachable = request(gw.port(), http::verb::post, "/streams", R"j({"agent_id":"a1","event":"tick","query":"reduce(count)"})j");
  EXPECT_EQ(unreachable.status, 502u);
  EXPECT_EQ(str(unreachable.body, "code"), "agent_unreachable");
}

TEST(Gateway, ReplayStartsOnFirstSubscriber) {
  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / ("livewatch-gw-" + std::to_string(std::random_device{}()) + ".twstream");
  {
    persistence::Recorder rec(path, {"batch", "map(b -> b.loss)", 0});
    for (std::uint64_t i = 0; i < 5; ++i)
      rec.consume({"s1", i, 1.0 + static_cast<double>(i), wire::DataKind::Item, Value(static_cast<double>(i)), std::nullopt});
    rec.consume({"s1", 5, 6.0, wire::DataKind::Closed, std::nullopt, std::nullopt});
  }
  gateway::Gateway gw(fast_options());
  auto bad = request(gw.port(), http::verb::post, "/replays", R"j({"path":"/nonexistent.twstream"})j");
  EXPECT_EQ(str(bad.body, "code"), "io_error");
  auto r = request(gw.port(), http::verb::post, "/replays", "{\"path\":" + wire::encode_value(Value(path.string())) + ",\"speed\":\"max\"}");
  ASSERT_EQ(r.status, 200u) << wire::encode_value(r.body);
  EXPECT_EQ(str(r.body, "agent_id"), "replay:1");
  const std::string gid = str(r.body, "gstream_id");
  // Nothing is lost before the subscriber attaches.
  std::this_thread::sleep_for(100ms);
  WsClient ws(gw.port(), "/ws?streams=*");
  for (int i = 0; i < 5; ++i) {
    const Value m = ws.read();
    EXPECT_EQ(str(m, "gstream_id"), gid);
    EXPECT_EQ(*m.find("value"), Value(static_cast<double>(i)));
  }
  EXPECT_EQ(str(ws.read(), "kind"), "closed");
  fs::remove(path);
}

TEST(Gateway, BindErrorOnBusyPort) {
  gateway::Gateway first(fast_options());
  auto opts = fast_options();
  opts.port = first.port();
  EXPECT_THROW(gateway::Gateway second(opts), gateway::BindError);
}
