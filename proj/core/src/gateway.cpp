#include "livewatch/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <boost/asio.hpp>
#include <boost/asio/thread_pool.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "livewatch/persistence.hpp"
#include "livewatch/query.hpp"
#include "livewatch/wire.hpp"

namespace livewatch::gateway {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

namespace {

struct HttpError {
  http::status status;
  std::string code;
  std::string message;
};

int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::string percent_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      const int hi = hex_digit(s[i + 1]), lo = hex_digit(s[i + 2]);
      if (hi >= 0 && lo >= 0) {
        out += static_cast<char>(hi * 16 + lo);
        i += 2;
        continue;
      }
    }
    out += s[i] == '+' ? ' ' : s[i];
  }
  return out;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct Target {
  std::vector<std::string> segments;
  std::map<std::string, std::string> params;
};

Target parse_target(std::string_view target) {
  Target t;
  auto q = target.find('?');
  auto path = target.substr(0, q);
  for (auto& seg : split(path, '/'))
    if (!seg.empty()) t.segments.push_back(percent_decode(seg));
  if (q != std::string_view::npos) {
    for (auto& kv : split(target.substr(q + 1), '&')) {
      if (kv.empty()) continue;
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        t.params[percent_decode(kv)] = "";
      else
        t.params[percent_decode(kv.substr(0, eq))] = percent_decode(kv.substr(eq + 1));
    }
  }
  return t;
}

wire::Subscribe parse_stream_filter(const std::string& text) {
  wire::Subscribe s;
  for (auto& id : split(text, ',')) {
    if (id.empty()) continue;
    if (id == "*")
      s.wildcard = true;
    else
      s.streams.push_back(id);
  }
  return s;
}

const Value& require(const Value& body, const char* key, Value::Kind kind) {
  const Value* v = body.find(key);
  if (!v || v->kind() != kind)
    throw HttpError{http::status::bad_request, "parse_error",
                    std::string("field '") + key + "' missing or not " + std::string(kind_name(kind))};
  return *v;
}

}  // namespace

// ===========================================================================
// Shared state
// ===========================================================================

struct Gateway::Impl {
  struct AgentLink {
    std::string id;
    std::string address;
    client::Address endpoint;
    std::shared_ptr<client::Session> session;
    std::string last_error;
    Record cache;
    std::chrono::steady_clock::time_point next_attempt;
    bool is_replay = false;
  };

  struct ReplayJob {
    std::filesystem::path path;
    persistence::Speed speed;
    std::thread thread;
    std::mutex m;
    std::condition_variable cv;
    bool cancel = false;
    bool started = false;
  };

  struct GStream {
    std::string gid;
    std::string agent_id;
    std::string event;
    std::string query;
    std::shared_ptr<client::StreamHandle> handle;
    std::weak_ptr<client::Session> session;
    std::shared_ptr<ReplayJob> replay;
    bool closed = false;
  };

  struct Tag {
    std::string agent_id;
    std::string upstream;
  };

  struct WsSub {
    wire::Subscribe filter;
    std::shared_ptr<DeliveryQueue> queue;
  };

  explicit Impl(GatewayOptions opts) : options(std::move(opts)), pool(std::max<std::size_t>(1, options.worker_threads)) {}

  // --- agent links ---
  std::string add_agent(const client::Address& address);
  bool connect_link(const std::shared_ptr<AgentLink>& link);
  void mark_lost(const std::shared_ptr<AgentLink>& link, const std::string& why);
  void maintenance_loop();
  std::shared_ptr<AgentLink> find_agent(const std::string& id);
  std::shared_ptr<client::Session> live_session(const std::shared_ptr<AgentLink>& link);

  // --- streams ---
  void forward(const std::string& gid, const wire::DataMessage& msg);
  void start_replay_locked(GStream& gs);
  void run_replay(std::string gid, std::shared_ptr<ReplayJob> job);
  std::shared_ptr<DeliveryQueue> ws_subscribe(wire::Subscribe filter);
  void ws_unsubscribe(const std::shared_ptr<DeliveryQueue>& q);
  std::optional<std::string> render(const wire::DataMessage& queued);

  // --- http ---
  Response handle(const Request& req);
  Value api_agents();
  Value api_agent_events(const std::string& id);
  Value api_add_agent(const Value& body);
  Value api_streams();
  Value api_create_stream(const Value& body);
  Value api_delete_stream(const std::string& gid);
  Value api_set_observable(const Value& body);
  Value api_create_replay(const Value& body);

  void accept();
  void shutdown();

  GatewayOptions options;
  std::uint16_t bound_port = 0;
  std::thread io_thread;
  asio::thread_pool pool;
  std::thread maintenance;

  std::mutex mu;
  std::condition_variable kick;
  bool stopping = false;
  std::vector<std::shared_ptr<AgentLink>> agents;
  std::map<std::string, GStream> streams;
  std::map<std::string, Tag> tags;
  std::vector<WsSub> subs;
  std::uint64_t next_agent = 1;
  std::uint64_t next_replay = 1;
  std::uint64_t next_gstream = 1;

  std::mutex wait_mu;
  std::condition_variable wait_cv;
  bool stopped = false;

  // Declared last so pending handlers are destroyed while the state above
  // is still alive.
  asio::io_context io;
  tcp::acceptor acceptor{io};
};

// ===========================================================================
// Agent links
// ===========================================================================

std::string Gateway::Impl::add_agent(const client::Address& address) {
  auto link = std::make_shared<AgentLink>();
  link->endpoint = address;
  link->address = address.to_string();
  {
    std::lock_guard lk(mu);
    link->id = "a" + std::to_string(next_agent++);
    agents.push_back(link);
  }
  connect_link(link);
  return link->id;
}

bool Gateway::Impl::connect_link(const std::shared_ptr<AgentLink>& link) {
  std::shared_ptr<client::Session> session;
  Record cache;
  std::string error;
  try {
    session = client::Session::open(link->endpoint);
    cache = session->list_events();
  } catch (const std::exception& e) {
    session.reset();
    error = e.what();
  }
  std::lock_guard lk(mu);
  if (session) {
    link->session = std::move(session);
    link->cache = std::move(cache);
    link->last_error.clear();
    return true;
  }
  link->last_error = error;
  link->next_attempt = std::chrono::steady_clock::now() + options.retry_interval;
  return false;
}

void Gateway::Impl::mark_lost(const std::shared_ptr<AgentLink>& link, const std::string& why) {
  std::shared_ptr<client::Session> dead;
  {
    std::lock_guard lk(mu);
    dead = std::move(link->session);
    link->last_error = why;
    link->next_attempt = std::chrono::steady_clock::now() + options.retry_interval;
  }
  // dead is released here, outside the lock
}

void Gateway::Impl::maintenance_loop() {
  std::unique_lock lk(mu);
  while (!stopping) {
    kick.wait_for(lk, options.ping_interval, [this] { return stopping; });
    if (stopping) break;
    auto snapshot = agents;
    lk.unlock();
    const auto now = std::chrono::steady_clock::now();
    for (const auto& link : snapshot) {
      if (link->is_replay) continue;
      std::shared_ptr<client::Session> session;
      std::chrono::steady_clock::time_point due;
      {
        std::lock_guard g(mu);
        session = link->session;
        due = link->next_attempt;
      }
      if (session) {
        try {
          auto cache = session->list_events();
          std::lock_guard g(mu);
          link->cache = std::move(cache);
        } catch (const std::exception& e) {
          session.reset();
          mark_lost(link, e.what());
        }
      } else if (now >= due) {
        connect_link(link);
      }
    }
    lk.lock();
  }
}

std::shared_ptr<Gateway::Impl::AgentLink> Gateway::Impl::find_agent(const std::string& id) {
  std::lock_guard lk(mu);
  for (auto& a : agents)
    if (a->id == id) return a;
  return nullptr;
}

std::shared_ptr<client::Session> Gateway::Impl::live_session(const std::shared_ptr<AgentLink>& link) {
  std::lock_guard lk(mu);
  if (!link->session) throw HttpError{http::status::bad_gateway, "agent_unreachable", "agent " + link->id + " is not connected"};
  return link->session;
}

// ===========================================================================
// Stream fan-out
// ===========================================================================

void Gateway::Impl::forward(const std::string& gid, const wire::DataMessage& msg) {
  std::lock_guard lk(mu);
  auto& tag = tags[gid];
  if (tag.upstream.empty()) tag.upstream = msg.stream;
  if (msg.kind == wire::DataKind::Closed) {
    if (auto it = streams.find(gid); it != streams.end()) it->second.closed = true;
  }
  wire::DataMessage keyed = msg;
  keyed.stream = gid;
  for (auto& sub : subs)
    if (sub.filter.matches(gid)) sub.queue->push(keyed);
}

std::optional<std::string> Gateway::Impl::render(const wire::DataMessage& queued) {
  Tag tag;
  {
    std::lock_guard lk(mu);
    auto it = tags.find(queued.stream);
    if (it != tags.end()) tag = it->second;
  }
  wire::DataMessage out = queued;
  out.stream = tag.upstream.empty() ? queued.stream : tag.upstream;
  std::string line = wire::encode_with(out, Record{{"agent_id", Value(tag.agent_id)}, {"gstream_id", Value(queued.stream)}});
  if (!line.empty() && line.back() == '\n') line.pop_back();
  return line;
}

std::shared_ptr<DeliveryQueue> Gateway::Impl::ws_subscribe(wire::Subscribe filter) {
  auto q = std::make_shared<DeliveryQueue>(options.subscriber_capacity);
  std::lock_guard lk(mu);
  for (auto& [gid, gs] : streams)
    if (gs.replay && !gs.replay->started && filter.matches(gid)) start_replay_locked(gs);
  subs.push_back({std::move(filter), q});
  return q;
}

void Gateway::Impl::ws_unsubscribe(const std::shared_ptr<DeliveryQueue>& q) {
  std::lock_guard lk(mu);
  subs.erase(std::remove_if(subs.begin(), subs.end(), [&](const WsSub& s) { return s.queue == q; }), subs.end());
}

void Gateway::Impl::start_replay_locked(GStream& gs) {
  auto job = gs.replay;
  job->started = true;
  // Delay the first item until the subscriber list includes the caller.
  job->thread = std::thread([this, gid = gs.gid, job] {
    { std::lock_guard lk(mu); }
    run_replay(gid, job);
  });
}

void Gateway::Impl::run_replay(std::string gid, std::shared_ptr<ReplayJob> job) {
  auto cancelled = [&] {
    std::lock_guard lk(job->m);
    return job->cancel;
  };
  std::string upstream = "replay";
  std::optional<std::uint64_t> last;
  double t = 0.0;
  bool saw_closed = false;
  try {
    persistence::Replayer r(job->path, job->speed);
    r.set_sleeper([job](std::chrono::steady_clock::time_point due) {
      std::unique_lock lk(job->m);
      job->cv.wait_until(lk, due, [&] { return job->cancel; });
    });
    while (!cancelled()) {
      auto m = r.next();
      if (!m || cancelled()) break;
      upstream = m->stream;
      last = m->seq;
      t = m->t;
      saw_closed = m->kind == wire::DataKind::Closed;
      forward(gid, *m);
      if (saw_closed) break;
    }
  } catch (const std::exception& e) {
    const std::uint64_t seq = last ? *last + 1 : 0;
    forward(gid, {upstream, seq, t, wire::DataKind::Error, Value(std::string(e.what())), std::nullopt});
    last = seq;
  }
  if (!saw_closed) forward(gid, {upstream, last ? *last + 1 : 0, t, wire::DataKind::Closed, std::nullopt, std::nullopt});
}

// ===========================================================================
// HTTP API
// ===========================================================================

Value Gateway::Impl::api_agents() {
  List out;
  std::lock_guard lk(mu);
  for (const auto& a : agents) {
    Record r{{"agent_id", Value(a->id)},
             {"address", Value(a->address)},
             {"state", Value(a->is_replay ? "replay" : (a->session ? "connected" : "lost"))}};
    const Value* ev = nullptr;
    const Value* obs = nullptr;
    for (const auto& [k, v] : a->cache) {
      if (k == "events") ev = &v;
      if (k == "observables") obs = &v;
    }
    r.emplace_back("events", ev ? *ev : Value(List{}));
    r.emplace_back("observables", obs ? *obs : Value(List{}));
    if (!a->last_error.empty() && !a->session && !a->is_replay) r.emplace_back("error", Value(a->last_error));
    out.emplace_back(std::move(r));
  }
  return Value(Record{{"agents", Value(std::move(out))}});
}

Value Gateway::Impl::api_agent_events(const std::string& id) {
  auto link = find_agent(id);
  if (!link) throw HttpError{http::status::not_found, "unknown_agent", "no agent " + id};
  if (link->is_replay) {
    std::lock_guard lk(mu);
    return Value(link->cache);
  }
  auto session = live_session(link);
  try {
    auto fields = session->list_events();
    std::lock_guard lk(mu);
    link->cache = fields;
    return Value(std::move(fields));
  } catch (const client::AgentError& e) {
    throw HttpError{http::status::bad_request, std::string(wire::to_string(e.code())), e.message()};
  } catch (const client::ClientError& e) {
    session.reset();
    mark_lost(link, e.what());
    throw HttpError{http::status::bad_gateway, "agent_unreachable", e.what()};
  }
}

Value Gateway::Impl::api_add_agent(const Value& body) {
  const auto& addr = require(body, "address", Value::Kind::Str).as_str();
  client::Address a;
  try {
    a = client::Address::parse(addr);
  } catch (const std::exception& e) {
    throw HttpError{http::status::bad_request, "parse_error", e.what()};
  }
  auto id = add_agent(a);
  return Value(Record{{"agent_id", Value(id)}});
}

Value Gateway::Impl::api_streams() {
  List out;
  std::lock_guard lk(mu);
  for (const auto& [gid, gs] : streams) {
    if (gs.closed) continue;
    out.emplace_back(Record{{"gstream_id", Value(gid)},
                            {"agent_id", Value(gs.agent_id)},
                            {"event", Value(gs.event)},
                            {"query", Value(gs.query)}});
  }
  return Value(Record{{"streams", Value(std::move(out))}});
}

Value Gateway::Impl::api_create_stream(const Value& body) {
  const auto& agent_id = require(body, "agent_id", Value::Kind::Str).as_str();
  const auto& event = require(body, "event", Value::Kind::Str).as_str();
  const auto& query_text = require(body, "query", Value::Kind::Str).as_str();
  std::optional<query::WindowMode> window;
  if (const Value* w = body.find("window"); w && !w->is_null()) {
    if (!w->is_str()) throw HttpError{http::status::bad_request, "parse_error", "field 'window' must be a string"};
    try {
      window = query::parse_window(w->as_str());
    } catch (const std::exception& e) {
      throw HttpError{http::status::bad_request, "parse_error", e.what()};
    }
  }
  auto link = find_agent(agent_id);
  if (!link) throw HttpError{http::status::not_found, "unknown_agent", "no agent " + agent_id};
  if (link->is_replay)
    throw HttpError{http::status::bad_request, "unknown_event", "replay sources do not accept new streams"};
  auto session = live_session(link);

  std::string gid;
  {
    std::lock_guard lk(mu);
    gid = "g" + std::to_string(next_gstream++);
    tags[gid] = Tag{agent_id, ""};
  }
  std::shared_ptr<client::StreamHandle> handle;
  try {
    handle = session->create_stream(event, query_text, window,
                                    [this, gid](const wire::DataMessage& m) { forward(gid, m); });
  } catch (const client::AgentError& e) {
    throw HttpError{http::status::bad_request, std::string(wire::to_string(e.code())), e.message()};
  } catch (const client::ClientError& e) {
    session.reset();
    mark_lost(link, e.what());
    throw HttpError{http::status::bad_gateway, "agent_unreachable", e.what()};
  }
  {
    std::lock_guard lk(mu);
    tags[gid].upstream = handle->stream_id();
    GStream gs;
    gs.gid = gid;
    gs.agent_id = agent_id;
    gs.event = event;
    gs.query = handle->query();
    gs.handle = handle;
    gs.session = session;
    gs.closed = handle->closed();
    streams.emplace(gid, std::move(gs));
  }
  return Value(Record{{"gstream_id", Value(gid)}});
}

Value Gateway::Impl::api_delete_stream(const std::string& gid) {
  std::shared_ptr<client::StreamHandle> handle;
  std::shared_ptr<client::Session> session;
  std::shared_ptr<ReplayJob> replay;
  {
    std::lock_guard lk(mu);
    auto it = streams.find(gid);
    if (it == streams.end() || it->second.closed)
      throw HttpError{http::status::not_found, "unknown_stream", "no open gateway stream " + gid};
    handle = it->second.handle;
    session = it->second.session.lock();
    replay = it->second.replay;
  }
  if (replay) {
    bool started = false;
    {
      std::lock_guard lk(mu);
      started = replay->started;
    }
    {
      std::lock_guard lk(replay->m);
      replay->cancel = true;
    }
    replay->cv.notify_all();
    if (!started) forward(gid, {"replay", 0, 0.0, wire::DataKind::Closed, std::nullopt, std::nullopt});
    return Value(Record{});
  }
  if (session) {
    try {
      session->close_stream(*handle);
      return Value(Record{});
    } catch (const client::AgentError& e) {
      if (e.code() != wire::ErrorCode::UnknownStream)
        throw HttpError{http::status::bad_request, std::string(wire::to_string(e.code())), e.message()};
    } catch (const client::ClientError&) {
      // upstream already gone; close locally below
    }
  }
  if (!handle->closed()) {
    auto last = handle->last_seen_seq();
    forward(gid, {handle->stream_id(), last ? *last + 1 : 0, 0.0, wire::DataKind::Closed, std::nullopt, std::nullopt});
  }
  return Value(Record{});
}

Value Gateway::Impl::api_set_observable(const Value& body) {
  const auto& agent_id = require(body, "agent_id", Value::Kind::Str).as_str();
  const auto& name = require(body, "name", Value::Kind::Str).as_str();
  const Value* value = body.find("value");
  if (!value) throw HttpError{http::status::bad_request, "parse_error", "field 'value' missing"};
  std::optional<std::string> at_event;
  if (const Value* e = body.find("at_event"); e && e->is_str()) at_event = e->as_str();
  auto link = find_agent(agent_id);
  if (!link) throw HttpError{http::status::not_found, "unknown_agent", "no agent " + agent_id};
  if (link->is_replay)
    throw HttpError{http::status::bad_request, "unknown_observable", "replay sources have no observables"};
  auto session = live_session(link);
  try {
    session->set_observable(name, *value, at_event);
  } catch (const client::AgentError& e) {
    throw HttpError{http::status::bad_request, std::string(wire::to_string(e.code())), e.message()};
  } catch (const client::ClientError& e) {
    session.reset();
    mark_lost(link, e.what());
    throw HttpError{http::status::bad_gateway, "agent_unreachable", e.what()};
  }
  return Value(Record{});
}

Value Gateway::Impl::api_create_replay(const Value& body) {
  const auto& path = require(body, "path", Value::Kind::Str).as_str();
  persistence::Speed speed = persistence::Speed::max();
  if (const Value* s = body.find("speed"); s && !s->is_null()) {
    try {
      speed = s->is_str() ? persistence::Speed::parse(s->as_str()) : persistence::Speed::times(s->to_double());
    } catch (const std::exception& e) {
      throw HttpError{http::status::bad_request, "parse_error", std::string("bad speed: ") + e.what()};
    }
  }
  persistence::Header header;
  try {
    header = persistence::Replayer(path).header();
  } catch (const persistence::MalformedHeader& e) {
    throw HttpError{http::status::bad_request, "malformed_header", e.what()};
  } catch (const std::exception& e) {
    throw HttpError{http::status::bad_request, "io_error", e.what()};
  }
  auto link = std::make_shared<AgentLink>();
  link->is_replay = true;
  link->address = path;
  link->cache = Record{{"events", Value(List{Value(header.event)})}, {"observables", Value(List{})}};
  auto job = std::make_shared<ReplayJob>();
  job->path = path;
  job->speed = speed;

  std::lock_guard lk(mu);
  link->id = "replay:" + std::to_string(next_replay++);
  agents.push_back(link);
  const std::string gid = "g" + std::to_string(next_gstream++);
  tags[gid] = Tag{link->id, ""};
  GStream gs;
  gs.gid = gid;
  gs.agent_id = link->id;
  gs.event = header.event;
  gs.query = header.query;
  gs.replay = job;
  streams.emplace(gid, std::move(gs));
  return Value(Record{{"agent_id", Value(link->id)}, {"gstream_id", Value(gid)}});
}

namespace {

Response make_response(const Request& req, http::status status, const Value& body) {
  Response res{status, req.version()};
  res.set(http::field::content_type, "application/json");
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = wire::encode_value(body);
  res.body() += '\n';
  res.prepare_payload();
  return res;
}

Response make_error(const Request& req, const HttpError& e) {
  return make_response(req, e.status, Value(Record{{"code", Value(e.code)}, {"message", Value(e.message)}}));
}

}  // namespace

Response Gateway::Impl::handle(const Request& req) {
  try {
    auto target = parse_target(std::string_view(req.target().data(), req.target().size()));
    const auto& seg = target.segments;
    const auto method = req.method();

    if (method == http::verb::options) {
      Response res{http::status::no_content, req.version()};
      res.set(http::field::access_control_allow_origin, "*");
      res.set(http::field::access_control_allow_methods, "GET, POST, DELETE, OPTIONS");
      res.set(http::field::access_control_allow_headers, "Content-Type");
      res.keep_alive(req.keep_alive());
      res.prepare_payload();
      return res;
    }

    auto body = [&]() -> Value {
      Value v;
      try {
        v = wire::decode_value(req.body());
      } catch (const std::exception& e) {
        throw HttpError{http::status::bad_request, "parse_error", std::string("bad request body: ") + e.what()};
      }
      if (!v.is_record()) throw HttpError{http::status::bad_request, "parse_error", "request body must be an object"};
      return v;
    };
    auto ok = [&](const Value& v) { return make_response(req, http::status::ok, v); };
    auto not_allowed = [&] {
      return make_error(req, {http::status::method_not_allowed, "method_not_allowed", "method not allowed"});
    };

    if (seg.size() == 1 && seg[0] == "agents") {
      if (method == http::verb::get) return ok(api_agents());
      if (method == http::verb::post) return ok(api_add_agent(body()));
      return not_allowed();
    }
    if (seg.size() == 3 && seg[0] == "agents" && seg[2] == "events") {
      if (method == http::verb::get) return ok(api_agent_events(seg[1]));
      return not_allowed();
    }
    if (seg.size() == 1 && seg[0] == "streams") {
      if (method == http::verb::get) return ok(api_streams());
      if (method == http::verb::post) return ok(api_create_stream(body()));
      return not_allowed();
    }
    if (seg.size() == 2 && seg[0] == "streams") {
      if (method == http::verb::delete_) return ok(api_delete_stream(seg[1]));
      return not_allowed();
    }
    if (seg.size() == 1 && seg[0] == "observables") {
      if (method == http::verb::post) return ok(api_set_observable(body()));
      return not_allowed();
    }
    if (seg.size() == 1 && seg[0] == "replays") {
      if (method == http::verb::post) return ok(api_create_replay(body()));
      return not_allowed();
    }
    return make_error(req, {http::status::not_found, "not_found", "no route for " + std::string(req.target())});
  } catch (const HttpError& e) {
    return make_error(req, e);
  } catch (const std::exception& e) {
    return make_error(req, {http::status::internal_server_error, "internal", e.what()});
  }
}

// ===========================================================================
// Network sessions
// ===========================================================================

namespace {

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket sock, Gateway::Impl* gw) : ws_(std::move(sock)), gw_(gw) {}

  ~WsSession() {
    if (queue_) {
      queue_->set_on_push({});
      gw_->ws_unsubscribe(queue_);
    }
  }

  void start(Request req, wire::Subscribe filter) {
    filter_ = std::move(filter);
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->subscribe();
    });
  }

 private:
  void subscribe() {
    queue_ = gw_->ws_subscribe(filter_);
    std::weak_ptr<WsSession> weak = shared_from_this();
    auto exec = ws_.get_executor();
    queue_->set_on_push([weak, exec] {
      auto self = weak.lock();
      if (!self || self->scheduled_.exchange(true)) return;
      asio::post(exec, [weak] {
        if (auto self = weak.lock()) {
          self->scheduled_ = false;
          self->pump();
        }
      });
    });
    read_loop();
    pump();
  }

  // Client frames are ignored; reading keeps control frames flowing and
  // notices the peer going away.
  void read_loop() {
    ws_.async_read(inbox_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->gone_ = true;
        if (self->queue_) self->queue_->set_on_push({});
        return;
      }
      self->inbox_.consume(self->inbox_.size());
      self->read_loop();
    });
  }

  void pump() {
    if (writing_ || gone_) return;
    auto msg = queue_->try_pop();
    if (!msg) return;
    auto line = gw_->render(*msg);
    if (!line) return pump();
    current_ = std::move(*line);
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(current_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) {
        self->gone_ = true;
        return;
      }
      self->pump();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  Gateway::Impl* gw_;
  wire::Subscribe filter_;
  std::shared_ptr<DeliveryQueue> queue_;
  beast::flat_buffer inbox_;
  std::string current_;
  std::atomic<bool> scheduled_{false};
  bool writing_ = false;
  bool gone_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket sock, Gateway::Impl* gw) : stream_(std::move(sock)), gw_(gw) {}

  void start() { read(); }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->on_read(ec);
    });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      beast::error_code ignored;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
      return;
    }
    if (websocket::is_upgrade(req_)) {
      auto target = parse_target(std::string_view(req_.target().data(), req_.target().size()));
      if (target.segments.size() == 1 && target.segments[0] == "ws") {
        auto it = target.params.find("streams");
        auto filter = parse_stream_filter(it == target.params.end() ? "*" : it->second);
        stream_.expires_never();
        std::make_shared<WsSession>(stream_.release_socket(), gw_)->start(std::move(req_), std::move(filter));
        return;
      }
    }
    auto req = std::make_shared<Request>(std::move(req_));
    asio::post(gw_->pool, [self = shared_from_this(), req] {
      auto res = std::make_shared<Response>(self->gw_->handle(*req));
      asio::post(self->stream_.get_executor(), [self, res] { self->write(res); });
    });
  }

  void write(std::shared_ptr<Response> res) {
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!res->keep_alive()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  Gateway::Impl* gw_;
  beast::flat_buffer buffer_;
  Request req_;
};

}  // namespace

void Gateway::Impl::accept() {
  acceptor.async_accept([self = this](beast::error_code ec, tcp::socket sock) {
    if (ec) return;
    sock.set_option(tcp::no_delay(true), ec);
    std::make_shared<HttpSession>(std::move(sock), self)->start();
    self->accept();
  });
}

void Gateway::Impl::shutdown() {
  {
    std::lock_guard lk(mu);
    if (stopping) return;
    stopping = true;
  }
  kick.notify_all();
  if (maintenance.joinable()) maintenance.join();

  std::vector<std::shared_ptr<ReplayJob>> jobs;
  std::vector<std::shared_ptr<AgentLink>> links;
  {
    std::lock_guard lk(mu);
    for (auto& [gid, gs] : streams)
      if (gs.replay) jobs.push_back(gs.replay);
    links = agents;
  }
  for (auto& job : jobs) {
    {
      std::lock_guard lk(job->m);
      job->cancel = true;
    }
    job->cv.notify_all();
    if (job->thread.joinable()) job->thread.join();
  }

  pool.join();
  io.stop();
  if (io_thread.joinable()) io_thread.join();
  beast::error_code ignored;
  acceptor.close(ignored);

  // Sessions close their upstream streams as they are destroyed.
  std::vector<std::shared_ptr<client::Session>> sessions;
  {
    std::lock_guard lk(mu);
    for (auto& link : links)
      if (link->session) sessions.push_back(std::move(link->session));
    for (auto& [gid, gs] : streams) gs.handle.reset();
    for (auto& sub : subs) sub.queue->close();
  }
  sessions.clear();
  {
    std::lock_guard lk(wait_mu);
    stopped = true;
  }
  wait_cv.notify_all();
}

// ===========================================================================
// Gateway
// ===========================================================================

Gateway::Gateway(GatewayOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
  auto& im = *impl_;
  beast::error_code ec;
  auto addr = asio::ip::make_address(im.options.bind_address, ec);
  if (ec) throw BindError("bad bind address '" + im.options.bind_address + "': " + ec.message());
  tcp::endpoint ep(addr, im.options.port);
  im.acceptor.open(ep.protocol(), ec);
  if (!ec) im.acceptor.set_option(asio::socket_base::reuse_address(true), ec);
  if (!ec) im.acceptor.bind(ep, ec);
  if (!ec) im.acceptor.listen(asio::socket_base::max_listen_connections, ec);
  if (ec) throw BindError("cannot listen on " + im.options.bind_address + ":" + std::to_string(im.options.port) + ": " +
                          ec.message());

  im.bound_port = im.acceptor.local_endpoint().port();
  for (const auto& a : im.options.agents) im.add_agent(a);
  im.accept();
  im.io_thread = std::thread([impl = impl_.get()] { impl->io.run(); });
  im.maintenance = std::thread([impl = impl_.get()] { impl->maintenance_loop(); });
}

Gateway::~Gateway() { impl_->shutdown(); }

std::uint16_t Gateway::port() const { return impl_->bound_port; }

std::string Gateway::add_agent(const client::Address& address) { return impl_->add_agent(address); }

void Gateway::wait() {
  std::unique_lock lk(impl_->wait_mu);
  impl_->wait_cv.wait(lk, [this] { return impl_->stopped; });
}

void Gateway::stop() { impl_->shutdown(); }

}  // namespace livewatch::gateway
