#include "livewatch/client.hpp"

#include <atomic>
#include <charconv>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include <boost/asio.hpp>

namespace livewatch::client {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

// ---------------------------------------------------------------------------
// Address
// ---------------------------------------------------------------------------

Address Address::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("expected HOST:PORT, got '" + std::string(text) + "'");
  Address a;
  auto host = text.substr(0, colon);
  if (!host.empty()) a.host = std::string(host);
  if (a.host.size() >= 2 && a.host.front() == '[' && a.host.back() == ']') a.host = a.host.substr(1, a.host.size() - 2);
  auto port = text.substr(colon + 1);
  unsigned value = 0;
  auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc{} || ptr != port.data() + port.size() || value == 0 || value > 65535)
    throw std::invalid_argument("bad port in '" + std::string(text) + "'");
  a.port = static_cast<std::uint16_t>(value);
  return a;
}

std::string Address::to_string() const {
  if (host.find(':') != std::string::npos) return "[" + host + "]:" + std::to_string(port);
  return host + ":" + std::to_string(port);
}

std::string compose_query(const std::string& query, const std::optional<query::WindowMode>& window) {
  if (!window) return query;
  return query + " | window(" + query::print(*window) + ")";
}

void ConsoleSink::consume(const wire::DataMessage& msg) { out_ << wire::encode(msg) << std::flush; }

// ---------------------------------------------------------------------------
// StreamHandle
// ---------------------------------------------------------------------------

struct StreamHandle::State {
  std::string id;
  std::string event;
  std::string query;
  Callback callback;
  std::shared_ptr<DeliveryQueue> queue;

  // recursive so callbacks and sinks may query the handle
  mutable std::recursive_mutex mu;
  std::vector<std::shared_ptr<Sink>> sinks;
  std::vector<std::string> failures;
  std::optional<std::uint64_t> last_seq;
  std::int64_t dropped = 0;
  bool closed = false;

  void deliver(const wire::DataMessage& msg) {
    std::lock_guard lk(mu);
    if (closed) return;
    last_seq = msg.seq;
    if (msg.kind == wire::DataKind::Dropped) dropped += msg.count.value_or(0);
    for (auto it = sinks.begin(); it != sinks.end();) {
      try {
        (*it)->consume(msg);
        ++it;
      } catch (const std::exception& e) {
        failures.emplace_back(e.what());
        it = sinks.erase(it);
      } catch (...) {
        failures.emplace_back("unknown sink failure");
        it = sinks.erase(it);
      }
    }
    if (callback) {
      try {
        callback(msg);
      } catch (const std::exception& e) {
        failures.emplace_back(std::string("callback: ") + e.what());
      }
    } else {
      queue->push(msg);
    }
    if (msg.kind == wire::DataKind::Closed) {
      closed = true;
      queue->close();
    }
  }
};

const std::string& StreamHandle::stream_id() const noexcept { return state_->id; }
const std::string& StreamHandle::event_name() const noexcept { return state_->event; }
const std::string& StreamHandle::query() const noexcept { return state_->query; }
bool StreamHandle::callback_mode() const noexcept { return static_cast<bool>(state_->callback); }

std::optional<wire::DataMessage> StreamHandle::next(std::optional<std::chrono::milliseconds> timeout) {
  if (state_->callback) throw std::logic_error("next() on a callback-mode stream");
  return state_->queue->pop(timeout);
}

bool StreamHandle::closed() const {
  std::lock_guard lk(state_->mu);
  return state_->closed;
}

std::optional<std::uint64_t> StreamHandle::last_seen_seq() const {
  std::lock_guard lk(state_->mu);
  return state_->last_seq;
}

std::int64_t StreamHandle::dropped() const {
  std::lock_guard lk(state_->mu);
  return state_->dropped;
}

void StreamHandle::attach(std::shared_ptr<Sink> sink) {
  if (!sink) throw std::invalid_argument("null sink");
  std::lock_guard lk(state_->mu);
  state_->sinks.push_back(std::move(sink));
}

std::vector<std::string> StreamHandle::sink_failures() const {
  std::lock_guard lk(state_->mu);
  return state_->failures;
}

void route_to_sink(StreamHandle& handle, std::shared_ptr<Sink> sink) { handle.attach(std::move(sink)); }

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

namespace {

std::string read_line(tcp::socket& sock, asio::streambuf& buf) {
  boost::system::error_code ec;
  auto n = asio::read_until(sock, buf, '\n', ec);
  if (ec) throw Disconnected("connection lost: " + ec.message());
  std::string line(asio::buffers_begin(buf.data()), asio::buffers_begin(buf.data()) + n);
  buf.consume(n);
  return line;
}

void write_all(tcp::socket& sock, const std::string& data) {
  boost::system::error_code ec;
  asio::write(sock, asio::buffer(data), ec);
  if (ec) throw Disconnected("connection lost: " + ec.message());
}

tcp::socket connect_to(asio::io_context& io, const std::string& host, std::uint16_t port) {
  tcp::resolver resolver(io);
  boost::system::error_code ec;
  auto endpoints = resolver.resolve(host, std::to_string(port), ec);
  if (ec) throw ConnectRefused("cannot resolve " + host + ": " + ec.message());
  tcp::socket sock(io);
  asio::connect(sock, endpoints, ec);
  if (ec) throw ConnectRefused("cannot connect to " + host + ":" + std::to_string(port) + ": " + ec.message());
  sock.set_option(tcp::no_delay(true), ec);
  return sock;
}

wire::Hello expect_hello(tcp::socket& sock, asio::streambuf& buf) {
  std::string line;
  try {
    line = read_line(sock, buf);
  } catch (const Disconnected& e) {
    throw ProtocolMismatch(std::string("no hello from agent: ") + e.what());
  }
  wire::Message msg;
  try {
    msg = wire::decode(line);
  } catch (const std::exception& e) {
    throw ProtocolMismatch(std::string("unreadable hello: ") + e.what());
  }
  auto* hello = std::get_if<wire::Hello>(&msg);
  if (!hello) throw ProtocolMismatch("first line is not a hello");
  if (hello->proto != wire::kProtocolVersion)
    throw ProtocolMismatch("agent speaks protocol " + std::to_string(hello->proto) + ", expected " +
                           std::to_string(wire::kProtocolVersion));
  return *hello;
}

[[noreturn]] void raise(const wire::Error& e) { throw AgentError(e.code, e.message); }

}  // namespace

struct Session::Impl {
  struct DataLink : std::enable_shared_from_this<DataLink> {
    explicit DataLink(tcp::socket s) : sock(std::move(s)) {}
    tcp::socket sock;
    asio::streambuf buf;
    std::shared_ptr<StreamHandle::State> state;

    void read_loop() {
      asio::async_read_until(sock, buf, '\n', [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
        if (ec) return self->lost(ec.message());
        std::string line(asio::buffers_begin(self->buf.data()), asio::buffers_begin(self->buf.data()) + n);
        self->buf.consume(n);
        wire::Message msg;
        try {
          msg = wire::decode(line);
        } catch (const std::exception& e) {
          return self->lost(std::string("malformed data line: ") + e.what());
        }
        if (auto* dm = std::get_if<wire::DataMessage>(&msg); dm && dm->stream == self->state->id) {
          self->state->deliver(*dm);
          if (dm->kind == wire::DataKind::Closed) return self->stop();
        }
        self->read_loop();
      });
    }

    // The data connection ended without a closed marker; tell the consumer.
    void lost(const std::string& why) {
      std::uint64_t seq = 0;
      {
        std::lock_guard lk(state->mu);
        if (state->closed) return stop();
        seq = state->last_seq ? *state->last_seq + 1 : 0;
      }
      state->deliver({state->id, seq, 0.0, wire::DataKind::Error, Value("disconnected: " + why), std::nullopt});
      state->deliver({state->id, seq + 1, 0.0, wire::DataKind::Closed, std::nullopt, std::nullopt});
      stop();
    }

    void stop() {
      boost::system::error_code ec;
      sock.shutdown(tcp::socket::shutdown_both, ec);
      sock.close(ec);
    }
  };

  Address address;
  std::uint16_t data_port = 0;
  asio::io_context io;
  asio::executor_work_guard<asio::io_context::executor_type> work = asio::make_work_guard(io);
  std::thread receiver;

  std::mutex control_mu;
  tcp::socket control{io};
  asio::streambuf control_buf;
  std::atomic<bool> broken{false};

  std::mutex links_mu;
  std::map<std::string, std::shared_ptr<DataLink>> links;
  std::string id_prefix;
  std::uint64_t next_id = 0;

  ~Impl() {
    work.reset();
    io.stop();
    if (receiver.joinable()) receiver.join();
  }

  wire::Message call(const wire::Message& req) {
    std::lock_guard lk(control_mu);
    if (broken) throw Disconnected("session to " + address.to_string() + " is disconnected");
    try {
      write_all(control, wire::encode(req));
      for (;;) {
        auto msg = wire::decode(read_line(control, control_buf));
        if (std::holds_alternative<wire::Ok>(msg) || std::holds_alternative<wire::Error>(msg)) return msg;
      }
    } catch (const Disconnected&) {
      broken = true;
      throw;
    } catch (const std::exception& e) {
      broken = true;
      throw Disconnected(std::string("bad control response: ") + e.what());
    }
  }

  Record call_ok(const wire::Message& req) {
    auto resp = call(req);
    if (auto* err = std::get_if<wire::Error>(&resp)) raise(*err);
    return std::get<wire::Ok>(resp).fields;
  }

  std::string new_stream_id() {
    std::lock_guard lk(links_mu);
    return id_prefix + std::to_string(next_id++);
  }

  // Data connection subscribed to one stream id; returns once acknowledged.
  std::shared_ptr<DataLink> open_link(const std::string& id) {
    auto link = std::make_shared<DataLink>(connect_to(io, address.host, data_port));
    expect_hello(link->sock, link->buf);
    write_all(link->sock, wire::encode(wire::Subscribe{{id}, false}));
    auto ack = wire::decode(read_line(link->sock, link->buf));
    if (auto* err = std::get_if<wire::Error>(&ack)) raise(*err);
    if (!std::holds_alternative<wire::Ok>(ack)) throw ProtocolMismatch("unexpected reply to subscribe");
    return link;
  }
};

Session::Session(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

std::unique_ptr<Session> Session::open(const Address& control) {
  auto impl = std::make_unique<Impl>();
  impl->address = control;
  impl->control = connect_to(impl->io, control.host, control.port);
  auto hello = expect_hello(impl->control, impl->control_buf);
  if (!hello.data_port) throw ProtocolMismatch("agent hello lacks a data port");
  impl->data_port = *hello.data_port;

  // Probe the data channel so both hellos are verified up front.
  {
    auto probe = connect_to(impl->io, control.host, impl->data_port);
    asio::streambuf buf;
    expect_hello(probe, buf);
    boost::system::error_code ec;
    probe.close(ec);
  }

  std::random_device rd;
  std::mt19937_64 rng(rd());
  static constexpr char kHex[] = "0123456789abcdef";
  std::string prefix = "c";
  for (int i = 0; i < 8; ++i) prefix += kHex[rng() & 15];
  impl->id_prefix = prefix + "-s";

  impl->receiver = std::thread([io = &impl->io] { io->run(); });
  return std::unique_ptr<Session>(new Session(std::move(impl)));
}

Session::~Session() {
  std::vector<std::string> open_ids;
  {
    std::lock_guard lk(impl_->links_mu);
    for (const auto& [id, link] : impl_->links) {
      std::lock_guard slk(link->state->mu);
      if (!link->state->closed) open_ids.push_back(id);
    }
  }
  // Best effort: streams are owned by the session that created them.
  for (const auto& id : open_ids) {
    try {
      impl_->call(wire::CloseStream{id});
    } catch (...) {
      break;
    }
  }
  impl_->work.reset();
  impl_->io.stop();
  if (impl_->receiver.joinable()) impl_->receiver.join();
  for (auto& [id, link] : impl_->links) link->stop();
  boost::system::error_code ec;
  impl_->control.close(ec);
}

std::shared_ptr<StreamHandle> Session::create_stream(const std::string& event, const std::string& query,
                                                     std::optional<query::WindowMode> window, Callback callback,
                                                     std::size_t queue_capacity) {
  auto state = std::make_shared<StreamHandle::State>();
  state->id = impl_->new_stream_id();
  state->event = event;
  state->query = compose_query(query, window);
  state->callback = std::move(callback);
  state->queue = std::make_shared<DeliveryQueue>(queue_capacity);

  if (impl_->broken) throw Disconnected("session to " + impl_->address.to_string() + " is disconnected");
  std::shared_ptr<Impl::DataLink> link;
  try {
    link = impl_->open_link(state->id);
  } catch (const ConnectRefused& e) {
    throw Disconnected(std::string("data channel unavailable: ") + e.what());
  }
  link->state = state;

  auto resp = impl_->call(wire::CreateStream{event, state->query, state->id});
  if (auto* err = std::get_if<wire::Error>(&resp)) {
    link->stop();
    raise(*err);
  }
  {
    std::lock_guard lk(impl_->links_mu);
    impl_->links[state->id] = link;
  }
  asio::post(impl_->io, [link] { link->read_loop(); });
  return std::shared_ptr<StreamHandle>(new StreamHandle(state));
}

void Session::close_stream(StreamHandle& handle) {
  {
    std::lock_guard lk(handle.state_->mu);
    if (handle.state_->closed) return;
  }
  impl_->call_ok(wire::CloseStream{handle.stream_id()});
}

void Session::set_observable(const std::string& name, const Value& value, std::optional<std::string> at_event) {
  impl_->call_ok(wire::SetObservable{name, value, std::move(at_event)});
}

Record Session::list_events() { return impl_->call_ok(wire::ListEvents{}); }
Record Session::list_streams() { return impl_->call_ok(wire::ListStreams{}); }

wire::Message Session::request(const wire::Message& msg) { return impl_->call(msg); }

bool Session::connected() const { return !impl_->broken; }
const Address& Session::address() const { return impl_->address; }
std::uint16_t Session::data_port() const { return impl_->data_port; }

}  // namespace livewatch::client
