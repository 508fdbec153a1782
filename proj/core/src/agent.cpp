#include "livewatch/agent.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>
#include <vector>

#include <boost/asio.hpp>

#include "livewatch/query.hpp"
#include "livewatch/stream.hpp"

namespace livewatch {

namespace asio = boost::asio;
using asio::ip::tcp;

namespace {

struct StringHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
};

double wall_now() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

std::uint16_t port_from_env(const char* var, std::uint16_t fallback) {
  const char* v = std::getenv(var);
  if (v == nullptr || *v == '\0') return fallback;
  const long p = std::strtol(v, nullptr, 10);
  if (p < 0 || p > 65535) return fallback;
  return static_cast<std::uint16_t>(p);
}

constexpr std::size_t kMaxLine = 16u << 20;

}  // namespace

// ===========================================================================
// State
// ===========================================================================

struct Agent::Impl {
  struct Observable {
    std::string name;
    Getter getter;
    Setter setter;
    std::atomic<std::uint64_t> pulls{0};
  };

  struct Stream {
    std::string id;
    std::string event;
    std::string query_text;
    StreamProcessor processor;
    std::uint64_t next_seq = 0;
  };

  struct EventEntry {
    std::string name;
    std::vector<Stream*> streams;
    std::vector<std::size_t> needed;  // observable indices, registration order
    std::uint64_t count = 0;
  };

  struct Subscriber {
    wire::Subscribe filter;
    std::shared_ptr<DeliveryQueue> queue;
    std::set<std::string> open_explicit;  // explicit ids not yet closed
  };

  struct Pending {
    std::string name;
    Value value;
    std::optional<std::string> at_event;
  };

  class Net;

  explicit Impl(AgentOptions opts) : options(std::move(opts)) {}

  // --- host side ---
  void notify(std::string_view event, bool group_end);
  void apply_pending(std::string_view event);
  void publish(wire::DataMessage msg);
  void close_stream_locked(Stream& s);
  void recompute_needed(EventEntry& e);

  // --- control side ---
  wire::Message handle(const wire::Message& req);
  wire::Message create_stream(const wire::CreateStream& req);
  std::shared_ptr<DeliveryQueue> subscribe_queue(wire::Subscribe filter);
  void unsubscribe_queue(const std::shared_ptr<DeliveryQueue>& q);

  AgentOptions options;
  mutable std::mutex mu;
  std::vector<std::unique_ptr<Observable>> observables;
  std::unordered_map<std::string, std::size_t, StringHash, std::equal_to<>> observable_index;
  std::unordered_map<std::string, EventEntry, StringHash, std::equal_to<>> events;
  std::vector<std::string> event_order;
  std::map<std::string, std::unique_ptr<Stream>> streams;
  std::deque<Pending> pending;
  std::vector<Subscriber> subscribers;
  std::uint64_t next_stream_number = 1;
  bool shut_down = false;

  std::unique_ptr<Net> net;
};

void Agent::Impl::recompute_needed(EventEntry& e) {
  std::set<std::size_t> idx;
  for (const Stream* s : e.streams) {
    const auto& p = s->processor.pipeline();
    if (p.needs_full_record()) {
      for (std::size_t i = 0; i < observables.size(); ++i) idx.insert(i);
      break;
    }
    for (const auto& name : p.referenced_names()) {
      if (auto it = observable_index.find(name); it != observable_index.end()) idx.insert(it->second);
    }
    for (const auto& name : p.record_fields()) {
      if (auto it = observable_index.find(name); it != observable_index.end()) idx.insert(it->second);
    }
  }
  e.needed.assign(idx.begin(), idx.end());
}

void Agent::Impl::apply_pending(std::string_view event) {
  for (auto it = pending.begin(); it != pending.end();) {
    if (it->at_event && *it->at_event != event) {
      ++it;
      continue;
    }
    auto& obs = *observables[observable_index.find(it->name)->second];
    try {
      obs.setter(it->value);
    } catch (...) {
      // a failing host setter must not escape into the event thread
    }
    it = pending.erase(it);
  }
}

void Agent::Impl::publish(wire::DataMessage msg) {
  const bool closing = msg.kind == wire::DataKind::Closed;
  for (auto& sub : subscribers) {
    if (!sub.filter.matches(msg.stream)) continue;
    sub.queue->push(msg);
    if (closing && !sub.filter.wildcard) {
      sub.open_explicit.erase(msg.stream);
      if (sub.open_explicit.empty()) sub.queue->close();
    }
  }
}

void Agent::Impl::notify(std::string_view event, bool group_end) {
  std::lock_guard lk(mu);
  if (!pending.empty()) apply_pending(event);
  auto it = events.find(event);
  if (it == events.end()) {
    auto& e = events[std::string(event)];
    e.name = std::string(event);
    event_order.push_back(e.name);
    e.count = 1;
    return;
  }
  EventEntry& e = it->second;
  const std::uint64_t event_seq = e.count++;
  if (e.streams.empty()) return;

  Record fields;
  fields.reserve(e.needed.size());
  for (std::size_t i : e.needed) {
    Observable& obs = *observables[i];
    obs.pulls.fetch_add(1, std::memory_order_relaxed);
    try {
      fields.emplace_back(obs.name, obs.getter());
    } catch (...) {
      // leave the field out; queries reading it report a missing field
    }
  }
  const double t = wall_now();
  const StreamItem item{Value(std::move(fields)), group_end, event_seq, t};
  for (Stream* s : e.streams) {
    Output out = s->processor.post(item);
    if (out.is_emit()) {
      publish({s->id, s->next_seq++, t, wire::DataKind::Item, std::move(out.value), std::nullopt});
    } else if (out.is_error()) {
      publish({s->id, s->next_seq++, t, wire::DataKind::Error, Value(std::move(out.error)), std::nullopt});
    }
  }
}

void Agent::Impl::close_stream_locked(Stream& s) {
  const double t = wall_now();
  Output out = s.processor.flush();
  if (out.is_emit()) publish({s.id, s.next_seq++, t, wire::DataKind::Item, std::move(out.value), std::nullopt});
  publish({s.id, s.next_seq++, t, wire::DataKind::Closed, std::nullopt, std::nullopt});
  if (auto it = events.find(s.event); it != events.end()) {
    auto& list = it->second.streams;
    list.erase(std::remove(list.begin(), list.end(), &s), list.end());
    recompute_needed(it->second);
  }
}

wire::Message Agent::Impl::create_stream(const wire::CreateStream& req) {
  using wire::ErrorCode;
  std::optional<query::Pipeline> pipeline;
  try {
    pipeline.emplace(query::parse(req.query));
  } catch (const std::exception& e) {
    return wire::Error{ErrorCode::ParseError, e.what()};
  }
  auto ev = events.find(req.event);
  if (ev == events.end()) return wire::Error{ErrorCode::UnknownEvent, "unknown event '" + req.event + "'"};
  for (const auto& name : pipeline->referenced_names()) {
    if (!observable_index.contains(name)) {
      return wire::Error{ErrorCode::UnknownObservable, "unknown observable '" + name + "'"};
    }
  }
  std::string id;
  if (req.stream_id) {
    if (req.stream_id->empty()) return wire::Error{ErrorCode::Internal, "stream_id must be non-empty"};
    if (streams.contains(*req.stream_id)) {
      return wire::Error{ErrorCode::Internal, "stream id '" + *req.stream_id + "' already in use"};
    }
    id = *req.stream_id;
  } else {
    do {
      id = "s" + std::to_string(next_stream_number++);
    } while (streams.contains(id));
  }
  auto stream = std::make_unique<Stream>(Stream{id, req.event, req.query, StreamProcessor(std::move(*pipeline)), 0});
  ev->second.streams.push_back(stream.get());
  streams.emplace(id, std::move(stream));
  recompute_needed(ev->second);
  return wire::Ok{{{"stream_id", Value(id)}}};
}

wire::Message Agent::Impl::handle(const wire::Message& req) {
  using wire::ErrorCode;
  std::lock_guard lk(mu);
  if (shut_down) return wire::Error{ErrorCode::Internal, "agent is shut down"};
  return std::visit(
      [this](const auto& m) -> wire::Message {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, wire::CreateStream>) {
          return create_stream(m);
        } else if constexpr (std::is_same_v<T, wire::CloseStream>) {
          auto it = streams.find(m.stream_id);
          if (it == streams.end()) return wire::Error{ErrorCode::UnknownStream, "unknown stream '" + m.stream_id + "'"};
          close_stream_locked(*it->second);
          streams.erase(it);
          return wire::Ok{{{"stream_id", Value(m.stream_id)}}};
        } else if constexpr (std::is_same_v<T, wire::ListEvents>) {
          List names;
          for (const auto& n : event_order) names.emplace_back(n);
          List obs;
          obs.reserve(observables.size());
          for (const auto& o : observables) {
            obs.emplace_back(Record{{"name", Value(o->name)}, {"writable", Value(static_cast<bool>(o->setter))}});
          }
          return wire::Ok{{{"events", Value(std::move(names))}, {"observables", Value(std::move(obs))}}};
        } else if constexpr (std::is_same_v<T, wire::ListStreams>) {
          List out;
          for (const auto& [id, s] : streams) {
            out.emplace_back(Record{{"stream_id", Value(id)},
                                    {"event", Value(s->event)},
                                    {"query", Value(s->query_text)},
                                    {"window", Value(query::print(s->processor.window()))}});
          }
          return wire::Ok{{{"streams", Value(std::move(out))}}};
        } else if constexpr (std::is_same_v<T, wire::SetObservable>) {
          auto it = observable_index.find(m.name);
          if (it == observable_index.end()) {
            return wire::Error{ErrorCode::UnknownObservable, "unknown observable '" + m.name + "'"};
          }
          if (!observables[it->second]->setter) {
            return wire::Error{ErrorCode::Readonly, "observable '" + m.name + "' is readonly"};
          }
          pending.push_back(Pending{m.name, m.value, m.at_event});
          return wire::Ok{};
        } else {
          return wire::Error{ErrorCode::Internal, "not a control request"};
        }
      },
      req);
}

// ===========================================================================
// Network
// ===========================================================================

class Agent::Impl::Net {
 public:
  Net(Impl& agent, const AgentOptions& opts)
      : agent_(agent), control_acceptor_(io_), data_acceptor_(io_), work_(asio::make_work_guard(io_)) {
    const auto address = asio::ip::make_address(opts.bind_address);
    open(control_acceptor_, tcp::endpoint(address, port_from_env("LIVEWATCH_CONTROL_PORT", opts.control_port)));
    open(data_acceptor_, tcp::endpoint(address, port_from_env("LIVEWATCH_DATA_PORT", opts.data_port)));
    control_port_ = control_acceptor_.local_endpoint().port();
    data_port_ = data_acceptor_.local_endpoint().port();
    accept_control();
    accept_data();
    thread_ = std::thread([this] { io_.run(); });
  }

  ~Net() { stop(); }

  std::uint16_t control_port() const { return control_port_; }
  std::uint16_t data_port() const { return data_port_; }

  /// Waits (bounded) for data connections to drain their queues, then stops.
  void stop() {
    if (!thread_.joinable()) return;
    asio::post(io_, [this] {
      boost::system::error_code ec;
      control_acceptor_.close(ec);
      data_acceptor_.close(ec);
    });
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    while (live_data_sessions_.load() > 0 && std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    work_.reset();
    io_.stop();
    thread_.join();
  }

 private:
  class ControlSession;
  class DataSession;

  static void open(tcp::acceptor& acc, const tcp::endpoint& ep) {
    acc.open(ep.protocol());
    acc.set_option(tcp::acceptor::reuse_address(true));
    acc.bind(ep);
    acc.listen();
  }

  void accept_control();
  void accept_data();

  Impl& agent_;
  std::atomic<int> live_data_sessions_{0};
  asio::io_context io_;
  tcp::acceptor control_acceptor_;
  tcp::acceptor data_acceptor_;
  asio::executor_work_guard<asio::io_context::executor_type> work_;
  std::thread thread_;
  std::uint16_t control_port_ = 0;
  std::uint16_t data_port_ = 0;
};

class Agent::Impl::Net::ControlSession : public std::enable_shared_from_this<ControlSession> {
 public:
  ControlSession(tcp::socket sock, Impl& agent, std::uint16_t data_port)
      : sock_(std::move(sock)), agent_(agent), buf_(kMaxLine), data_port_(data_port) {}

  void start() {
    send(wire::encode(wire::Hello{wire::kProtocolVersion, data_port_}));
    read();
  }

 private:
  void read() {
    asio::async_read_until(sock_, buf_, '\n', [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
      if (ec) return;
      std::string line(asio::buffers_begin(self->buf_.data()), asio::buffers_begin(self->buf_.data()) + n);
      self->buf_.consume(n);
      wire::Message response;
      try {
        response = self->agent_.handle(wire::decode(line));
      } catch (const std::exception& e) {
        response = wire::Error{wire::ErrorCode::Internal, std::string("malformed request: ") + e.what()};
      }
      self->send(wire::encode(response));
      self->read();
    });
  }

  void send(std::string line) {
    outbox_.push_back(std::move(line));
    if (outbox_.size() == 1) write_next();
  }

  void write_next() {
    asio::async_write(sock_, asio::buffer(outbox_.front()), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
      if (ec) return;
      self->outbox_.pop_front();
      if (!self->outbox_.empty()) self->write_next();
    });
  }

  tcp::socket sock_;
  Impl& agent_;
  asio::streambuf buf_;
  std::deque<std::string> outbox_;
  std::uint16_t data_port_;
};

class Agent::Impl::Net::DataSession : public std::enable_shared_from_this<DataSession> {
 public:
  DataSession(tcp::socket sock, Impl& agent, std::atomic<int>& live)
      : sock_(std::move(sock)), agent_(agent), buf_(kMaxLine), live_(live) {
    ++live_;
  }
  ~DataSession() {
    if (queue_) {
      queue_->set_on_push({});
      agent_.unsubscribe_queue(queue_);
    }
    --live_;
  }

  void start() {
    hello_ = wire::encode(wire::Hello{});
    asio::async_write(sock_, asio::buffer(hello_), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
      if (!ec) self->read_header();
    });
  }

 private:
  void read_header() {
    asio::async_read_until(sock_, buf_, '\n', [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
      if (ec) return;
      std::string line(asio::buffers_begin(self->buf_.data()), asio::buffers_begin(self->buf_.data()) + n);
      self->buf_.consume(n);
      wire::Subscribe filter;
      try {
        auto msg = wire::decode(line);
        if (!std::holds_alternative<wire::Subscribe>(msg)) throw std::runtime_error("expected subscribe header");
        filter = std::get<wire::Subscribe>(msg);
      } catch (const std::exception& e) {
        self->current_ = wire::encode(wire::Error{wire::ErrorCode::Internal, e.what()});
        asio::async_write(self->sock_, asio::buffer(self->current_),
                          [self](boost::system::error_code, std::size_t) { self->shutdown_socket(); });
        return;
      }
      self->subscribe(std::move(filter));
    });
  }

  void subscribe(wire::Subscribe filter) {
    List ids;
    if (filter.wildcard) {
      ids.emplace_back("*");
    } else {
      for (const auto& s : filter.streams) ids.emplace_back(s);
    }
    queue_ = agent_.subscribe_queue(std::move(filter));
    std::weak_ptr<DataSession> weak = shared_from_this();
    auto& io = static_cast<asio::io_context&>(sock_.get_executor().context());
    queue_->set_on_push([weak, &io] {
      auto self = weak.lock();
      if (!self || self->scheduled_.exchange(true)) return;
      asio::post(io, [weak] {
        if (auto self = weak.lock()) {
          self->scheduled_ = false;
          self->pump();
        }
      });
    });
    current_ = wire::encode(wire::Ok{{{"subscribed", Value(std::move(ids))}}});
    writing_ = true;
    asio::async_write(sock_, asio::buffer(current_), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) return self->shutdown_socket();
      self->watch_peer();
      self->pump();
    });
  }

  // Any read completion means the peer spoke out of turn or went away.
  void watch_peer() {
    sock_.async_read_some(asio::buffer(scratch_), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
      if (ec) {
        self->peer_gone_ = true;
        self->shutdown_socket();
        return;
      }
      self->watch_peer();
    });
  }

  void pump() {
    if (writing_ || peer_gone_ || !sock_.is_open()) return;
    auto msg = queue_->try_pop();
    if (!msg) {
      if (queue_->closed() && queue_->drained()) shutdown_socket();
      return;
    }
    current_ = wire::encode(*msg);
    writing_ = true;
    asio::async_write(sock_, asio::buffer(current_), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) return self->shutdown_socket();
      self->pump();
    });
  }

  void shutdown_socket() {
    boost::system::error_code ec;
    sock_.shutdown(tcp::socket::shutdown_both, ec);
    sock_.close(ec);
    if (queue_) queue_->set_on_push({});
  }

  tcp::socket sock_;
  Impl& agent_;
  asio::streambuf buf_;
  std::atomic<int>& live_;
  std::shared_ptr<DeliveryQueue> queue_;
  std::string hello_;
  std::string current_;
  std::array<char, 256> scratch_{};
  std::atomic<bool> scheduled_{false};
  bool writing_ = false;
  bool peer_gone_ = false;
};

void Agent::Impl::Net::accept_control() {
  control_acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket sock) {
    if (ec) return;
    sock.set_option(tcp::no_delay(true), ec);
    std::make_shared<ControlSession>(std::move(sock), agent_, data_port_)->start();
    accept_control();
  });
}

void Agent::Impl::Net::accept_data() {
  data_acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket sock) {
    if (ec) return;
    sock.set_option(tcp::no_delay(true), ec);
    std::make_shared<DataSession>(std::move(sock), agent_, live_data_sessions_)->start();
    accept_data();
  });
}

// ===========================================================================
// Agent facade
// ===========================================================================

Agent::Agent(AgentOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
  if (impl_->options.listen) impl_->net = std::make_unique<Impl::Net>(*impl_, impl_->options);
}

Agent::~Agent() { shutdown(); }

void Agent::register_observable(std::string name, Getter getter, Setter setter) {
  std::lock_guard lk(impl_->mu);
  if (impl_->observable_index.contains(name)) throw DuplicateName(name);
  auto obs = std::make_unique<Impl::Observable>();
  obs->name = name;
  obs->getter = std::move(getter);
  obs->setter = std::move(setter);
  impl_->observable_index.emplace(std::move(name), impl_->observables.size());
  impl_->observables.push_back(std::move(obs));
}

void Agent::declare_event(std::string name) {
  std::lock_guard lk(impl_->mu);
  if (impl_->events.contains(name)) return;
  auto& e = impl_->events[name];
  e.name = name;
  impl_->event_order.push_back(std::move(name));
}

void Agent::notify(std::string_view event, bool group_end) { impl_->notify(event, group_end); }

wire::Message Agent::handle_control(const wire::Message& request) {
  try {
    return impl_->handle(request);
  } catch (const std::exception& e) {
    return wire::Error{wire::ErrorCode::Internal, e.what()};
  }
}

std::shared_ptr<DeliveryQueue> Agent::Impl::subscribe_queue(wire::Subscribe filter) {
  auto q = std::make_shared<DeliveryQueue>(options.subscriber_capacity);
  std::lock_guard lk(mu);
  if (shut_down) {
    q->close();
    return q;
  }
  Subscriber sub{std::move(filter), q, {}};
  sub.open_explicit.insert(sub.filter.streams.begin(), sub.filter.streams.end());
  subscribers.push_back(std::move(sub));
  return q;
}

void Agent::Impl::unsubscribe_queue(const std::shared_ptr<DeliveryQueue>& q) {
  std::lock_guard lk(mu);
  subscribers.erase(std::remove_if(subscribers.begin(), subscribers.end(),
                                   [&q](const Subscriber& s) { return s.queue == q; }),
                    subscribers.end());
}

std::shared_ptr<DeliveryQueue> Agent::subscribe(wire::Subscribe filter) {
  return impl_->subscribe_queue(std::move(filter));
}

void Agent::unsubscribe(const std::shared_ptr<DeliveryQueue>& queue) { impl_->unsubscribe_queue(queue); }

std::uint64_t Agent::pull_count(std::string_view name) const {
  std::lock_guard lk(impl_->mu);
  auto it = impl_->observable_index.find(name);
  if (it == impl_->observable_index.end()) return 0;
  return impl_->observables[it->second]->pulls.load(std::memory_order_relaxed);
}

std::uint64_t Agent::total_pulls() const {
  std::lock_guard lk(impl_->mu);
  std::uint64_t total = 0;
  for (const auto& o : impl_->observables) total += o->pulls.load(std::memory_order_relaxed);
  return total;
}

std::size_t Agent::active_streams() const {
  std::lock_guard lk(impl_->mu);
  return impl_->streams.size();
}

std::uint16_t Agent::control_port() const { return impl_->net ? impl_->net->control_port() : 0; }
std::uint16_t Agent::data_port() const { return impl_->net ? impl_->net->data_port() : 0; }

void Agent::shutdown() {
  {
    std::lock_guard lk(impl_->mu);
    if (impl_->shut_down) return;
    impl_->shut_down = true;
    for (auto& [id, s] : impl_->streams) impl_->close_stream_locked(*s);
    impl_->streams.clear();
    for (auto& sub : impl_->subscribers) sub.queue->close();
  }
  if (impl_->net) {
    impl_->net->stop();
    impl_->net.reset();
  }
}

}  // namespace livewatch
