#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "livewatch/delivery_queue.hpp"
#include "livewatch/query.hpp"
#include "livewatch/value.hpp"
#include "livewatch/wire.hpp"

namespace livewatch::client {

class ClientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConnectRefused : public ClientError {
 public:
  using ClientError::ClientError;
};

class ProtocolMismatch : public ClientError {
 public:
  using ClientError::ClientError;
};

class Disconnected : public ClientError {
 public:
  using ClientError::ClientError;
};

/// An error response from the agent (parse_error, unknown_event, ...).
class AgentError : public ClientError {
 public:
  AgentError(wire::ErrorCode code, std::string message)
      : ClientError(std::string(wire::to_string(code)) + ": " + message), code_(code), message_(std::move(message)) {}
  wire::ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  wire::ErrorCode code_;
  std::string message_;
};

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  /// "HOST:PORT" or ":PORT" (localhost). Throws std::invalid_argument.
  static Address parse(std::string_view text);
  std::string to_string() const;
};

/// Consumer attached to a stream handle. consume() runs on the session's
/// receive thread and should not block; throwing detaches the sink.
class Sink {
 public:
  virtual ~Sink() = default;
  virtual void consume(const wire::DataMessage& msg) = 0;
};

class FunctionSink final : public Sink {
 public:
  explicit FunctionSink(std::function<void(const wire::DataMessage&)> fn) : fn_(std::move(fn)) {}
  void consume(const wire::DataMessage& msg) override { fn_(msg); }

 private:
  std::function<void(const wire::DataMessage&)> fn_;
};

/// Prints each data message as one canonical wire line.
class ConsoleSink final : public Sink {
 public:
  explicit ConsoleSink(std::ostream& out) : out_(out) {}
  void consume(const wire::DataMessage& msg) override;

 private:
  std::ostream& out_;
};

using Callback = std::function<void(const wire::DataMessage&)>;

class Session;

/// Client view of one agent-side stream.
///
/// Delivery is either by callback (invoked on the session's receive thread)
/// or through a bounded queue drained with next(). Attached sinks see every
/// message that arrives after they are attached, in attachment order, before
/// the callback/queue does. The last message of a stream is kind="closed".
class StreamHandle {
 public:
  const std::string& stream_id() const noexcept;
  const std::string& event_name() const noexcept;
  const std::string& query() const noexcept;
  bool callback_mode() const noexcept;

  /// Queue mode only. Returns nullopt on timeout, or once the stream is
  /// closed and everything before the closed marker has been consumed.
  std::optional<wire::DataMessage> next(std::optional<std::chrono::milliseconds> timeout = std::nullopt);

  /// True once the terminal closed marker has been received.
  bool closed() const;
  std::optional<std::uint64_t> last_seen_seq() const;
  /// Sum of counts over dropped notices received.
  std::int64_t dropped() const;

  void attach(std::shared_ptr<Sink> sink);
  /// One entry per sink that threw and was detached.
  std::vector<std::string> sink_failures() const;

  struct State;

 private:
  friend class Session;
  explicit StreamHandle(std::shared_ptr<State> state) : state_(std::move(state)) {}
  std::shared_ptr<State> state_;
};

/// Attaches a sink to a live handle; see StreamHandle::attach.
void route_to_sink(StreamHandle& handle, std::shared_ptr<Sink> sink);

/// Connection to one agent: a control channel plus one data connection per
/// stream, all serviced by a single background receive thread.
class Session {
 public:
  /// Connects and verifies the hello line on the control and data ports.
  /// Throws ConnectRefused or ProtocolMismatch.
  static std::unique_ptr<Session> open(const Address& control);

  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  /// Subscribes to the new stream before asking the agent to create it, so
  /// no item can be missed. An empty callback selects queue delivery.
  /// Throws AgentError with the agent's code, or Disconnected.
  std::shared_ptr<StreamHandle> create_stream(const std::string& event, const std::string& query,
                                              std::optional<query::WindowMode> window = std::nullopt,
                                              Callback callback = {},
                                              std::size_t queue_capacity = DeliveryQueue::kDefaultCapacity);

  void close_stream(StreamHandle& handle);

  /// Takes effect at the agent's next matching event, not immediately.
  void set_observable(const std::string& name, const Value& value,
                      std::optional<std::string> at_event = std::nullopt);

  Record list_events();
  Record list_streams();

  /// Sends one raw control request and returns the response (including
  /// error responses). Throws Disconnected.
  wire::Message request(const wire::Message& msg);

  bool connected() const;
  const Address& address() const;
  std::uint16_t data_port() const;

 private:
  struct Impl;
  explicit Session(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

/// Appends "| window(...)" to a query when a window is requested.
std::string compose_query(const std::string& query, const std::optional<query::WindowMode>& window);

}  // namespace livewatch::client
