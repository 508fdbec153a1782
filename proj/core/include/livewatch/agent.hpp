#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "livewatch/delivery_queue.hpp"
#include "livewatch/value.hpp"
#include "livewatch/wire.hpp"

namespace livewatch {

class DuplicateName : public std::runtime_error {
 public:
  explicit DuplicateName(const std::string& name) : std::runtime_error("observable already registered: " + name) {}
};

struct AgentOptions {
  /// Start the TCP listeners. Without them the agent is driven purely
  /// in-process through handle_control() and subscribe().
  bool listen = true;
  std::string bind_address = "127.0.0.1";
  /// 0 picks an ephemeral port. LIVEWATCH_CONTROL_PORT / LIVEWATCH_DATA_PORT
  /// override these when set.
  std::uint16_t control_port = 0;
  std::uint16_t data_port = 0;
  std::size_t subscriber_capacity = DeliveryQueue::kDefaultCapacity;
};

/// In-process introspection endpoint embedded in a long-running host.
///
/// The host registers lazily-pulled observables and calls notify() at each
/// event. Clients create streams (event + query) over the control channel;
/// notify() evaluates every stream attached to the event against a record of
/// exactly the observables those streams need and publishes the results.
///
/// notify() must be serialized by the host. Control requests run between
/// notify() calls, never concurrently with one; set_observable requests are
/// additionally deferred until the next matching event.
class Agent {
 public:
  using Getter = std::function<Value()>;
  using Setter = std::function<void(const Value&)>;

  explicit Agent(AgentOptions options = {});
  ~Agent();

  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  /// The getter is not called here. Throws DuplicateName.
  void register_observable(std::string name, Getter getter, Setter setter = {});

  /// Makes an event known before its first notify() so streams can attach.
  void declare_event(std::string name);

  void notify(std::string_view event, bool group_end = false);

  /// Processes one decoded control request and returns its response.
  /// Never throws; failures come back as wire::Error.
  wire::Message handle_control(const wire::Message& request);

  /// In-process data subscription, equivalent to a data-channel connection.
  std::shared_ptr<DeliveryQueue> subscribe(wire::Subscribe filter);
  void unsubscribe(const std::shared_ptr<DeliveryQueue>& queue);

  /// Getter invocations for one observable (0 if unknown).
  std::uint64_t pull_count(std::string_view name) const;
  std::uint64_t total_pulls() const;
  std::size_t active_streams() const;

  std::uint16_t control_port() const;
  std::uint16_t data_port() const;

  /// Flushes and closes every stream (subscribers receive kind="closed"),
  /// drains data connections and stops the listeners. Idempotent.
  void shutdown();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace livewatch
