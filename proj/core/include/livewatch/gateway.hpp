#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "livewatch/client.hpp"
#include "livewatch/delivery_queue.hpp"

namespace livewatch::gateway {

class BindError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GatewayOptions {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks an ephemeral port
  std::vector<client::Address> agents;
  std::chrono::milliseconds ping_interval{2000};
  std::chrono::milliseconds retry_interval{5000};
  std::size_t subscriber_capacity = DeliveryQueue::kDefaultCapacity;
  std::size_t worker_threads = 2;
};

/// HTTP + WebSocket bridge in front of any number of agents.
///
///   GET    /agents                   agent table with state and cached events
///   POST   /agents {address}         add an agent link
///   GET    /agents/{id}/events       live list_events of one agent
///   GET    /streams                  gateway stream table
///   POST   /streams {agent_id, event, query, window?}  -> {gstream_id}
///   DELETE /streams/{gid}
///   POST   /observables {agent_id, name, value, at_event?}
///   POST   /replays {path, speed}    -> {agent_id: "replay:N", gstream_id}
///   WS     /ws?streams=g1,g2|*       data messages tagged with agent_id and gstream_id
///
/// Bodies use the canonical value encoding; errors are {code, message}.
/// Lost agents are retried every retry_interval. A replay starts when its
/// first WebSocket subscriber attaches.
class Gateway {
 public:
  /// Binds and starts serving. Throws BindError.
  explicit Gateway(GatewayOptions options);
  ~Gateway();

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  std::uint16_t port() const;

  /// Adds an agent link (connecting in the background); returns its id.
  std::string add_agent(const client::Address& address);

  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

  struct Impl;  // internal; public so connection handlers can reach it

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace livewatch::gateway
