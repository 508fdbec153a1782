#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "livewatch/wire.hpp"

namespace livewatch {

/// Bounded multi-producer / single-consumer queue of data messages.
///
/// On overflow the oldest item or error message is discarded. Discards are
/// accounted per stream and surface as one kind="dropped" message (seq of the
/// last discarded message, count of discards) delivered right before the next
/// surviving message of that stream, so per-stream seq stays strictly
/// increasing and every gap is explained. Closed markers are never discarded.
class DeliveryQueue {
 public:
  static constexpr std::size_t kDefaultCapacity = 10'000;

  explicit DeliveryQueue(std::size_t capacity = kDefaultCapacity);

  /// Returns false if the queue has been closed (message discarded).
  bool push(wire::DataMessage msg);

  /// Blocks until a message is available, the queue is closed and drained
  /// (nullopt), or the timeout expires (nullopt).
  std::optional<wire::DataMessage> pop(std::optional<std::chrono::milliseconds> timeout = std::nullopt);

  /// Non-blocking pop.
  std::optional<wire::DataMessage> try_pop();

  /// No further pushes; remaining messages can still be popped.
  void close();

  /// Called (outside the lock) after every successful push. Used by socket
  /// writers that are driven by an event loop rather than a blocking pop.
  void set_on_push(std::function<void()> fn);

  bool closed() const;
  bool drained() const;
  std::size_t size() const;
  std::uint64_t dropped_total() const;

 private:
  struct PendingDrop {
    std::uint64_t last_seq = 0;
    double t = 0.0;
    std::int64_t count = 0;
  };

  std::optional<wire::DataMessage> take_locked();

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<wire::DataMessage> items_;
  std::map<std::string, PendingDrop, std::less<>> drops_;
  std::size_t capacity_;
  std::uint64_t dropped_total_ = 0;
  bool closed_ = false;
  std::function<void()> on_push_;
};

}  // namespace livewatch
