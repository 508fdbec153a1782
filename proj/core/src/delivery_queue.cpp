#include "livewatch/delivery_queue.hpp"

namespace livewatch {

DeliveryQueue::DeliveryQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

bool DeliveryQueue::push(wire::DataMessage msg) {
  std::function<void()> hook;
  {
    std::lock_guard lk(mutex_);
    if (closed_) return false;
    if (items_.size() >= capacity_ && msg.kind != wire::DataKind::Closed) {
      auto victim = items_.begin();
      while (victim != items_.end() && victim->kind == wire::DataKind::Closed) ++victim;
      if (victim == items_.end()) {
        // queue is all closed markers; account the newcomer instead
        auto& d = drops_[msg.stream];
        d.last_seq = msg.seq;
        d.t = msg.t;
        ++d.count;
        ++dropped_total_;
        return true;
      }
      auto& d = drops_[victim->stream];
      d.last_seq = victim->seq;
      d.t = victim->t;
      ++d.count;
      ++dropped_total_;
      items_.erase(victim);
    }
    items_.push_back(std::move(msg));
    hook = on_push_;
  }
  cv_.notify_one();
  if (hook) hook();
  return true;
}

std::optional<wire::DataMessage> DeliveryQueue::take_locked() {
  if (!items_.empty()) {
    auto& front = items_.front();
    if (auto it = drops_.find(front.stream); it != drops_.end() && it->second.last_seq < front.seq) {
      wire::DataMessage notice{front.stream, it->second.last_seq, it->second.t, wire::DataKind::Dropped,
                               std::nullopt, it->second.count};
      drops_.erase(it);
      return notice;
    }
    wire::DataMessage m = std::move(front);
    items_.pop_front();
    return m;
  }
  if (!drops_.empty()) {
    auto it = drops_.begin();
    wire::DataMessage notice{it->first, it->second.last_seq, it->second.t, wire::DataKind::Dropped,
                             std::nullopt, it->second.count};
    drops_.erase(it);
    return notice;
  }
  return std::nullopt;
}

std::optional<wire::DataMessage> DeliveryQueue::pop(std::optional<std::chrono::milliseconds> timeout) {
  std::unique_lock lk(mutex_);
  auto ready = [this] { return !items_.empty() || !drops_.empty() || closed_; };
  if (timeout) {
    if (!cv_.wait_for(lk, *timeout, ready)) return std::nullopt;
  } else {
    cv_.wait(lk, ready);
  }
  return take_locked();
}

std::optional<wire::DataMessage> DeliveryQueue::try_pop() {
  std::lock_guard lk(mutex_);
  return take_locked();
}

void DeliveryQueue::close() {
  std::function<void()> hook;
  {
    std::lock_guard lk(mutex_);
    closed_ = true;
    hook = on_push_;
  }
  cv_.notify_all();
  if (hook) hook();
}

void DeliveryQueue::set_on_push(std::function<void()> fn) {
  std::lock_guard lk(mutex_);
  on_push_ = std::move(fn);
}

bool DeliveryQueue::closed() const {
  std::lock_guard lk(mutex_);
  return closed_;
}

bool DeliveryQueue::drained() const {
  std::lock_guard lk(mutex_);
  return items_.empty() && drops_.empty();
}

std::size_t DeliveryQueue::size() const {
  std::lock_guard lk(mutex_);
  return items_.size();
}

std::uint64_t DeliveryQueue::dropped_total() const {
  std::lock_guard lk(mutex_);
  return dropped_total_;
}

}  // namespace livewatch
