#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "livewatch/query.hpp"
#include "livewatch/value.hpp"

namespace livewatch {

/// Unit of every stream: a value plus the optional group-completion flag.
struct StreamItem {
  Value value;
  bool group_end = false;
  std::uint64_t seq = 0;
  double t_wall = 0.0;
};

/// Result of posting one item: at most one output per post.
struct Output {
  enum class Kind { Silent, Emit, Error };

  Kind kind = Kind::Silent;
  Value value;
  std::string error;

  static Output silent() { return {}; }
  static Output emit(Value v) { return {Kind::Emit, std::move(v), {}}; }
  static Output failure(std::string message) { return {Kind::Error, Value(), std::move(message)}; }

  bool is_emit() const noexcept { return kind == Kind::Emit; }
  bool is_error() const noexcept { return kind == Kind::Error; }
  bool is_silent() const noexcept { return kind == Kind::Silent; }
};

/// Push-driven evaluator for one pipeline.
///
/// Map stages transform, where stages filter, and an optional reduce folds
/// accepted values until its window closes:
///   - group:     an item with group_end=true closes the group (even if the
///                item itself was filtered out);
///   - count=n:   the n-th accepted item since the last emission closes it;
///   - seconds=T: an item with t_wall >= window_start + T closes the open
///                window before it is folded; window_start is the t_wall of
///                the first accepted item after an emission.
/// Empty windows never emit. An item whose evaluation fails yields an Error
/// and has no effect on reducer state, including window boundaries.
///
/// Not thread-safe; posts must be serialized by the caller.
class StreamProcessor {
 public:
  explicit StreamProcessor(query::Pipeline pipeline);

  Output post(const StreamItem& item);

  /// Emits a partial count/time window; group windows drop the open group.
  Output flush();

  const query::Pipeline& pipeline() const noexcept { return pipeline_; }
  bool has_reducer() const noexcept { return pipeline_.reducer() != nullptr; }
  query::WindowMode window() const noexcept { return pipeline_.window(); }

  /// Number of values folded into the open window.
  std::int64_t pending() const noexcept { return acc_.count; }

 private:
  struct Accumulator {
    std::int64_t count = 0;
    bool int_sum = true;
    std::int64_t isum = 0;
    double fsum = 0.0;
    Value extremum;
    Value last;
    std::vector<double> samples;
    std::optional<double> window_start;
  };

  // Runs every stage before the reduce; nullopt means filtered out.
  std::optional<Value> run_stages(const StreamItem& item) const;
  // Throws EvalError if v cannot be folded into acc; never mutates.
  void check_fold(const Accumulator& acc, const Value& v) const;
  void apply_fold(Accumulator& acc, const Value& v) const;
  std::optional<Value> result(const Accumulator& acc) const;

  query::Pipeline pipeline_;
  Accumulator acc_;
};

/// Histogram over samples with `bins` equal-width bins from min to max.
/// Degenerate range (min == max) yields one bin with edges [min, min + 1].
Value make_histogram(const std::vector<double>& samples, std::int64_t bins);

}  // namespace livewatch
