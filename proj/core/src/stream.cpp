#include "livewatch/stream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace livewatch {

using query::Aggregator;
using query::EvalError;
using query::WindowMode;

namespace {

// -1/0/1 numeric ordering; nullopt when unordered.
std::optional<int> compare_numeric(const Value& a, const Value& b) {
  if (a.is_int() && b.is_int()) return a.as_int() < b.as_int() ? -1 : (a.as_int() > b.as_int() ? 1 : 0);
  const double x = a.to_double();
  const double y = b.to_double();
  if (x < y) return -1;
  if (x > y) return 1;
  if (x == y) return 0;
  return std::nullopt;
}

void require_numeric(const Value& v, const char* agg) {
  if (!v.is_numeric()) {
    throw EvalError(std::string(agg) + " needs numeric values, got " + std::string(kind_name(v.kind())));
  }
}

}  // namespace

Value make_histogram(const std::vector<double>& samples, std::int64_t bins) {
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  List edges;
  List counts;
  if (!(hi > lo)) {
    edges = {Value(lo), Value(lo + 1.0)};
    counts = {Value(static_cast<std::int64_t>(samples.size()))};
  } else {
    std::vector<double> e(static_cast<std::size_t>(bins) + 1);
    for (std::int64_t i = 0; i < bins; ++i) {
      e[static_cast<std::size_t>(i)] =
          std::min(hi, lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(bins)));
    }
    e.back() = hi;
    std::vector<std::int64_t> c(static_cast<std::size_t>(bins), 0);
    // bin i holds e[i] <= x < e[i+1]; the last bin also holds x == hi
    for (double x : samples) {
      const auto interior_le = std::upper_bound(e.begin() + 1, e.end() - 1, x) - (e.begin() + 1);
      ++c[static_cast<std::size_t>(interior_le)];
    }
    edges.reserve(e.size());
    for (double d : e) edges.emplace_back(d);
    counts.reserve(c.size());
    for (std::int64_t n : c) counts.emplace_back(n);
  }
  return Value(Record{{"edges", Value(std::move(edges))}, {"counts", Value(std::move(counts))}});
}

StreamProcessor::StreamProcessor(query::Pipeline pipeline) : pipeline_(std::move(pipeline)) {}

std::optional<Value> StreamProcessor::run_stages(const StreamItem& item) const {
  Value current = item.value;
  for (const auto& stage : pipeline_.stages()) {
    if (const auto* m = std::get_if<query::MapStage>(&stage)) {
      current = query::evaluate(*m->fn.body, query::StageBinding(m->fn.binder, current, item.value));
    } else if (const auto* w = std::get_if<query::WhereStage>(&stage)) {
      const Value keep = query::evaluate(*w->fn.body, query::StageBinding(w->fn.binder, current, item.value));
      if (!keep.is_bool()) throw EvalError("where predicate must be bool, got " + std::string(kind_name(keep.kind())));
      if (!keep.as_bool()) return std::nullopt;
    } else if (const auto* r = std::get_if<query::ReduceStage>(&stage)) {
      if (!r->fn) return Value();
      return query::evaluate(*r->fn->body, query::StageBinding(r->fn->binder, current, item.value));
    }
  }
  return current;
}

void StreamProcessor::check_fold(const Accumulator& acc, const Value& v) const {
  const auto& agg = pipeline_.reducer()->aggregator;
  switch (agg.kind) {
    case Aggregator::Sum: {
      require_numeric(v, "sum");
      std::int64_t r = 0;
      if (acc.int_sum && v.is_int() && __builtin_add_overflow(acc.isum, v.as_int(), &r)) {
        throw EvalError("integer overflow in sum");
      }
      break;
    }
    case Aggregator::Avg: require_numeric(v, "avg"); break;
    case Aggregator::Min: require_numeric(v, "min"); break;
    case Aggregator::Max: require_numeric(v, "max"); break;
    case Aggregator::Hist:
      require_numeric(v, "hist");
      if (!std::isfinite(v.to_double())) throw EvalError("hist needs finite values");
      break;
    case Aggregator::Count:
    case Aggregator::Last:
      break;
  }
}

void StreamProcessor::apply_fold(Accumulator& acc, const Value& v) const {
  const auto& agg = pipeline_.reducer()->aggregator;
  ++acc.count;
  switch (agg.kind) {
    case Aggregator::Sum:
    case Aggregator::Avg:
      if (acc.int_sum && v.is_int()) {
        acc.isum += v.as_int();
      } else {
        acc.int_sum = false;
      }
      acc.fsum += v.to_double();
      break;
    case Aggregator::Min:
    case Aggregator::Max: {
      if (acc.count == 1) {
        acc.extremum = v;
        break;
      }
      const auto c = compare_numeric(v, acc.extremum);
      if (c && ((agg.kind == Aggregator::Min && *c < 0) || (agg.kind == Aggregator::Max && *c > 0))) {
        acc.extremum = v;
      }
      break;
    }
    case Aggregator::Last: acc.last = v; break;
    case Aggregator::Hist: acc.samples.push_back(v.to_double()); break;
    case Aggregator::Count: break;
  }
}

std::optional<Value> StreamProcessor::result(const Accumulator& acc) const {
  if (acc.count == 0) return std::nullopt;
  const auto& agg = pipeline_.reducer()->aggregator;
  switch (agg.kind) {
    case Aggregator::Sum: return acc.int_sum ? Value(acc.isum) : Value(acc.fsum);
    case Aggregator::Avg: return Value(acc.fsum / static_cast<double>(acc.count));
    case Aggregator::Min:
    case Aggregator::Max: return acc.extremum;
    case Aggregator::Count: return Value(acc.count);
    case Aggregator::Last: return acc.last;
    case Aggregator::Hist: return make_histogram(acc.samples, agg.bins);
  }
  return std::nullopt;
}

Output StreamProcessor::post(const StreamItem& item) {
  std::optional<Value> value;
  try {
    value = run_stages(item);
    if (value && has_reducer()) {
      // a window that closes on this item folds it into a fresh accumulator
      const WindowMode w = pipeline_.window();
      const bool closes_first = w.kind == WindowMode::Kind::Time && acc_.window_start &&
                                item.t_wall >= *acc_.window_start + w.seconds;
      check_fold(closes_first ? Accumulator{} : acc_, *value);
    }
  } catch (const EvalError& e) {
    return Output::failure(e.what());
  }

  if (!has_reducer()) return value ? Output::emit(std::move(*value)) : Output::silent();

  const WindowMode w = pipeline_.window();
  Output out = Output::silent();
  switch (w.kind) {
    case WindowMode::Kind::Group:
      if (value) apply_fold(acc_, *value);
      if (item.group_end) {
        if (auto r = result(acc_)) out = Output::emit(std::move(*r));
        acc_ = Accumulator{};
      }
      break;
    case WindowMode::Kind::Count:
      if (value) {
        apply_fold(acc_, *value);
        if (acc_.count >= w.count) {
          out = Output::emit(*result(acc_));
          acc_ = Accumulator{};
        }
      }
      break;
    case WindowMode::Kind::Time:
      if (acc_.window_start && item.t_wall >= *acc_.window_start + w.seconds) {
        if (auto r = result(acc_)) out = Output::emit(std::move(*r));
        acc_ = Accumulator{};
      }
      if (value) {
        if (!acc_.window_start) acc_.window_start = item.t_wall;
        apply_fold(acc_, *value);
      }
      break;
  }
  return out;
}

Output StreamProcessor::flush() {
  if (!has_reducer()) return Output::silent();
  Output out = Output::silent();
  if (pipeline_.window().kind != WindowMode::Kind::Group) {
    if (auto r = result(acc_)) out = Output::emit(std::move(*r));
  }
  acc_ = Accumulator{};
  return out;
}

}  // namespace livewatch
