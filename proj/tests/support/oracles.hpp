#pragma once

// Independent reference implementations and generators shared by the unit
// tests and the acceptance runner. Nothing here calls into the evaluator or
// the stream engine it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "livewatch/value.hpp"
#include "livewatch/wire.hpp"

namespace oracle {

using livewatch::List;
using livewatch::Record;
using livewatch::Value;

inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}
inline bool coin(std::mt19937_64& rng, double p = 0.5) { return unit(rng) < p; }

// ---------------------------------------------------------------------------
// Approximate comparison: exact for everything but Float, which is compared
// with a relative tolerance (NaN matches NaN, infinities must match exactly).
// ---------------------------------------------------------------------------

inline bool close(double a, double b, double rel) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  if (std::isinf(a) || std::isinf(b)) return a == b;
  if (a == b) return true;
  return std::fabs(a - b) <= rel * std::max(std::fabs(a), std::fabs(b));
}

inline bool matches(const Value& a, const Value& b, double rel) {
  if (a.kind() != b.kind()) return false;
  switch (a.kind()) {
    case Value::Kind::Float: return close(a.as_float(), b.as_float(), rel);
    case Value::Kind::List: {
      const auto& x = a.as_list();
      const auto& y = b.as_list();
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (!matches(x[i], y[i], rel)) return false;
      return true;
    }
    case Value::Kind::Record: {
      const auto& x = a.as_record();
      const auto& y = b.as_record();
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].first != y[i].first || !matches(x[i].second, y[i].second, rel)) return false;
      return true;
    }
    default: return a == b;
  }
}

// ---------------------------------------------------------------------------
// Windowed reduce by brute force: split the item sequence into windows
// first, then fold each complete window from scratch.
// ---------------------------------------------------------------------------

enum class Agg { Sum, Avg, Min, Max, Count, Last, Hist };
inline constexpr Agg kAllAggs[] = {Agg::Sum, Agg::Avg, Agg::Min, Agg::Max, Agg::Count, Agg::Last, Agg::Hist};

inline const char* agg_text(Agg a) {
  switch (a) {
    case Agg::Sum: return "sum";
    case Agg::Avg: return "avg";
    case Agg::Min: return "min";
    case Agg::Max: return "max";
    case Agg::Count: return "count";
    case Agg::Last: return "last";
    case Agg::Hist: return "hist";
  }
  return "?";
}

enum class Mode { Group, Count, Time };

struct Item {
  Value value;
  bool b = false;
  double t = 0.0;
};

struct Emission {
  std::size_t at;  // index of the item whose post produced it
  Value value;
};

inline Value fold(const std::vector<Value>& w, Agg agg, std::int64_t bins) {
  switch (agg) {
    case Agg::Count: return Value(static_cast<std::int64_t>(w.size()));
    case Agg::Last: return w.back();
    case Agg::Sum: {
      bool all_int = std::all_of(w.begin(), w.end(), [](const Value& v) { return v.is_int(); });
      if (all_int) {
        std::int64_t s = 0;
        for (const auto& v : w) s += v.as_int();
        return Value(s);
      }
      double s = 0.0;
      for (const auto& v : w) s += v.to_double();
      return Value(s);
    }
    case Agg::Avg: {
      double s = 0.0;
      for (const auto& v : w) s += v.to_double();
      return Value(s / static_cast<double>(w.size()));
    }
    case Agg::Min:
    case Agg::Max: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < w.size(); ++i) {
        const double x = w[i].to_double(), y = w[best].to_double();
        if (agg == Agg::Min ? x < y : x > y) best = i;
      }
      return w[best];
    }
    case Agg::Hist: {
      double lo = w[0].to_double(), hi = lo;
      for (const auto& v : w) {
        lo = std::min(lo, v.to_double());
        hi = std::max(hi, v.to_double());
      }
      List edges, counts;
      if (lo == hi) {
        edges = {Value(lo), Value(lo + 1.0)};
        counts = {Value(static_cast<std::int64_t>(w.size()))};
      } else {
        std::vector<double> e;
        for (std::int64_t i = 0; i < bins; ++i)
          e.push_back(std::min(hi, lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(bins))));
        e.push_back(hi);
        std::vector<std::int64_t> c(static_cast<std::size_t>(bins), 0);
        for (const auto& v : w) {
          // bin = number of interior edges at or below x
          std::size_t k = 0;
          for (std::size_t j = 1; j + 1 < e.size(); ++j)
            if (e[j] <= v.to_double()) ++k;
          ++c[k];
        }
        for (double d : e) edges.emplace_back(d);
        for (auto n : c) counts.emplace_back(n);
      }
      return Value(Record{{"edges", Value(std::move(edges))}, {"counts", Value(std::move(counts))}});
    }
  }
  return Value();
}

/// Emissions produced while posting (flush excluded).
inline std::vector<Emission> windowed_reduce(const std::vector<Item>& items, Agg agg, std::int64_t bins, Mode mode,
                                             std::int64_t n, double seconds) {
  // Each window is [begin, end) plus the index of the post that closes it.
  struct Window {
    std::size_t begin, end, closer;
  };
  std::vector<Window> windows;
  if (mode == Mode::Group) {
    std::size_t begin = 0;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].b) {
        windows.push_back({begin, i + 1, i});
        begin = i + 1;
      }
  } else if (mode == Mode::Count) {
    for (std::size_t begin = 0; begin + static_cast<std::size_t>(n) <= items.size(); begin += static_cast<std::size_t>(n))
      windows.push_back({begin, begin + static_cast<std::size_t>(n), begin + static_cast<std::size_t>(n) - 1});
  } else {
    std::size_t begin = 0;
    for (std::size_t i = 1; i < items.size(); ++i)
      if (items[i].t >= items[begin].t + seconds) {
        windows.push_back({begin, i, i});
        begin = i;
      }
  }
  std::vector<Emission> out;
  for (const auto& w : windows) {
    std::vector<Value> vals;
    for (std::size_t i = w.begin; i < w.end; ++i) vals.push_back(items[i].value);
    if (!vals.empty()) out.push_back({w.closer, fold(vals, agg, bins)});
  }
  return out;
}

/// Random item sequence: all-Int, all-Float or mixed values, random B flags,
/// non-decreasing timestamps.
inline std::vector<Item> random_items(std::mt19937_64& rng, std::size_t max_len) {
  const std::size_t len = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(max_len)));
  const int kinds = static_cast<int>(uniform_int(rng, 0, 2));
  const double b_rate = unit(rng) * 0.5;
  std::vector<Item> out;
  double t = unit(rng) * 100.0;
  for (std::size_t i = 0; i < len; ++i) {
    Item it;
    const bool as_int = kinds == 0 || (kinds == 2 && coin(rng));
    if (as_int)
      it.value = Value(uniform_int(rng, -1000, 1000));
    else
      it.value = Value((unit(rng) * 2.0 - 1.0) * std::pow(10.0, uniform_int(rng, -3, 3)));
    it.b = coin(rng, b_rate);
    t += coin(rng, 0.2) ? 0.0 : unit(rng) * 0.5;
    it.t = t;
    out.push_back(std::move(it));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Arithmetic expressions: generator, text rendering and a tree-walking
// reference evaluator. Leaves are Int/Float literals and two variables,
// x (Int) and y (Float).
// ---------------------------------------------------------------------------

struct Arith {
  enum Op { IntLit, FloatLit, VarX, VarY, Neg, Add, Sub, Mul, Div, Mod, Abs, Min, Max } op = IntLit;
  std::int64_t i = 0;
  double f = 0.0;
  std::vector<Arith> kids;
};

struct Num {
  bool is_int = true;
  std::int64_t i = 0;
  double f = 0.0;
  double d() const { return is_int ? static_cast<double>(i) : f; }
};

using Outcome = std::optional<Num>;  // nullopt = evaluation error

inline std::string float_text(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

inline std::string render(const Arith& a) {
  switch (a.op) {
    case Arith::IntLit: return a.i < 0 ? "(" + std::to_string(a.i) + ")" : std::to_string(a.i);
    case Arith::FloatLit: return a.f < 0 ? "(" + float_text(a.f) + ")" : float_text(a.f);
    case Arith::VarX: return "x";
    case Arith::VarY: return "y";
    case Arith::Neg: return "-(" + render(a.kids[0]) + ")";
    case Arith::Add: return "(" + render(a.kids[0]) + " + " + render(a.kids[1]) + ")";
    case Arith::Sub: return "(" + render(a.kids[0]) + " - " + render(a.kids[1]) + ")";
    case Arith::Mul: return "(" + render(a.kids[0]) + " * " + render(a.kids[1]) + ")";
    case Arith::Div: return "(" + render(a.kids[0]) + " / " + render(a.kids[1]) + ")";
    case Arith::Mod: return "(" + render(a.kids[0]) + " % " + render(a.kids[1]) + ")";
    case Arith::Abs: return "abs(" + render(a.kids[0]) + ")";
    case Arith::Min: return "min(" + render(a.kids[0]) + ", " + render(a.kids[1]) + ")";
    case Arith::Max: return "max(" + render(a.kids[0]) + ", " + render(a.kids[1]) + ")";
  }
  return "";
}

inline Arith random_arith(std::mt19937_64& rng, int depth) {
  Arith a;
  if (depth == 0 || coin(rng, 0.25)) {
    switch (uniform_int(rng, 0, 3)) {
      case 0: a.op = Arith::IntLit; a.i = uniform_int(rng, -50, 50); break;
      case 1: a.op = Arith::FloatLit; a.f = (unit(rng) * 2.0 - 1.0) * 20.0; break;
      case 2: a.op = Arith::VarX; break;
      default: a.op = Arith::VarY; break;
    }
    return a;
  }
  static constexpr Arith::Op kOps[] = {Arith::Neg, Arith::Add, Arith::Sub, Arith::Mul, Arith::Div,
                                       Arith::Mod, Arith::Abs, Arith::Min, Arith::Max};
  a.op = kOps[uniform_int(rng, 0, 8)];
  const int arity = (a.op == Arith::Neg || a.op == Arith::Abs) ? 1 : 2;
  for (int k = 0; k < arity; ++k) a.kids.push_back(random_arith(rng, depth - 1));
  return a;
}

inline Outcome reference_eval(const Arith& a, std::int64_t x, double y) {
  auto num_i = [](std::int64_t v) { return Num{true, v, 0.0}; };
  auto num_f = [](double v) { return Num{false, 0, v}; };
  switch (a.op) {
    case Arith::IntLit: return num_i(a.i);
    case Arith::FloatLit: return num_f(a.f);
    case Arith::VarX: return num_i(x);
    case Arith::VarY: return num_f(y);
    default: break;
  }
  std::vector<Num> v;
  for (const auto& k : a.kids) {
    auto r = reference_eval(k, x, y);
    if (!r) return std::nullopt;
    v.push_back(*r);
  }
  const Num& p = v[0];
  switch (a.op) {
    case Arith::Neg:
      if (p.is_int) {
        if (p.i == std::numeric_limits<std::int64_t>::min()) return std::nullopt;
        return num_i(-p.i);
      }
      return num_f(-p.f);
    case Arith::Abs:
      if (p.is_int) {
        if (p.i == std::numeric_limits<std::int64_t>::min()) return std::nullopt;
        return num_i(p.i < 0 ? -p.i : p.i);
      }
      return num_f(std::fabs(p.f));
    default: break;
  }
  const Num& q = v[1];
  switch (a.op) {
    case Arith::Add:
    case Arith::Sub:
    case Arith::Mul:
      if (p.is_int && q.is_int) {
        // widen to 128 bits and range-check
        __int128 r = a.op == Arith::Add   ? static_cast<__int128>(p.i) + q.i
                     : a.op == Arith::Sub ? static_cast<__int128>(p.i) - q.i
                                          : static_cast<__int128>(p.i) * q.i;
        if (r > std::numeric_limits<std::int64_t>::max() || r < std::numeric_limits<std::int64_t>::min())
          return std::nullopt;
        return num_i(static_cast<std::int64_t>(r));
      }
      return num_f(a.op == Arith::Add ? p.d() + q.d() : a.op == Arith::Sub ? p.d() - q.d() : p.d() * q.d());
    case Arith::Div:
      if (q.d() == 0.0) return std::nullopt;
      return num_f(p.d() / q.d());
    case Arith::Mod:
      if (!p.is_int || !q.is_int || q.i == 0) return std::nullopt;
      if (q.i == -1) return num_i(0);
      return num_i(p.i - (p.i / q.i) * q.i);
    case Arith::Min:
    case Arith::Max: {
      // ties and NaN keep the first argument
      const double l = p.d(), r = q.d();
      bool take_second;
      if (p.is_int && q.is_int)
        take_second = a.op == Arith::Min ? q.i < p.i : q.i > p.i;
      else
        take_second = a.op == Arith::Min ? r < l : r > l;
      return take_second ? q : p;
    }
    default: break;
  }
  return std::nullopt;
}

inline Value to_value(const Num& n) { return n.is_int ? Value(n.i) : Value(n.f); }

// ---------------------------------------------------------------------------
// Random values and wire messages spanning the full domain.
// ---------------------------------------------------------------------------

inline std::string random_string(std::mt19937_64& rng, std::size_t max_len = 12) {
  static const std::vector<std::string> kPieces = {
      "a", "z", "Q", "0", " ", "\"", "\\", "/", "\n", "\t", "\r", std::string(1, '\x01'), std::string(1, '\x1f'),
      "\xc3\xa9", "\xe2\x82\xac", "\xf0\x9f\x98\x80", "{", "}", "[", ",", ":", "NaN", "Inf", "-Inf", "e", "-"};
  if (coin(rng, 0.05)) {
    static const char* kWords[] = {"NaN", "Inf", "-Inf", "", "null", "true", "1.0", "-0"};
    return kWords[uniform_int(rng, 0, 7)];
  }
  std::string s;
  const auto n = uniform_int(rng, 0, static_cast<std::int64_t>(max_len));
  for (std::int64_t i = 0; i < n; ++i) s += kPieces[uniform_int(rng, 0, static_cast<std::int64_t>(kPieces.size()) - 1)];
  return s;
}

inline double random_double(std::mt19937_64& rng) {
  switch (uniform_int(rng, 0, 9)) {
    case 0: return std::numeric_limits<double>::quiet_NaN();
    case 1: return coin(rng) ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    case 2: return coin(rng) ? 0.0 : -0.0;
    case 3: return coin(rng) ? std::numeric_limits<double>::denorm_min() : std::numeric_limits<double>::max();
    case 4: {
      // arbitrary finite bit pattern
      for (;;) {
        std::uint64_t bits = rng();
        double d;
        std::memcpy(&d, &bits, sizeof d);
        if (std::isfinite(d)) return d;
      }
    }
    case 5: return static_cast<double>(uniform_int(rng, -100000, 100000));
    default: return (unit(rng) * 2.0 - 1.0) * std::pow(10.0, uniform_int(rng, -20, 20));
  }
}

inline std::int64_t random_int(std::mt19937_64& rng) {
  switch (uniform_int(rng, 0, 4)) {
    case 0: return std::numeric_limits<std::int64_t>::min();
    case 1: return std::numeric_limits<std::int64_t>::max();
    case 2: return static_cast<std::int64_t>(rng());
    default: return uniform_int(rng, -1000, 1000);
  }
}

inline Value random_value(std::mt19937_64& rng, int depth = 3) {
  const int top = depth > 0 ? 6 : 4;
  switch (uniform_int(rng, 0, top)) {
    case 0: return Value();
    case 1: return Value(coin(rng));
    case 2: return Value(random_int(rng));
    case 3: return Value(random_double(rng));
    case 4: return Value(random_string(rng));
    case 5: {
      List l;
      const auto n = uniform_int(rng, 0, 4);
      for (std::int64_t i = 0; i < n; ++i) l.push_back(random_value(rng, depth - 1));
      return Value(std::move(l));
    }
    default: {
      Record r;
      const auto n = uniform_int(rng, 0, 4);
      for (std::int64_t i = 0; i < n; ++i) {
        std::string key = random_string(rng, 6);
        if (key.empty()) key = "k";
        key += "#" + std::to_string(i);  // unique
        r.emplace_back(std::move(key), random_value(rng, depth - 1));
      }
      return Value(std::move(r));
    }
  }
}

inline livewatch::wire::Message random_message(std::mt19937_64& rng) {
  namespace w = livewatch::wire;
  auto opt_str = [&]() -> std::optional<std::string> {
    if (coin(rng)) return std::nullopt;
    return random_string(rng);
  };
  switch (uniform_int(rng, 0, 9)) {
    case 0: {
      w::Hello h;
      h.proto = static_cast<int>(uniform_int(rng, 0, 5));
      if (coin(rng)) h.data_port = static_cast<std::uint16_t>(uniform_int(rng, 0, 65535));
      return h;
    }
    case 1: return w::CreateStream{random_string(rng), random_string(rng, 30), opt_str()};
    case 2: return w::CloseStream{random_string(rng)};
    case 3: return w::ListEvents{};
    case 4: return w::ListStreams{};
    case 5: return w::SetObservable{random_string(rng), random_value(rng), opt_str()};
    case 6: {
      w::Ok ok;
      const auto n = uniform_int(rng, 0, 4);
      for (std::int64_t i = 0; i < n; ++i) ok.fields.emplace_back("f" + std::to_string(i) + random_string(rng, 4), random_value(rng));
      return ok;
    }
    case 7: {
      static constexpr w::ErrorCode kCodes[] = {w::ErrorCode::ParseError, w::ErrorCode::UnknownEvent,
                                                w::ErrorCode::UnknownObservable, w::ErrorCode::UnknownStream,
                                                w::ErrorCode::Readonly, w::ErrorCode::Internal};
      return w::Error{kCodes[uniform_int(rng, 0, 5)], random_string(rng)};
    }
    case 8: {
      w::Subscribe s;
      if (coin(rng, 0.2)) {
        s.wildcard = true;
      } else {
        const auto n = uniform_int(rng, 0, 3);
        for (std::int64_t i = 0; i < n; ++i) {
          auto id = random_string(rng, 5);
          if (id == "*") id = "s";
          s.streams.push_back(id);
        }
      }
      return s;
    }
    default: {
      w::DataMessage m;
      m.stream = random_string(rng, 8);
      m.seq = rng() >> 1;
      m.t = random_double(rng);
      static constexpr w::DataKind kKinds[] = {w::DataKind::Item, w::DataKind::Error, w::DataKind::Closed,
                                               w::DataKind::Dropped};
      m.kind = kKinds[uniform_int(rng, 0, 3)];
      if (m.kind == w::DataKind::Item || m.kind == w::DataKind::Error || coin(rng, 0.1)) m.value = random_value(rng);
      if (m.kind == w::DataKind::Dropped) m.count = uniform_int(rng, 1, 1 << 20);
      return m;
    }
  }
}

}  // namespace oracle

// Readable failure messages for gtest and friends.
namespace livewatch {
inline void PrintTo(const Value& v, std::ostream* os) { *os << wire::encode_value(v); }
}  // namespace livewatch
namespace livewatch::wire {
inline void PrintTo(const DataMessage& m, std::ostream* os) { *os << encode(m); }
inline void PrintTo(const Message& m, std::ostream* os) { *os << encode(m); }
}  // namespace livewatch::wire
