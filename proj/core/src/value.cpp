#include "livewatch/value.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace livewatch {

Value::Value(Record r) {
  if (r.size() <= 8) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i].first.empty()) throw std::invalid_argument("record key must be non-empty");
      for (std::size_t j = 0; j < i; ++j) {
        if (r[j].first == r[i].first) throw std::invalid_argument("duplicate record key: " + r[i].first);
      }
    }
  } else {
    std::unordered_set<std::string_view> seen;
    seen.reserve(r.size());
    for (const auto& [key, _] : r) {
      if (key.empty()) throw std::invalid_argument("record key must be non-empty");
      if (!seen.insert(key).second) throw std::invalid_argument("duplicate record key: " + key);
    }
  }
  data_ = std::move(r);
}

double Value::to_double() const {
  if (is_int()) return static_cast<double>(as_int());
  return as_float();
}

const Value* Value::find(std::string_view key) const {
  if (!is_record()) return nullptr;
  for (const auto& [k, v] : as_record()) {
    if (k == key) return &v;
  }
  return nullptr;
}

bool operator==(const Value& a, const Value& b) {
  if (a.kind() != b.kind()) return false;
  switch (a.kind()) {
    case Value::Kind::Null:
      return true;
    case Value::Kind::Bool:
      return a.as_bool() == b.as_bool();
    case Value::Kind::Int:
      return a.as_int() == b.as_int();
    case Value::Kind::Float: {
      const double x = a.as_float();
      const double y = b.as_float();
      if (std::isnan(x) || std::isnan(y)) return std::isnan(x) && std::isnan(y);
      // distinguishes -0.0 from 0.0 so that identity survives the codec
      return x == y && std::signbit(x) == std::signbit(y);
    }
    case Value::Kind::Str:
      return a.as_str() == b.as_str();
    case Value::Kind::List:
      return a.as_list() == b.as_list();
    case Value::Kind::Record:
      return a.as_record() == b.as_record();
  }
  return false;
}

std::string_view kind_name(Value::Kind kind) {
  switch (kind) {
    case Value::Kind::Null: return "null";
    case Value::Kind::Bool: return "bool";
    case Value::Kind::Int: return "int";
    case Value::Kind::Float: return "float";
    case Value::Kind::Str: return "str";
    case Value::Kind::List: return "list";
    case Value::Kind::Record: return "record";
  }
  return "?";
}

}  // namespace livewatch
