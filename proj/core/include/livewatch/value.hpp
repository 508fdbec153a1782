#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace livewatch {

class Value;

using List = std::vector<Value>;
using Field = std::pair<std::string, Value>;
// Insertion-ordered; keys unique and non-empty (checked when wrapped in a Value).
using Record = std::vector<Field>;

/// Self-describing datum that flows through queries, the wire and stream files.
///
/// Values are immutable once built. Equality is structural identity: Int and
/// Float never compare equal to each other, and NaN equals NaN. Use the query
/// evaluator for numeric comparison semantics.
class Value {
 public:
  enum class Kind { Null, Bool, Int, Float, Str, List, Record };

  Value() = default;
  Value(std::nullptr_t) {}
  Value(bool b) : data_(b) {}
  Value(int i) : data_(static_cast<std::int64_t>(i)) {}
  Value(std::int64_t i) : data_(i) {}
  Value(double d) : data_(d) {}
  Value(std::string s) : data_(std::move(s)) {}
  Value(std::string_view s) : data_(std::string(s)) {}
  Value(const char* s) : data_(std::string(s)) {}
  Value(List l) : data_(std::move(l)) {}
  /// Throws std::invalid_argument on duplicate or empty keys.
  Value(Record r);

  static Value list(std::initializer_list<Value> items) { return Value(List(items)); }
  static Value record(std::initializer_list<Field> fields) { return Value(Record(fields)); }

  Kind kind() const noexcept { return static_cast<Kind>(data_.index()); }
  bool is_null() const noexcept { return kind() == Kind::Null; }
  bool is_bool() const noexcept { return kind() == Kind::Bool; }
  bool is_int() const noexcept { return kind() == Kind::Int; }
  bool is_float() const noexcept { return kind() == Kind::Float; }
  bool is_numeric() const noexcept { return is_int() || is_float(); }
  bool is_str() const noexcept { return kind() == Kind::Str; }
  bool is_list() const noexcept { return kind() == Kind::List; }
  bool is_record() const noexcept { return kind() == Kind::Record; }

  // Accessors throw std::bad_variant_access on kind mismatch.
  bool as_bool() const { return std::get<bool>(data_); }
  std::int64_t as_int() const { return std::get<std::int64_t>(data_); }
  double as_float() const { return std::get<double>(data_); }
  const std::string& as_str() const { return std::get<std::string>(data_); }
  const List& as_list() const { return std::get<List>(data_); }
  const Record& as_record() const { return std::get<Record>(data_); }

  /// Int or Float widened to double.
  double to_double() const;

  /// Field lookup on a Record; nullptr when absent or not a Record.
  const Value* find(std::string_view key) const;

  friend bool operator==(const Value& a, const Value& b);

 private:
  std::variant<std::monostate, bool, std::int64_t, double, std::string, List, Record> data_;
};

std::string_view kind_name(Value::Kind kind);

}  // namespace livewatch
