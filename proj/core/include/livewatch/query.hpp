#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "livewatch/value.hpp"

/// Map-reduce pipeline language submitted by clients as stream queries.
///
///   query   := stage ("|" stage)*
///   stage   := map(ID -> expr) | where(ID -> expr)
///            | reduce(AGG [, ID -> expr]) | window(group | count=INT | seconds=NUMBER)
///   AGG     := sum | avg | min | max | count | last | hist[INT]
///
/// Expressions use the usual precedence:
///   || < && < comparisons < + - < * / % < unary - ! < postfix .field [i] call
namespace livewatch::query {

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, int column, const std::string& message)
      : std::runtime_error(std::to_string(line) + ":" + std::to_string(column) + ": " + message),
        line_(line),
        column_(column),
        message_(message) {}
  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }
  const std::string& message() const noexcept { return message_; }

 private:
  int line_;
  int column_;
  std::string message_;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ----- expressions -----

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

enum class UnaryOp { Neg, Not };
enum class BinaryOp { Or, And, Eq, Ne, Lt, Le, Gt, Ge, Add, Sub, Mul, Div, Mod };
enum class Builtin { Abs, Sqrt, Exp, Ln, Round, Len, Min, Max, Clamp };

struct Literal {
  Value value;
};
struct Identifier {
  std::string name;
};
struct FieldAccess {
  ExprPtr object;
  std::string field;
};
struct IndexAccess {
  ExprPtr object;
  ExprPtr index;
};
struct Unary {
  UnaryOp op;
  ExprPtr operand;
};
struct Binary {
  BinaryOp op;
  ExprPtr lhs;
  ExprPtr rhs;
};
struct Call {
  Builtin fn;
  std::vector<ExprPtr> args;
};

struct Expr {
  std::variant<Literal, Identifier, FieldAccess, IndexAccess, Unary, Binary, Call> node;
};

/// Structural equality of expression trees.
bool operator==(const Expr& a, const Expr& b);

ExprPtr make_literal(Value v);
ExprPtr make_identifier(std::string name);
ExprPtr make_field(ExprPtr object, std::string field);
ExprPtr make_index(ExprPtr object, ExprPtr index);
ExprPtr make_unary(UnaryOp op, ExprPtr operand);
ExprPtr make_binary(BinaryOp op, ExprPtr lhs, ExprPtr rhs);
/// Throws ValidationError when the argument count is wrong for fn.
ExprPtr make_call(Builtin fn, std::vector<ExprPtr> args);

std::string_view builtin_name(Builtin fn);
std::optional<Builtin> builtin_from_name(std::string_view name);
std::string_view op_symbol(BinaryOp op);

// ----- pipeline -----

struct Lambda {
  std::string binder;
  ExprPtr body;
};

enum class Aggregator { Sum, Avg, Min, Max, Count, Last, Hist };

struct AggregatorSpec {
  Aggregator kind = Aggregator::Sum;
  std::int64_t bins = 0;  // hist only
  friend bool operator==(const AggregatorSpec&, const AggregatorSpec&) = default;
};

struct WindowMode {
  enum class Kind { Group, Count, Time };
  Kind kind = Kind::Group;
  std::int64_t count = 0;
  double seconds = 0.0;

  static WindowMode group() { return {}; }
  static WindowMode every(std::int64_t n) { return {Kind::Count, n, 0.0}; }
  static WindowMode timed(double s) { return {Kind::Time, 0, s}; }
  friend bool operator==(const WindowMode&, const WindowMode&) = default;
};

struct MapStage {
  Lambda fn;
};
struct WhereStage {
  Lambda fn;
};
struct ReduceStage {
  AggregatorSpec aggregator;
  std::optional<Lambda> fn;  // absent only for count
};
struct WindowStage {
  WindowMode mode;
};

using Stage = std::variant<MapStage, WhereStage, ReduceStage, WindowStage>;

/// A validated pipeline plus the observable names it reads.
class Pipeline {
 public:
  /// Validates stage placement; throws ValidationError.
  explicit Pipeline(std::vector<Stage> stages);

  const std::vector<Stage>& stages() const noexcept { return stages_; }

  /// Effective window: the Window stage if present, else Group.
  WindowMode window() const noexcept { return window_; }
  const ReduceStage* reducer() const noexcept;

  /// Bare identifiers read from the event scope (not stage binders).
  const std::set<std::string>& referenced_names() const noexcept { return free_; }

  /// Fields accessed as `binder.name` on the event record itself, i.e. by
  /// stages that run before the first map.
  const std::set<std::string>& record_fields() const noexcept { return record_fields_; }

  /// True when an event-record binder is used whole (e.g. `map(b -> b)`),
  /// which requires every observable to be pulled.
  bool needs_full_record() const noexcept { return needs_full_record_; }

  friend bool operator==(const Pipeline& a, const Pipeline& b);

 private:
  std::vector<Stage> stages_;
  WindowMode window_;
  std::optional<std::size_t> reduce_index_;
  std::set<std::string> free_;
  std::set<std::string> record_fields_;
  bool needs_full_record_ = false;
};

Pipeline parse(std::string_view text);
ExprPtr parse_expression(std::string_view text);
/// Parses the body of a window stage ("group", "count=3", "seconds=2.5").
WindowMode parse_window(std::string_view text);

std::string print(const Pipeline& p);
std::string print(const Expr& e);
std::string print(const WindowMode& w);

std::set<std::string> free_identifiers(const Pipeline& p);
std::set<std::string> free_identifiers(const Expr& e, const std::set<std::string>& bound);

// ----- evaluation -----

/// Name resolution for evaluate(). Returns nullptr for unbound names.
class Binding {
 public:
  virtual ~Binding() = default;
  virtual const Value* lookup(std::string_view name) const = 0;
};

/// A stage binder over a fallback scope of observables (the event record).
class StageBinding final : public Binding {
 public:
  StageBinding(std::string_view binder, const Value& current, const Value& event_record)
      : binder_(binder), current_(current), event_record_(event_record) {}

  const Value* lookup(std::string_view name) const override {
    if (name == binder_) return &current_;
    return event_record_.find(name);
  }

 private:
  std::string_view binder_;
  const Value& current_;
  const Value& event_record_;
};

/// Bindings given as a Record value (tests, one-off evaluation).
class RecordBinding final : public Binding {
 public:
  explicit RecordBinding(Value record) : record_(std::move(record)) {}
  const Value* lookup(std::string_view name) const override { return record_.find(name); }

 private:
  Value record_;
};

/// Throws EvalError. Pure and reentrant.
Value evaluate(const Expr& expr, const Binding& binding);

}  // namespace livewatch::query
