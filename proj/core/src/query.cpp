#include "livewatch/query.hpp"

#include <charconv>
#include <cmath>
#include <limits>

#include "livewatch/wire.hpp"

namespace livewatch::query {

// ===========================================================================
// AST construction and equality
// ===========================================================================

namespace {

struct ArityRange {
  std::size_t min;
  std::size_t max;
};

ArityRange arity(Builtin fn) {
  switch (fn) {
    case Builtin::Min:
    case Builtin::Max:
      return {1, 2};
    case Builtin::Clamp:
      return {3, 3};
    default:
      return {1, 1};
  }
}

bool same_ptr_expr(const ExprPtr& a, const ExprPtr& b) {
  if (!a || !b) return a == b;
  return *a == *b;
}

bool same_lambda(const Lambda& a, const Lambda& b) {
  return a.binder == b.binder && same_ptr_expr(a.body, b.body);
}

bool same_stage(const Stage& a, const Stage& b) {
  if (a.index() != b.index()) return false;
  return std::visit(
      [&b](const auto& sa) -> bool {
        using T = std::decay_t<decltype(sa)>;
        const auto& sb = std::get<T>(b);
        if constexpr (std::is_same_v<T, MapStage> || std::is_same_v<T, WhereStage>) {
          return same_lambda(sa.fn, sb.fn);
        } else if constexpr (std::is_same_v<T, ReduceStage>) {
          if (!(sa.aggregator == sb.aggregator) || sa.fn.has_value() != sb.fn.has_value()) return false;
          return !sa.fn || same_lambda(*sa.fn, *sb.fn);
        } else {
          return sa.mode == sb.mode;
        }
      },
      a);
}

}  // namespace

bool operator==(const Expr& a, const Expr& b) {
  if (a.node.index() != b.node.index()) return false;
  return std::visit(
      [&b](const auto& na) -> bool {
        using T = std::decay_t<decltype(na)>;
        const auto& nb = std::get<T>(b.node);
        if constexpr (std::is_same_v<T, Literal>) {
          return na.value == nb.value;
        } else if constexpr (std::is_same_v<T, Identifier>) {
          return na.name == nb.name;
        } else if constexpr (std::is_same_v<T, FieldAccess>) {
          return na.field == nb.field && same_ptr_expr(na.object, nb.object);
        } else if constexpr (std::is_same_v<T, IndexAccess>) {
          return same_ptr_expr(na.object, nb.object) && same_ptr_expr(na.index, nb.index);
        } else if constexpr (std::is_same_v<T, Unary>) {
          return na.op == nb.op && same_ptr_expr(na.operand, nb.operand);
        } else if constexpr (std::is_same_v<T, Binary>) {
          return na.op == nb.op && same_ptr_expr(na.lhs, nb.lhs) && same_ptr_expr(na.rhs, nb.rhs);
        } else {
          if (na.fn != nb.fn || na.args.size() != nb.args.size()) return false;
          for (std::size_t i = 0; i < na.args.size(); ++i) {
            if (!same_ptr_expr(na.args[i], nb.args[i])) return false;
          }
          return true;
        }
      },
      a.node);
}

ExprPtr make_literal(Value v) { return std::make_shared<Expr>(Expr{Literal{std::move(v)}}); }
ExprPtr make_identifier(std::string name) { return std::make_shared<Expr>(Expr{Identifier{std::move(name)}}); }
ExprPtr make_field(ExprPtr object, std::string field) {
  return std::make_shared<Expr>(Expr{FieldAccess{std::move(object), std::move(field)}});
}
ExprPtr make_index(ExprPtr object, ExprPtr index) {
  return std::make_shared<Expr>(Expr{IndexAccess{std::move(object), std::move(index)}});
}
ExprPtr make_unary(UnaryOp op, ExprPtr operand) {
  return std::make_shared<Expr>(Expr{Unary{op, std::move(operand)}});
}
ExprPtr make_binary(BinaryOp op, ExprPtr lhs, ExprPtr rhs) {
  return std::make_shared<Expr>(Expr{Binary{op, std::move(lhs), std::move(rhs)}});
}
ExprPtr make_call(Builtin fn, std::vector<ExprPtr> args) {
  const auto [lo, hi] = arity(fn);
  if (args.size() < lo || args.size() > hi) {
    throw ValidationError(std::string(builtin_name(fn)) + "() takes " + std::to_string(lo) +
                          (lo == hi ? "" : "-" + std::to_string(hi)) + " argument(s), got " +
                          std::to_string(args.size()));
  }
  return std::make_shared<Expr>(Expr{Call{fn, std::move(args)}});
}

std::string_view builtin_name(Builtin fn) {
  switch (fn) {
    case Builtin::Abs: return "abs";
    case Builtin::Sqrt: return "sqrt";
    case Builtin::Exp: return "exp";
    case Builtin::Ln: return "ln";
    case Builtin::Round: return "round";
    case Builtin::Len: return "len";
    case Builtin::Min: return "min";
    case Builtin::Max: return "max";
    case Builtin::Clamp: return "clamp";
  }
  return "?";
}

std::optional<Builtin> builtin_from_name(std::string_view name) {
  for (auto fn : {Builtin::Abs, Builtin::Sqrt, Builtin::Exp, Builtin::Ln, Builtin::Round, Builtin::Len,
                  Builtin::Min, Builtin::Max, Builtin::Clamp}) {
    if (builtin_name(fn) == name) return fn;
  }
  return std::nullopt;
}

std::string_view op_symbol(BinaryOp op) {
  switch (op) {
    case BinaryOp::Or: return "||";
    case BinaryOp::And: return "&&";
    case BinaryOp::Eq: return "==";
    case BinaryOp::Ne: return "!=";
    case BinaryOp::Lt: return "<";
    case BinaryOp::Le: return "<=";
    case BinaryOp::Gt: return ">";
    case BinaryOp::Ge: return ">=";
    case BinaryOp::Add: return "+";
    case BinaryOp::Sub: return "-";
    case BinaryOp::Mul: return "*";
    case BinaryOp::Div: return "/";
    case BinaryOp::Mod: return "%";
  }
  return "?";
}

// ===========================================================================
// Free identifier analysis
// ===========================================================================

namespace {

void collect_free(const Expr& e, const std::set<std::string>& bound, std::set<std::string>& out) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Identifier>) {
          if (!bound.contains(n.name)) out.insert(n.name);
        } else if constexpr (std::is_same_v<T, FieldAccess>) {
          collect_free(*n.object, bound, out);
        } else if constexpr (std::is_same_v<T, IndexAccess>) {
          collect_free(*n.object, bound, out);
          collect_free(*n.index, bound, out);
        } else if constexpr (std::is_same_v<T, Unary>) {
          collect_free(*n.operand, bound, out);
        } else if constexpr (std::is_same_v<T, Binary>) {
          collect_free(*n.lhs, bound, out);
          collect_free(*n.rhs, bound, out);
        } else if constexpr (std::is_same_v<T, Call>) {
          for (const auto& a : n.args) collect_free(*a, bound, out);
        }
      },
      e.node);
}

// Records `binder.name` accesses; flags any other use of the binder.
void collect_record_use(const Expr& e, const std::string& binder, std::set<std::string>& fields, bool& whole) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Identifier>) {
          if (n.name == binder) whole = true;
        } else if constexpr (std::is_same_v<T, FieldAccess>) {
          const auto* id = std::get_if<Identifier>(&n.object->node);
          if (id != nullptr && id->name == binder) {
            fields.insert(n.field);
          } else {
            collect_record_use(*n.object, binder, fields, whole);
          }
        } else if constexpr (std::is_same_v<T, IndexAccess>) {
          collect_record_use(*n.object, binder, fields, whole);
          collect_record_use(*n.index, binder, fields, whole);
        } else if constexpr (std::is_same_v<T, Unary>) {
          collect_record_use(*n.operand, binder, fields, whole);
        } else if constexpr (std::is_same_v<T, Binary>) {
          collect_record_use(*n.lhs, binder, fields, whole);
          collect_record_use(*n.rhs, binder, fields, whole);
        } else if constexpr (std::is_same_v<T, Call>) {
          for (const auto& a : n.args) collect_record_use(*a, binder, fields, whole);
        }
      },
      e.node);
}

const Lambda* stage_lambda(const Stage& s) {
  if (const auto* m = std::get_if<MapStage>(&s)) return &m->fn;
  if (const auto* w = std::get_if<WhereStage>(&s)) return &w->fn;
  if (const auto* r = std::get_if<ReduceStage>(&s); r && r->fn) return &*r->fn;
  return nullptr;
}

}  // namespace

std::set<std::string> free_identifiers(const Expr& e, const std::set<std::string>& bound) {
  std::set<std::string> out;
  collect_free(e, bound, out);
  return out;
}

std::set<std::string> free_identifiers(const Pipeline& p) { return p.referenced_names(); }

// ===========================================================================
// Pipeline validation
// ===========================================================================

Pipeline::Pipeline(std::vector<Stage> stages) : stages_(std::move(stages)) {
  if (stages_.empty()) throw ValidationError("pipeline has no stages");
  std::optional<std::size_t> window_index;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const Stage& s = stages_[i];
    if (std::holds_alternative<WindowStage>(s)) {
      if (window_index) throw ValidationError("at most one window stage is allowed");
      window_index = i;
      window_ = std::get<WindowStage>(s).mode;
      continue;
    }
    if (reduce_index_) {
      throw ValidationError("stage " + std::to_string(i + 1) + " follows reduce; only window may follow reduce");
    }
    if (std::holds_alternative<ReduceStage>(s)) reduce_index_ = i;
  }
  if (window_index && !reduce_index_) throw ValidationError("window stage requires a reduce stage");
  if (window_.kind == WindowMode::Kind::Count && window_.count < 1) {
    throw ValidationError("window count must be >= 1");
  }
  if (window_.kind == WindowMode::Kind::Time && !(window_.seconds > 0.0 && std::isfinite(window_.seconds))) {
    throw ValidationError("window seconds must be > 0");
  }
  if (reduce_index_) {
    const auto& r = std::get<ReduceStage>(stages_[*reduce_index_]);
    if (r.aggregator.kind == Aggregator::Hist && r.aggregator.bins < 1) {
      throw ValidationError("hist needs at least one bin");
    }
    if (r.aggregator.kind != Aggregator::Count && !r.fn) {
      throw ValidationError("aggregator requires a lambda");
    }
  }

  // Stages up to and including the first map see the raw event record.
  bool record_scope = true;
  for (const Stage& s : stages_) {
    const Lambda* fn = stage_lambda(s);
    if (fn == nullptr) continue;
    collect_free(*fn->body, {fn->binder}, free_);
    if (record_scope) collect_record_use(*fn->body, fn->binder, record_fields_, needs_full_record_);
    if (std::holds_alternative<MapStage>(s)) record_scope = false;
  }
}

const ReduceStage* Pipeline::reducer() const noexcept {
  return reduce_index_ ? &std::get<ReduceStage>(stages_[*reduce_index_]) : nullptr;
}

bool operator==(const Pipeline& a, const Pipeline& b) {
  if (a.stages_.size() != b.stages_.size()) return false;
  for (std::size_t i = 0; i < a.stages_.size(); ++i) {
    if (!same_stage(a.stages_[i], b.stages_[i])) return false;
  }
  return true;
}

// ===========================================================================
// Lexer / parser
// ===========================================================================

namespace {

enum class Tok {
  End, Ident, Int, Float, String,
  LParen, RParen, LBracket, RBracket, Comma, Dot, Pipe, Arrow, Assign,
  Plus, Minus, Star, Slash, Percent,
  Eq, Ne, Lt, Le, Gt, Ge, AndAnd, OrOr, Bang,
};

struct Token {
  Tok kind = Tok::End;
  std::string text;
  Value literal;
  int line = 1;
  int column = 1;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  std::vector<Token> run() {
    std::vector<Token> out;
    for (;;) {
      skip_ws();
      Token t;
      t.line = line_;
      t.column = col_;
      if (pos_ >= src_.size()) {
        t.kind = Tok::End;
        out.push_back(std::move(t));
        return out;
      }
      const char c = src_[pos_];
      if (is_ident_start(c)) {
        lex_ident(t);
      } else if (c >= '0' && c <= '9') {
        lex_number(t);
      } else if (c == '"') {
        lex_string(t);
      } else {
        lex_symbol(t);
      }
      out.push_back(std::move(t));
    }
  }

 private:
  static bool is_ident_start(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }
  static bool is_ident_char(char c) { return is_ident_start(c) || (c >= '0' && c <= '9'); }
  static bool is_digit(char c) { return c >= '0' && c <= '9'; }

  char peek(std::size_t ahead = 0) const { return pos_ + ahead < src_.size() ? src_[pos_ + ahead] : '\0'; }

  void advance() {
    if (src_[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(line_, col_, msg); }

  void skip_ws() {
    while (pos_ < src_.size() && (src_[pos_] == ' ' || src_[pos_] == '\t' || src_[pos_] == '\n' || src_[pos_] == '\r')) {
      advance();
    }
  }

  void lex_ident(Token& t) {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && is_ident_char(src_[pos_])) advance();
    t.kind = Tok::Ident;
    t.text = std::string(src_.substr(start, pos_ - start));
  }

  void lex_number(Token& t) {
    const std::size_t start = pos_;
    const int line = line_;
    const int col = col_;
    bool is_float = false;
    while (is_digit(peek())) advance();
    if (peek() == '.' && is_digit(peek(1))) {
      is_float = true;
      advance();
      while (is_digit(peek())) advance();
    }
    if ((peek() == 'e' || peek() == 'E') &&
        (is_digit(peek(1)) || ((peek(1) == '+' || peek(1) == '-') && is_digit(peek(2))))) {
      is_float = true;
      advance();
      if (peek() == '+' || peek() == '-') advance();
      while (is_digit(peek())) advance();
    }
    if (is_ident_start(peek())) fail("invalid character in number literal");
    t.text = std::string(src_.substr(start, pos_ - start));
    const char* first = t.text.data();
    const char* last = first + t.text.size();
    if (is_float) {
      double d = 0;
      auto res = std::from_chars(first, last, d);
      if (res.ec == std::errc::result_out_of_range) {
        d = std::strtod(t.text.c_str(), nullptr);
      } else if (res.ec != std::errc()) {
        throw ParseError(line, col, "invalid float literal");
      }
      t.kind = Tok::Float;
      t.literal = Value(d);
    } else {
      std::int64_t i = 0;
      auto res = std::from_chars(first, last, i);
      if (res.ec != std::errc()) throw ParseError(line, col, "integer literal out of range");
      t.kind = Tok::Int;
      t.literal = Value(i);
    }
  }

  void lex_string(Token& t) {
    advance();  // opening quote
    std::string s;
    for (;;) {
      if (pos_ >= src_.size()) fail("unterminated string literal");
      const char c = src_[pos_];
      if (c == '"') {
        advance();
        break;
      }
      if (c == '\\') {
        advance();
        if (pos_ >= src_.size()) fail("unterminated escape");
        const char e = src_[pos_];
        if (e == '"') {
          s.push_back('"');
        } else if (e == '\\') {
          s.push_back('\\');
        } else if (e == 'n') {
          s.push_back('\n');
        } else {
          fail(std::string("unsupported escape '\\") + e + "'");
        }
        advance();
        continue;
      }
      s.push_back(c);
      advance();
    }
    t.kind = Tok::String;
    t.literal = Value(std::move(s));
  }

  void lex_symbol(Token& t) {
    const char c = peek();
    const char n = peek(1);
    auto one = [&](Tok k) {
      t.kind = k;
      t.text = std::string(1, c);
      advance();
    };
    auto two = [&](Tok k) {
      t.kind = k;
      t.text = std::string{c, n};
      advance();
      advance();
    };
    switch (c) {
      case '(': return one(Tok::LParen);
      case ')': return one(Tok::RParen);
      case '[': return one(Tok::LBracket);
      case ']': return one(Tok::RBracket);
      case ',': return one(Tok::Comma);
      case '.': return one(Tok::Dot);
      case '+': return one(Tok::Plus);
      case '*': return one(Tok::Star);
      case '/': return one(Tok::Slash);
      case '%': return one(Tok::Percent);
      case '-': return n == '>' ? two(Tok::Arrow) : one(Tok::Minus);
      case '|': return n == '|' ? two(Tok::OrOr) : one(Tok::Pipe);
      case '&':
        if (n == '&') return two(Tok::AndAnd);
        fail("expected '&&'");
      case '=': return n == '=' ? two(Tok::Eq) : one(Tok::Assign);
      case '!': return n == '=' ? two(Tok::Ne) : one(Tok::Bang);
      case '<': return n == '=' ? two(Tok::Le) : one(Tok::Lt);
      case '>': return n == '=' ? two(Tok::Ge) : one(Tok::Gt);
      default:
        fail(std::string("unexpected character '") + c + "'");
    }
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

class Parser {
 public:
  explicit Parser(std::string_view src) : toks_(Lexer(src).run()) {}

  std::vector<Stage> parse_query() {
    std::vector<Stage> stages;
    stages.push_back(parse_stage());
    while (at(Tok::Pipe)) {
      next();
      stages.push_back(parse_stage());
    }
    expect(Tok::End, "end of query");
    return stages;
  }

  ExprPtr parse_standalone_expr() {
    ExprPtr e = parse_expr();
    expect(Tok::End, "end of expression");
    return e;
  }

  WindowMode parse_standalone_window() {
    WindowMode w = parse_window_body();
    expect(Tok::End, "end of window");
    return w;
  }

 private:
  const Token& cur() const { return toks_[idx_]; }
  bool at(Tok k) const { return cur().kind == k; }
  const Token& next() { return toks_[idx_ < toks_.size() - 1 ? idx_++ : idx_]; }

  [[noreturn]] void fail_here(const std::string& msg) const { throw ParseError(cur().line, cur().column, msg); }

  const Token& expect(Tok k, std::string_view what) {
    if (!at(k)) {
      const std::string found = at(Tok::End) ? "end of input" : "'" + cur().text + "'";
      fail_here("expected " + std::string(what) + ", found " + found);
    }
    return next();
  }

  bool at_word(std::string_view w) const { return at(Tok::Ident) && cur().text == w; }

  std::string expect_binder() {
    const Token& t = expect(Tok::Ident, "lambda parameter");
    if (t.text == "true" || t.text == "false" || t.text == "null") {
      throw ParseError(t.line, t.column, "'" + t.text + "' cannot be a parameter name");
    }
    return t.text;
  }

  Lambda parse_lambda() {
    Lambda fn;
    fn.binder = expect_binder();
    expect(Tok::Arrow, "'->'");
    fn.body = parse_expr();
    return fn;
  }

  Stage parse_stage() {
    if (!at(Tok::Ident)) fail_here("expected a stage (map, where, reduce, window)");
    const Token kw = next();
    expect(Tok::LParen, "'('");
    if (kw.text == "map" || kw.text == "where") {
      Lambda fn = parse_lambda();
      expect(Tok::RParen, "')'");
      if (kw.text == "map") return MapStage{std::move(fn)};
      return WhereStage{std::move(fn)};
    }
    if (kw.text == "reduce") {
      ReduceStage r;
      r.aggregator = parse_aggregator();
      if (r.aggregator.kind == Aggregator::Count) {
        if (at(Tok::Comma)) fail_here("reduce(count) takes no lambda");
      } else {
        expect(Tok::Comma, "',' and a lambda after the aggregator");
        r.fn = parse_lambda();
      }
      expect(Tok::RParen, "')'");
      return r;
    }
    if (kw.text == "window") {
      WindowStage w{parse_window_body()};
      expect(Tok::RParen, "')'");
      return w;
    }
    throw ParseError(kw.line, kw.column, "unknown stage '" + kw.text + "'");
  }

  AggregatorSpec parse_aggregator() {
    const Token& t = expect(Tok::Ident, "aggregator");
    AggregatorSpec a;
    if (t.text == "sum") {
      a.kind = Aggregator::Sum;
    } else if (t.text == "avg") {
      a.kind = Aggregator::Avg;
    } else if (t.text == "min") {
      a.kind = Aggregator::Min;
    } else if (t.text == "max") {
      a.kind = Aggregator::Max;
    } else if (t.text == "count") {
      a.kind = Aggregator::Count;
    } else if (t.text == "last") {
      a.kind = Aggregator::Last;
    } else if (t.text == "hist") {
      a.kind = Aggregator::Hist;
      expect(Tok::LBracket, "'[' after hist");
      const Token& n = expect(Tok::Int, "bin count");
      a.bins = n.literal.as_int();
      if (a.bins < 1) throw ValidationError("hist needs at least one bin");
      expect(Tok::RBracket, "']'");
    } else {
      throw ParseError(t.line, t.column, "unknown aggregator '" + t.text + "'");
    }
    return a;
  }

  WindowMode parse_window_body() {
    const Token& t = expect(Tok::Ident, "window mode (group, count=N, seconds=T)");
    if (t.text == "group") return WindowMode::group();
    if (t.text == "count") {
      expect(Tok::Assign, "'='");
      const Token& n = expect(Tok::Int, "integer window size");
      if (n.literal.as_int() < 1) throw ValidationError("window count must be >= 1");
      return WindowMode::every(n.literal.as_int());
    }
    if (t.text == "seconds") {
      expect(Tok::Assign, "'='");
      if (!at(Tok::Int) && !at(Tok::Float)) fail_here("expected a number of seconds");
      const double s = next().literal.to_double();
      if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("window seconds must be > 0");
      return WindowMode::timed(s);
    }
    throw ParseError(t.line, t.column, "unknown window mode '" + t.text + "'");
  }

  ExprPtr parse_expr() { return parse_or(); }

  ExprPtr parse_or() {
    ExprPtr lhs = parse_and();
    while (at(Tok::OrOr)) {
      next();
      lhs = make_binary(BinaryOp::Or, lhs, parse_and());
    }
    return lhs;
  }

  ExprPtr parse_and() {
    ExprPtr lhs = parse_cmp();
    while (at(Tok::AndAnd)) {
      next();
      lhs = make_binary(BinaryOp::And, lhs, parse_cmp());
    }
    return lhs;
  }

  ExprPtr parse_cmp() {
    ExprPtr lhs = parse_add();
    for (;;) {
      BinaryOp op;
      switch (cur().kind) {
        case Tok::Eq: op = BinaryOp::Eq; break;
        case Tok::Ne: op = BinaryOp::Ne; break;
        case Tok::Lt: op = BinaryOp::Lt; break;
        case Tok::Le: op = BinaryOp::Le; break;
        case Tok::Gt: op = BinaryOp::Gt; break;
        case Tok::Ge: op = BinaryOp::Ge; break;
        default: return lhs;
      }
      next();
      lhs = make_binary(op, lhs, parse_add());
    }
  }

  ExprPtr parse_add() {
    ExprPtr lhs = parse_mul();
    for (;;) {
      if (at(Tok::Plus)) {
        next();
        lhs = make_binary(BinaryOp::Add, lhs, parse_mul());
      } else if (at(Tok::Minus)) {
        next();
        lhs = make_binary(BinaryOp::Sub, lhs, parse_mul());
      } else {
        return lhs;
      }
    }
  }

  ExprPtr parse_mul() {
    ExprPtr lhs = parse_unary();
    for (;;) {
      BinaryOp op;
      switch (cur().kind) {
        case Tok::Star: op = BinaryOp::Mul; break;
        case Tok::Slash: op = BinaryOp::Div; break;
        case Tok::Percent: op = BinaryOp::Mod; break;
        default: return lhs;
      }
      next();
      lhs = make_binary(op, lhs, parse_unary());
    }
  }

  ExprPtr parse_unary() {
    if (at(Tok::Minus)) {
      next();
      return make_unary(UnaryOp::Neg, parse_unary());
    }
    if (at(Tok::Bang)) {
      next();
      return make_unary(UnaryOp::Not, parse_unary());
    }
    return parse_postfix();
  }

  ExprPtr parse_postfix() {
    ExprPtr e = parse_primary();
    for (;;) {
      if (at(Tok::Dot)) {
        next();
        e = make_field(e, expect(Tok::Ident, "field name after '.'").text);
      } else if (at(Tok::LBracket)) {
        next();
        ExprPtr idx = parse_expr();
        expect(Tok::RBracket, "']'");
        e = make_index(e, idx);
      } else {
        return e;
      }
    }
  }

  ExprPtr parse_primary() {
    const Token& t = cur();
    switch (t.kind) {
      case Tok::Int:
      case Tok::Float:
      case Tok::String:
        return make_literal(next().literal);
      case Tok::LParen: {
        next();
        ExprPtr e = parse_expr();
        expect(Tok::RParen, "')'");
        return e;
      }
      case Tok::Ident: {
        const Token id = next();
        if (id.text == "true") return make_literal(Value(true));
        if (id.text == "false") return make_literal(Value(false));
        if (id.text == "null") return make_literal(Value());
        if (!at(Tok::LParen)) return make_identifier(id.text);
        const auto fn = builtin_from_name(id.text);
        if (!fn) throw ParseError(id.line, id.column, "unknown function '" + id.text + "'");
        next();
        std::vector<ExprPtr> args;
        if (!at(Tok::RParen)) {
          args.push_back(parse_expr());
          while (at(Tok::Comma)) {
            next();
            args.push_back(parse_expr());
          }
        }
        expect(Tok::RParen, "')'");
        const auto [lo, hi] = arity(*fn);
        if (args.size() < lo || args.size() > hi) {
          throw ParseError(id.line, id.column,
                           id.text + "() takes " + std::to_string(lo) +
                               (lo == hi ? "" : " to " + std::to_string(hi)) + " argument(s), got " +
                               std::to_string(args.size()));
        }
        return make_call(*fn, std::move(args));
      }
      default:
        fail_here(at(Tok::End) ? "unexpected end of input" : "unexpected '" + t.text + "'");
    }
  }

  std::vector<Token> toks_;
  std::size_t idx_ = 0;
};

}  // namespace

Pipeline parse(std::string_view text) { return Pipeline(Parser(text).parse_query()); }

ExprPtr parse_expression(std::string_view text) { return Parser(text).parse_standalone_expr(); }

WindowMode parse_window(std::string_view text) { return Parser(text).parse_standalone_window(); }

// ===========================================================================
// Printing
// ===========================================================================

namespace {

void print_string_literal(std::string& out, const std::string& s) {
  out.push_back('"');
  for (char c : s) {
    if (c == '"') {
      out += "\\\"";
    } else if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out.push_back(c);
    }
  }
  out.push_back('"');
}

void print_expr(std::string& out, const Expr& e) {
  std::visit(
      [&out](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          const Value& v = n.value;
          if (v.is_str()) {
            print_string_literal(out, v.as_str());
          } else if (v.is_float()) {
            const double d = v.as_float();
            if (std::isnan(d)) {
              out += "(0.0 / 0.0)";
            } else if (std::isinf(d)) {
              out += d > 0 ? "(1.0 / 0.0)" : "(-1.0 / 0.0)";
            } else if (d < 0 || (d == 0 && std::signbit(d))) {
              out += "(-" + wire::format_float(-d) + ")";
            } else {
              out += wire::format_float(d);
            }
          } else if (v.is_int() && v.as_int() < 0) {
            out += "(" + std::to_string(v.as_int()) + ")";
          } else {
            out += wire::encode_value(v);
          }
        } else if constexpr (std::is_same_v<T, Identifier>) {
          out += n.name;
        } else if constexpr (std::is_same_v<T, FieldAccess>) {
          print_expr(out, *n.object);
          out.push_back('.');
          out += n.field;
        } else if constexpr (std::is_same_v<T, IndexAccess>) {
          print_expr(out, *n.object);
          out.push_back('[');
          print_expr(out, *n.index);
          out.push_back(']');
        } else if constexpr (std::is_same_v<T, Unary>) {
          out += n.op == UnaryOp::Neg ? "(-" : "(!";
          print_expr(out, *n.operand);
          out.push_back(')');
        } else if constexpr (std::is_same_v<T, Binary>) {
          out.push_back('(');
          print_expr(out, *n.lhs);
          out.push_back(' ');
          out += op_symbol(n.op);
          out.push_back(' ');
          print_expr(out, *n.rhs);
          out.push_back(')');
        } else {
          out += builtin_name(n.fn);
          out.push_back('(');
          for (std::size_t i = 0; i < n.args.size(); ++i) {
            if (i) out += ", ";
            print_expr(out, *n.args[i]);
          }
          out.push_back(')');
        }
      },
      e.node);
}

std::string aggregator_text(const AggregatorSpec& a) {
  switch (a.kind) {
    case Aggregator::Sum: return "sum";
    case Aggregator::Avg: return "avg";
    case Aggregator::Min: return "min";
    case Aggregator::Max: return "max";
    case Aggregator::Count: return "count";
    case Aggregator::Last: return "last";
    case Aggregator::Hist: return "hist[" + std::to_string(a.bins) + "]";
  }
  return "?";
}

std::string lambda_text(const Lambda& fn) { return fn.binder + " -> " + print(*fn.body); }

}  // namespace

std::string print(const Expr& e) {
  std::string out;
  print_expr(out, e);
  return out;
}

std::string print(const WindowMode& w) {
  switch (w.kind) {
    case WindowMode::Kind::Group: return "group";
    case WindowMode::Kind::Count: return "count=" + std::to_string(w.count);
    case WindowMode::Kind::Time: return "seconds=" + wire::format_float(w.seconds);
  }
  return "group";
}

std::string print(const Pipeline& p) {
  std::string out;
  for (const Stage& s : p.stages()) {
    if (!out.empty()) out += " | ";
    std::visit(
        [&out](const auto& st) {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, MapStage>) {
            out += "map(" + lambda_text(st.fn) + ")";
          } else if constexpr (std::is_same_v<T, WhereStage>) {
            out += "where(" + lambda_text(st.fn) + ")";
          } else if constexpr (std::is_same_v<T, ReduceStage>) {
            out += "reduce(" + aggregator_text(st.aggregator);
            if (st.fn) out += ", " + lambda_text(*st.fn);
            out += ")";
          } else {
            out += "window(" + print(st.mode) + ")";
          }
        },
        s);
  }
  return out;
}

// ===========================================================================
// Evaluation
// ===========================================================================

namespace {

[[noreturn]] void type_error(std::string_view op, const Value& a) {
  throw EvalError("type mismatch: '" + std::string(op) + "' on " + std::string(kind_name(a.kind())));
}

[[noreturn]] void type_error(std::string_view op, const Value& a, const Value& b) {
  throw EvalError("type mismatch: '" + std::string(op) + "' on " + std::string(kind_name(a.kind())) + " and " +
                  std::string(kind_name(b.kind())));
}

template <typename Op>
std::int64_t checked(Op op, std::int64_t x, std::int64_t y) {
  std::int64_t r = 0;
  if (op(x, y, &r)) throw EvalError("integer overflow");
  return r;
}

// Numeric comparison; -1, 0, 1, or nullopt when unordered (NaN).
std::optional<int> numeric_compare(const Value& a, const Value& b) {
  if (a.is_int() && b.is_int()) {
    return a.as_int() < b.as_int() ? -1 : (a.as_int() > b.as_int() ? 1 : 0);
  }
  const double x = a.to_double();
  const double y = b.to_double();
  if (x < y) return -1;
  if (x > y) return 1;
  if (x == y) return 0;
  return std::nullopt;
}

bool loose_equal(const Value& a, const Value& b) {
  if (a.is_numeric() && b.is_numeric()) {
    const auto c = numeric_compare(a, b);
    return c && *c == 0;
  }
  if (a.kind() != b.kind()) return false;
  switch (a.kind()) {
    case Value::Kind::Null: return true;
    case Value::Kind::Bool: return a.as_bool() == b.as_bool();
    case Value::Kind::Str: return a.as_str() == b.as_str();
    case Value::Kind::List: {
      const auto& x = a.as_list();
      const auto& y = b.as_list();
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!loose_equal(x[i], y[i])) return false;
      }
      return true;
    }
    case Value::Kind::Record: {
      const auto& x = a.as_record();
      const auto& y = b.as_record();
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].first != y[i].first || !loose_equal(x[i].second, y[i].second)) return false;
      }
      return true;
    }
    default: return false;
  }
}

Value arithmetic(BinaryOp op, const Value& a, const Value& b) {
  const std::string_view sym = op_symbol(op);
  if (op == BinaryOp::Add && a.is_str() && b.is_str()) return Value(a.as_str() + b.as_str());
  if (!a.is_numeric() || !b.is_numeric()) type_error(sym, a, b);

  if (op == BinaryOp::Div) {
    const double d = b.to_double();
    if (d == 0.0) throw EvalError("division by zero");
    return Value(a.to_double() / d);
  }
  if (op == BinaryOp::Mod) {
    if (!a.is_int() || !b.is_int()) type_error(sym, a, b);
    if (b.as_int() == 0) throw EvalError("division by zero");
    if (b.as_int() == -1) return Value(std::int64_t{0});
    return Value(a.as_int() % b.as_int());
  }
  if (a.is_int() && b.is_int()) {
    const std::int64_t x = a.as_int();
    const std::int64_t y = b.as_int();
    using I = std::int64_t;
    switch (op) {
      case BinaryOp::Add: return Value(checked([](I p, I q, I* r) { return __builtin_add_overflow(p, q, r); }, x, y));
      case BinaryOp::Sub: return Value(checked([](I p, I q, I* r) { return __builtin_sub_overflow(p, q, r); }, x, y));
      case BinaryOp::Mul: return Value(checked([](I p, I q, I* r) { return __builtin_mul_overflow(p, q, r); }, x, y));
      default: break;
    }
  }
  const double x = a.to_double();
  const double y = b.to_double();
  switch (op) {
    case BinaryOp::Add: return Value(x + y);
    case BinaryOp::Sub: return Value(x - y);
    case BinaryOp::Mul: return Value(x * y);
    default: break;
  }
  throw EvalError("internal: unexpected arithmetic operator");
}

double numeric_arg(const Value& v, Builtin fn) {
  if (!v.is_numeric()) type_error(builtin_name(fn), v);
  return v.to_double();
}

Value extremum(Builtin fn, const Value& a, const Value& b) {
  if (!a.is_numeric() || !b.is_numeric()) type_error(builtin_name(fn), a, b);
  const auto c = numeric_compare(a, b);
  if (!c) return a;
  if (fn == Builtin::Min) return *c <= 0 ? a : b;
  return *c >= 0 ? a : b;
}

Value call_builtin(Builtin fn, const std::vector<Value>& args) {
  switch (fn) {
    case Builtin::Abs: {
      const Value& x = args[0];
      if (x.is_int()) {
        if (x.as_int() == std::numeric_limits<std::int64_t>::min()) throw EvalError("integer overflow");
        return Value(x.as_int() < 0 ? -x.as_int() : x.as_int());
      }
      return Value(std::fabs(numeric_arg(x, fn)));
    }
    case Builtin::Sqrt: {
      const double x = numeric_arg(args[0], fn);
      if (x < 0) throw EvalError("sqrt of negative number");
      return Value(std::sqrt(x));
    }
    case Builtin::Exp:
      return Value(std::exp(numeric_arg(args[0], fn)));
    case Builtin::Ln: {
      const double x = numeric_arg(args[0], fn);
      if (!(x > 0)) throw EvalError("ln of non-positive number");
      return Value(std::log(x));
    }
    case Builtin::Round: {
      if (args[0].is_int()) return args[0];
      const double r = std::round(numeric_arg(args[0], fn));
      if (!std::isfinite(r) || r < -9.2233720368547758e18 || r >= 9.2233720368547758e18) {
        throw EvalError("round result out of integer range");
      }
      return Value(static_cast<std::int64_t>(r));
    }
    case Builtin::Len: {
      const Value& x = args[0];
      if (x.is_str()) return Value(static_cast<std::int64_t>(x.as_str().size()));
      if (x.is_list()) return Value(static_cast<std::int64_t>(x.as_list().size()));
      if (x.is_record()) return Value(static_cast<std::int64_t>(x.as_record().size()));
      type_error("len", x);
    }
    case Builtin::Min:
    case Builtin::Max: {
      if (args.size() == 2) return extremum(fn, args[0], args[1]);
      if (!args[0].is_list()) type_error(builtin_name(fn), args[0]);
      const auto& items = args[0].as_list();
      if (items.empty()) throw EvalError(std::string(builtin_name(fn)) + "() of empty list");
      Value best = items.front();
      if (!best.is_numeric()) type_error(builtin_name(fn), best);
      for (std::size_t i = 1; i < items.size(); ++i) best = extremum(fn, best, items[i]);
      return best;
    }
    case Builtin::Clamp: {
      for (const auto& a : args) {
        if (!a.is_numeric()) type_error("clamp", a);
      }
      const auto order = numeric_compare(args[1], args[2]);
      if (!order || *order > 0) throw EvalError("clamp lower bound exceeds upper bound");
      const auto lo = numeric_compare(args[0], args[1]);
      if (lo && *lo < 0) return args[1];
      const auto hi = numeric_compare(args[0], args[2]);
      if (hi && *hi > 0) return args[2];
      return args[0];
    }
  }
  throw EvalError("internal: unknown builtin");
}

Value eval(const Expr& e, const Binding& binding);

Value eval_binary(const Binary& n, const Binding& binding) {
  if (n.op == BinaryOp::Or || n.op == BinaryOp::And) {
    const Value lhs = eval(*n.lhs, binding);
    if (!lhs.is_bool()) type_error(op_symbol(n.op), lhs);
    if (n.op == BinaryOp::Or && lhs.as_bool()) return Value(true);
    if (n.op == BinaryOp::And && !lhs.as_bool()) return Value(false);
    const Value rhs = eval(*n.rhs, binding);
    if (!rhs.is_bool()) type_error(op_symbol(n.op), rhs);
    return rhs;
  }
  const Value lhs = eval(*n.lhs, binding);
  const Value rhs = eval(*n.rhs, binding);
  switch (n.op) {
    case BinaryOp::Eq: return Value(loose_equal(lhs, rhs));
    case BinaryOp::Ne: return Value(!loose_equal(lhs, rhs));
    case BinaryOp::Lt:
    case BinaryOp::Le:
    case BinaryOp::Gt:
    case BinaryOp::Ge: {
      if (!lhs.is_numeric() || !rhs.is_numeric()) type_error(op_symbol(n.op), lhs, rhs);
      const auto c = numeric_compare(lhs, rhs);
      if (!c) return Value(false);
      switch (n.op) {
        case BinaryOp::Lt: return Value(*c < 0);
        case BinaryOp::Le: return Value(*c <= 0);
        case BinaryOp::Gt: return Value(*c > 0);
        default: return Value(*c >= 0);
      }
    }
    default:
      return arithmetic(n.op, lhs, rhs);
  }
}

Value eval(const Expr& e, const Binding& binding) {
  return std::visit(
      [&binding](const auto& n) -> Value {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          return n.value;
        } else if constexpr (std::is_same_v<T, Identifier>) {
          const Value* v = binding.lookup(n.name);
          if (v == nullptr) throw EvalError("unbound identifier '" + n.name + "'");
          return *v;
        } else if constexpr (std::is_same_v<T, FieldAccess>) {
          const Value obj = eval(*n.object, binding);
          if (!obj.is_record()) throw EvalError("field access '." + n.field + "' on " + std::string(kind_name(obj.kind())));
          const Value* v = obj.find(n.field);
          if (v == nullptr) throw EvalError("missing field '" + n.field + "'");
          return *v;
        } else if constexpr (std::is_same_v<T, IndexAccess>) {
          const Value obj = eval(*n.object, binding);
          const Value idx = eval(*n.index, binding);
          if (obj.is_list() && idx.is_int()) {
            const std::int64_t i = idx.as_int();
            if (i < 0) throw EvalError("negative index " + std::to_string(i));
            const auto& items = obj.as_list();
            if (static_cast<std::uint64_t>(i) >= items.size()) {
              throw EvalError("index " + std::to_string(i) + " out of range (size " + std::to_string(items.size()) + ")");
            }
            return items[static_cast<std::size_t>(i)];
          }
          if (obj.is_record() && idx.is_str()) {
            const Value* v = obj.find(idx.as_str());
            if (v == nullptr) throw EvalError("missing field '" + idx.as_str() + "'");
            return *v;
          }
          type_error("[]", obj, idx);
        } else if constexpr (std::is_same_v<T, Unary>) {
          const Value v = eval(*n.operand, binding);
          if (n.op == UnaryOp::Not) {
            if (!v.is_bool()) type_error("!", v);
            return Value(!v.as_bool());
          }
          if (v.is_int()) {
            if (v.as_int() == std::numeric_limits<std::int64_t>::min()) throw EvalError("integer overflow");
            return Value(-v.as_int());
          }
          if (v.is_float()) return Value(-v.as_float());
          type_error("-", v);
        } else if constexpr (std::is_same_v<T, Binary>) {
          return eval_binary(n, binding);
        } else {
          std::vector<Value> args;
          args.reserve(n.args.size());
          for (const auto& a : n.args) args.push_back(eval(*a, binding));
          return call_builtin(n.fn, args);
        }
      },
      e.node);
}

}  // namespace

Value evaluate(const Expr& expr, const Binding& binding) { return eval(expr, binding); }

}  // namespace livewatch::query
