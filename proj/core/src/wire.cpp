#include "livewatch/wire.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>

namespace livewatch::wire {

namespace {

constexpr int kMaxDepth = 256;

void append_escaped_string(std::string& out, std::string_view s) {
  out.push_back('"');
  // keep literal strings spelled like non-finite floats distinguishable
  std::size_t start = 0;
  if (s == "NaN" || s == "Inf" || s == "-Inf") {
    static constexpr char kHex[] = "0123456789abcdef";
    const auto c = static_cast<unsigned char>(s[0]);
    out += "\\u00";
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 0xF]);
    start = 1;
  }
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      case '\b': out += "\\b"; break;
      case '\f': out += "\\f"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          static constexpr char kHex[] = "0123456789abcdef";
          out += "\\u00";
          out.push_back(kHex[(c >> 4) & 0xF]);
          out.push_back(kHex[c & 0xF]);
        } else {
          out.push_back(c);
        }
    }
  }
  out.push_back('"');
}

void append_float(std::string& out, double d) {
  if (std::isnan(d)) {
    out += "\"NaN\"";
  } else if (std::isinf(d)) {
    out += d > 0 ? "\"Inf\"" : "\"-Inf\"";
  } else {
    out += format_float(d);
  }
}

void append_int(std::string& out, std::int64_t i) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof buf, i);
  out.append(buf, res.ptr);
}

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Value parse_document() {
    skip_ws();
    Value v = parse_value(0);
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw MalformedLine(pos_, what); }

  void skip_ws() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool consume_word(std::string_view word) {
    if (text_.substr(pos_, word.size()) == word) {
      pos_ += word.size();
      return true;
    }
    return false;
  }

  Value parse_value(int depth) {
    if (depth > kMaxDepth) fail("nesting too deep");
    if (pos_ >= text_.size()) fail("unexpected end of input");
    switch (peek()) {
      case '{': return parse_object(depth);
      case '[': return parse_array(depth);
      case '"': {
        bool escaped = false;
        std::string s = parse_string(escaped);
        if (!escaped) {
          if (s == "NaN") return Value(std::numeric_limits<double>::quiet_NaN());
          if (s == "Inf") return Value(std::numeric_limits<double>::infinity());
          if (s == "-Inf") return Value(-std::numeric_limits<double>::infinity());
        }
        return Value(std::move(s));
      }
      case 't':
        if (consume_word("true")) return Value(true);
        fail("invalid literal");
      case 'f':
        if (consume_word("false")) return Value(false);
        fail("invalid literal");
      case 'n':
        if (consume_word("null")) return Value();
        fail("invalid literal");
      default:
        return parse_number();
    }
  }

  Value parse_object(int depth) {
    expect('{');
    Record fields;
    skip_ws();
    if (peek() == '}') {
      ++pos_;
      return Value(std::move(fields));
    }
    for (;;) {
      skip_ws();
      if (peek() != '"') fail("expected object key");
      const std::size_t key_pos = pos_;
      bool escaped = false;
      std::string key = parse_string(escaped);
      if (key.empty()) throw MalformedLine(key_pos, "empty object key");
      for (const auto& [k, _] : fields) {
        if (k == key) throw MalformedLine(key_pos, "duplicate object key");
      }
      skip_ws();
      expect(':');
      skip_ws();
      Value v = parse_value(depth + 1);
      fields.emplace_back(std::move(key), std::move(v));
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      expect('}');
      break;
    }
    return Value(std::move(fields));
  }

  Value parse_array(int depth) {
    expect('[');
    List items;
    skip_ws();
    if (peek() == ']') {
      ++pos_;
      return Value(std::move(items));
    }
    for (;;) {
      skip_ws();
      items.push_back(parse_value(depth + 1));
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      expect(']');
      break;
    }
    return Value(std::move(items));
  }

  unsigned parse_hex4() {
    if (pos_ + 4 > text_.size()) fail("truncated \\u escape");
    unsigned cp = 0;
    for (int i = 0; i < 4; ++i) {
      const char c = text_[pos_++];
      cp <<= 4;
      if (c >= '0' && c <= '9') {
        cp |= static_cast<unsigned>(c - '0');
      } else if (c >= 'a' && c <= 'f') {
        cp |= static_cast<unsigned>(c - 'a' + 10);
      } else if (c >= 'A' && c <= 'F') {
        cp |= static_cast<unsigned>(c - 'A' + 10);
      } else {
        fail("invalid hex digit");
      }
    }
    return cp;
  }

  static void append_utf8(std::string& out, unsigned cp) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }

  std::string parse_string(bool& escaped) {
    expect('"');
    std::string out;
    for (;;) {
      if (pos_ >= text_.size()) fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') break;
      if (static_cast<unsigned char>(c) < 0x20) fail("raw control character in string");
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      escaped = true;
      if (pos_ >= text_.size()) fail("unterminated escape");
      const char e = text_[pos_++];
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case '/': out.push_back('/'); break;
        case 'b': out.push_back('\b'); break;
        case 'f': out.push_back('\f'); break;
        case 'n': out.push_back('\n'); break;
        case 'r': out.push_back('\r'); break;
        case 't': out.push_back('\t'); break;
        case 'u': {
          unsigned cp = parse_hex4();
          if (cp >= 0xD800 && cp <= 0xDBFF) {
            if (!consume_word("\\u")) fail("unpaired surrogate");
            const unsigned lo = parse_hex4();
            if (lo < 0xDC00 || lo > 0xDFFF) fail("invalid low surrogate");
            cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
          } else if (cp >= 0xDC00 && cp <= 0xDFFF) {
            fail("unpaired surrogate");
          }
          append_utf8(out, cp);
          break;
        }
        default:
          fail("invalid escape");
      }
    }
    return out;
  }

  Value parse_number() {
    const std::size_t start = pos_;
    bool is_float = false;
    if (peek() == '-') ++pos_;
    if (peek() == '0') {
      ++pos_;
    } else if (peek() >= '1' && peek() <= '9') {
      while (peek() >= '0' && peek() <= '9') ++pos_;
    } else {
      fail("invalid number");
    }
    if (peek() == '.') {
      is_float = true;
      ++pos_;
      if (!(peek() >= '0' && peek() <= '9')) fail("digit expected after '.'");
      while (peek() >= '0' && peek() <= '9') ++pos_;
    }
    if (peek() == 'e' || peek() == 'E') {
      is_float = true;
      ++pos_;
      if (peek() == '+' || peek() == '-') ++pos_;
      if (!(peek() >= '0' && peek() <= '9')) fail("digit expected in exponent");
      while (peek() >= '0' && peek() <= '9') ++pos_;
    }
    const char* first = text_.data() + start;
    const char* last = text_.data() + pos_;
    if (is_float) {
      double d = 0;
      auto res = std::from_chars(first, last, d);
      if (res.ec == std::errc::result_out_of_range) {
        // from_chars reports overflow without a value; mirror strtod
        d = std::strtod(std::string(first, last).c_str(), nullptr);
      } else if (res.ec != std::errc() || res.ptr != last) {
        throw MalformedLine(start, "invalid float");
      }
      return Value(d);
    }
    std::int64_t i = 0;
    auto res = std::from_chars(first, last, i);
    if (res.ec != std::errc() || res.ptr != last) throw MalformedLine(start, "integer out of range");
    return Value(i);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

// ----- message field helpers -----

const Value& require(const Value& obj, std::string_view key) {
  const Value* v = obj.find(key);
  if (v == nullptr) throw MalformedLine(0, "missing field '" + std::string(key) + "'");
  return *v;
}

std::string require_str(const Value& obj, std::string_view key) {
  const Value& v = require(obj, key);
  if (!v.is_str()) throw MalformedLine(0, "field '" + std::string(key) + "' must be a string");
  return v.as_str();
}

std::optional<std::string> optional_str(const Value& obj, std::string_view key) {
  const Value* v = obj.find(key);
  if (v == nullptr || v->is_null()) return std::nullopt;
  if (!v->is_str()) throw MalformedLine(0, "field '" + std::string(key) + "' must be a string");
  return v->as_str();
}

std::int64_t require_int(const Value& obj, std::string_view key) {
  const Value& v = require(obj, key);
  if (!v.is_int()) throw MalformedLine(0, "field '" + std::string(key) + "' must be an integer");
  return v.as_int();
}

void append_key(std::string& out, std::string_view key) {
  append_escaped_string(out, key);
  out.push_back(':');
}

void append_str_field(std::string& out, std::string_view key, std::string_view value, bool first = false) {
  if (!first) out.push_back(',');
  append_key(out, key);
  append_escaped_string(out, value);
}

void append_data_fields(std::string& out, const DataMessage& m) {
  out.push_back('{');
  append_str_field(out, "stream", m.stream, true);
  out += ",\"seq\":";
  append_int(out, static_cast<std::int64_t>(m.seq));
  out += ",\"t\":";
  append_float(out, m.t);
  append_str_field(out, "kind", to_string(m.kind));
  if (m.value) {
    out += ",\"value\":";
    append_value(out, *m.value);
  }
  if (m.count) {
    out += ",\"count\":";
    append_int(out, *m.count);
  }
}

DataKind data_kind_from_string(std::string_view s) {
  if (s == "item") return DataKind::Item;
  if (s == "error") return DataKind::Error;
  if (s == "closed") return DataKind::Closed;
  if (s == "dropped") return DataKind::Dropped;
  throw MalformedLine(0, "unknown data kind '" + std::string(s) + "'");
}

}  // namespace

std::string format_float(double d) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, d);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

void append_value(std::string& out, const Value& v) {
  switch (v.kind()) {
    case Value::Kind::Null: out += "null"; break;
    case Value::Kind::Bool: out += v.as_bool() ? "true" : "false"; break;
    case Value::Kind::Int: append_int(out, v.as_int()); break;
    case Value::Kind::Float: append_float(out, v.as_float()); break;
    case Value::Kind::Str: append_escaped_string(out, v.as_str()); break;
    case Value::Kind::List: {
      out.push_back('[');
      bool first = true;
      for (const auto& item : v.as_list()) {
        if (!first) out.push_back(',');
        first = false;
        append_value(out, item);
      }
      out.push_back(']');
      break;
    }
    case Value::Kind::Record: {
      out.push_back('{');
      bool first = true;
      for (const auto& [key, item] : v.as_record()) {
        if (!first) out.push_back(',');
        first = false;
        append_key(out, key);
        append_value(out, item);
      }
      out.push_back('}');
      break;
    }
  }
}

std::string encode_value(const Value& v) {
  std::string out;
  append_value(out, v);
  return out;
}

Value decode_value(std::string_view text) { return Parser(text).parse_document(); }

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ParseError: return "parse_error";
    case ErrorCode::UnknownEvent: return "unknown_event";
    case ErrorCode::UnknownObservable: return "unknown_observable";
    case ErrorCode::UnknownStream: return "unknown_stream";
    case ErrorCode::Readonly: return "readonly";
    case ErrorCode::Internal: return "internal";
  }
  return "internal";
}

std::optional<ErrorCode> error_code_from_string(std::string_view s) {
  for (auto code : {ErrorCode::ParseError, ErrorCode::UnknownEvent, ErrorCode::UnknownObservable,
                    ErrorCode::UnknownStream, ErrorCode::Readonly, ErrorCode::Internal}) {
    if (to_string(code) == s) return code;
  }
  return std::nullopt;
}

std::string_view to_string(DataKind kind) {
  switch (kind) {
    case DataKind::Item: return "item";
    case DataKind::Error: return "error";
    case DataKind::Closed: return "closed";
    case DataKind::Dropped: return "dropped";
  }
  return "item";
}

bool Subscribe::matches(std::string_view stream_id) const {
  if (wildcard) return true;
  for (const auto& s : streams) {
    if (s == stream_id) return true;
  }
  return false;
}

bool operator==(const DataMessage& a, const DataMessage& b) {
  return a.stream == b.stream && a.seq == b.seq && Value(a.t) == Value(b.t) && a.kind == b.kind &&
         a.value == b.value && a.count == b.count;
}

std::string encode(const Message& msg) {
  std::string out;
  std::visit(
      [&out](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Hello>) {
          out += "{\"type\":\"hello\",\"proto\":";
          append_int(out, m.proto);
          if (m.data_port) {
            out += ",\"data_port\":";
            append_int(out, *m.data_port);
          }
        } else if constexpr (std::is_same_v<T, CreateStream>) {
          out += "{\"type\":\"create_stream\"";
          append_str_field(out, "event", m.event);
          append_str_field(out, "query", m.query);
          if (m.stream_id) append_str_field(out, "stream_id", *m.stream_id);
        } else if constexpr (std::is_same_v<T, CloseStream>) {
          out += "{\"type\":\"close_stream\"";
          append_str_field(out, "stream_id", m.stream_id);
        } else if constexpr (std::is_same_v<T, ListEvents>) {
          out += "{\"type\":\"list_events\"";
        } else if constexpr (std::is_same_v<T, ListStreams>) {
          out += "{\"type\":\"list_streams\"";
        } else if constexpr (std::is_same_v<T, SetObservable>) {
          out += "{\"type\":\"set_observable\"";
          append_str_field(out, "name", m.name);
          out += ",\"value\":";
          append_value(out, m.value);
          if (m.at_event) append_str_field(out, "at_event", *m.at_event);
        } else if constexpr (std::is_same_v<T, Ok>) {
          out += "{\"type\":\"ok\"";
          for (const auto& [key, value] : m.fields) {
            if (key == "type") continue;
            out.push_back(',');
            append_key(out, key);
            append_value(out, value);
          }
        } else if constexpr (std::is_same_v<T, Error>) {
          out += "{\"type\":\"error\"";
          append_str_field(out, "code", to_string(m.code));
          append_str_field(out, "message", m.message);
        } else if constexpr (std::is_same_v<T, Subscribe>) {
          out += "{\"subscribe\":[";
          if (m.wildcard) {
            out += "\"*\"";
          } else {
            bool first = true;
            for (const auto& s : m.streams) {
              if (!first) out.push_back(',');
              first = false;
              append_escaped_string(out, s);
            }
          }
          out.push_back(']');
        } else if constexpr (std::is_same_v<T, DataMessage>) {
          append_data_fields(out, m);
        }
      },
      msg);
  out += "}\n";
  return out;
}

std::string encode_with(const DataMessage& msg, const Record& extra) {
  std::string out;
  append_data_fields(out, msg);
  for (const auto& [key, value] : extra) {
    out.push_back(',');
    append_key(out, key);
    append_value(out, value);
  }
  out += "}\n";
  return out;
}

Message decode(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  Value obj = decode_value(line);
  if (!obj.is_record()) throw MalformedLine(0, "message must be an object");

  if (const Value* type = obj.find("type")) {
    if (!type->is_str()) throw MalformedLine(0, "field 'type' must be a string");
    const std::string& t = type->as_str();
    if (t == "hello") {
      Hello h;
      h.proto = static_cast<int>(require_int(obj, "proto"));
      if (const Value* p = obj.find("data_port"); p && p->is_int()) {
        if (p->as_int() < 0 || p->as_int() > 65535) throw MalformedLine(0, "data_port out of range");
        h.data_port = static_cast<std::uint16_t>(p->as_int());
      }
      return h;
    }
    if (t == "create_stream") {
      return CreateStream{require_str(obj, "event"), require_str(obj, "query"), optional_str(obj, "stream_id")};
    }
    if (t == "close_stream") return CloseStream{require_str(obj, "stream_id")};
    if (t == "list_events") return ListEvents{};
    if (t == "list_streams") return ListStreams{};
    if (t == "set_observable") {
      return SetObservable{require_str(obj, "name"), require(obj, "value"), optional_str(obj, "at_event")};
    }
    if (t == "ok") {
      Ok ok;
      for (const auto& field : obj.as_record()) {
        if (field.first != "type") ok.fields.push_back(field);
      }
      return ok;
    }
    if (t == "error") {
      Error e;
      e.code = error_code_from_string(require_str(obj, "code")).value_or(ErrorCode::Internal);
      e.message = optional_str(obj, "message").value_or("");
      return e;
    }
    throw UnknownType(t);
  }

  if (const Value* sub = obj.find("subscribe")) {
    if (!sub->is_list()) throw MalformedLine(0, "field 'subscribe' must be a list");
    Subscribe s;
    for (const auto& item : sub->as_list()) {
      if (!item.is_str()) throw MalformedLine(0, "subscribe entries must be strings");
      if (item.as_str() == "*") {
        s.wildcard = true;
      } else {
        s.streams.push_back(item.as_str());
      }
    }
    if (s.wildcard) s.streams.clear();
    return s;
  }

  if (obj.find("stream") != nullptr) {
    DataMessage m;
    m.stream = require_str(obj, "stream");
    const std::int64_t seq = require_int(obj, "seq");
    if (seq < 0) throw MalformedLine(0, "seq must be non-negative");
    m.seq = static_cast<std::uint64_t>(seq);
    const Value& t = require(obj, "t");
    if (!t.is_numeric()) throw MalformedLine(0, "field 't' must be a number");
    m.t = t.to_double();
    m.kind = data_kind_from_string(require_str(obj, "kind"));
    if (const Value* v = obj.find("value")) m.value = *v;
    if (const Value* c = obj.find("count")) {
      if (!c->is_int()) throw MalformedLine(0, "field 'count' must be an integer");
      m.count = c->as_int();
    }
    return m;
  }

  throw MalformedLine(0, "unrecognized message");
}

void LineSplitter::feed(std::string_view chunk, const std::function<void(std::string_view)>& on_line) {
  buffer_.append(chunk);
  std::size_t start = 0;
  for (;;) {
    const std::size_t nl = buffer_.find('\n', start);
    if (nl == std::string::npos) break;
    std::string_view line(buffer_.data() + start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    on_line(line);
    start = nl + 1;
  }
  buffer_.erase(0, start);
  if (buffer_.size() > max_line_) {
    buffer_.clear();
    throw MalformedLine(max_line_, "line exceeds size limit");
  }
}

}  // namespace livewatch::wire
