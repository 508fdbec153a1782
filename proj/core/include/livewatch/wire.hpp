#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "livewatch/value.hpp"

namespace livewatch::wire {

inline constexpr int kProtocolVersion = 1;

// ---------------------------------------------------------------------------
// Value text encoding
//
// JSON object notation with three extensions needed for an exact round trip:
//   * Float always carries '.' or an exponent ("2.0"), Int never does.
//   * Non-finite floats are the bare strings "NaN", "Inf", "-Inf".
//   * A Str whose content is one of those three words is written with its
//     first character \u-escaped, so it stays a Str on decode.
// Object key order is preserved.
// ---------------------------------------------------------------------------

void append_value(std::string& out, const Value& v);
std::string encode_value(const Value& v);

/// Parses exactly one value (surrounding whitespace allowed).
Value decode_value(std::string_view text);

/// Shortest round-trip decimal for a finite double, always with '.' or 'e'.
std::string format_float(double d);

class MalformedLine : public std::runtime_error {
 public:
  MalformedLine(std::size_t offset, const std::string& what)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnknownType : public std::runtime_error {
 public:
  explicit UnknownType(std::string type)
      : std::runtime_error("unknown message type: " + type), type_(std::move(type)) {}
  const std::string& type() const noexcept { return type_; }

 private:
  std::string type_;
};

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// First line on both channels. The agent's control hello also carries the
/// data port so a client needs only one address.
struct Hello {
  int proto = kProtocolVersion;
  std::optional<std::uint16_t> data_port;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct CreateStream {
  std::string event;
  std::string query;
  std::optional<std::string> stream_id;
  friend bool operator==(const CreateStream&, const CreateStream&) = default;
};

struct CloseStream {
  std::string stream_id;
  friend bool operator==(const CloseStream&, const CloseStream&) = default;
};

struct ListEvents {
  friend bool operator==(const ListEvents&, const ListEvents&) = default;
};

struct ListStreams {
  friend bool operator==(const ListStreams&, const ListStreams&) = default;
};

struct SetObservable {
  std::string name;
  Value value;
  std::optional<std::string> at_event;
  friend bool operator==(const SetObservable&, const SetObservable&) = default;
};

/// Success response. Payload fields sit next to "type" on the wire.
struct Ok {
  Record fields;
  friend bool operator==(const Ok&, const Ok&) = default;
};

enum class ErrorCode { ParseError, UnknownEvent, UnknownObservable, UnknownStream, Readonly, Internal };

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> error_code_from_string(std::string_view s);

struct Error {
  ErrorCode code = ErrorCode::Internal;
  std::string message;
  friend bool operator==(const Error&, const Error&) = default;
};

/// First line a client sends on a data connection. An empty list with
/// wildcard=true is written as ["*"].
struct Subscribe {
  std::vector<std::string> streams;
  bool wildcard = false;

  bool matches(std::string_view stream_id) const;
  friend bool operator==(const Subscribe&, const Subscribe&) = default;
};

enum class DataKind { Item, Error, Closed, Dropped };

std::string_view to_string(DataKind kind);

struct DataMessage {
  std::string stream;
  std::uint64_t seq = 0;
  double t = 0.0;
  DataKind kind = DataKind::Item;
  std::optional<Value> value;
  std::optional<std::int64_t> count;

  friend bool operator==(const DataMessage& a, const DataMessage& b);
};

using Message = std::variant<Hello, CreateStream, CloseStream, ListEvents, ListStreams, SetObservable,
                             Ok, Error, Subscribe, DataMessage>;

/// One line of canonical text terminated by '\n'.
std::string encode(const Message& msg);

/// Same as encode() for a data message, with extra fields appended before the
/// closing brace (used by the gateway to tag agent_id / gstream_id).
std::string encode_with(const DataMessage& msg, const Record& extra);

/// Decodes one line; a trailing "\n" or "\r\n" is tolerated. Unknown fields are
/// ignored. Throws MalformedLine or UnknownType.
Message decode(std::string_view line);

/// Splits an arbitrarily chunked byte stream into complete lines.
class LineSplitter {
 public:
  explicit LineSplitter(std::size_t max_line = 16u << 20) : max_line_(max_line) {}

  /// Invokes on_line for every line completed by this chunk (without '\n').
  /// Throws MalformedLine if a line exceeds the size limit.
  void feed(std::string_view chunk, const std::function<void(std::string_view)>& on_line);

  std::string_view pending() const noexcept { return buffer_; }

 private:
  std::string buffer_;
  std::size_t max_line_;
};

}  // namespace livewatch::wire
