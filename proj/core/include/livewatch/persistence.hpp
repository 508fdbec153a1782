#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "livewatch/client.hpp"
#include "livewatch/wire.hpp"

namespace livewatch::persistence {

inline constexpr std::string_view kFormat = "twstream";
inline constexpr int kFormatVersion = 1;
inline constexpr std::string_view kExtension = ".twstream";

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedHeader : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedLine : public std::runtime_error {
 public:
  MalformedLine(std::size_t line_no, const std::string& why)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + why), line_no_(line_no) {}
  /// 1-based; the header is line 1.
  std::size_t line_no() const noexcept { return line_no_; }

 private:
  std::size_t line_no_;
};

struct Header {
  std::string event;
  std::string query;
  std::int64_t created = 0;  // epoch seconds
  friend bool operator==(const Header&, const Header&) = default;
};

std::string encode_header(const Header& h);
/// Throws MalformedHeader.
Header decode_header(std::string_view line);

/// Sink that writes a stream file: header on construction, then one flushed
/// line per data message (closed markers included). Existing files are
/// truncated.
class Recorder final : public client::Sink {
 public:
  /// Throws IoError when the file cannot be created.
  Recorder(std::filesystem::path path, Header header);

  /// Throws IoError; as a sink that detaches the recorder.
  void consume(const wire::DataMessage& msg) override;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::size_t items_written() const;
  void close();

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::ofstream out_;
  std::size_t items_ = 0;
};

/// Creates a recorder for the handle's stream and attaches it.
std::shared_ptr<Recorder> record(client::StreamHandle& handle, const std::filesystem::path& path);

/// Replay pacing: a positive multiplier of recorded time, or as fast as possible.
struct Speed {
  std::optional<double> multiplier;  // empty means max

  static Speed max() { return {}; }
  static Speed times(double s);
  /// "max" or a positive number such as "2" or "0.5". Throws std::invalid_argument.
  static Speed parse(std::string_view text);
  bool is_max() const noexcept { return !multiplier; }
};

/// Reads a stream file item by item, pacing delivery by recorded t deltas.
///
/// Errors surface lazily: next() returns every valid item before the first
/// malformed line, then throws MalformedLine. An unterminated final line
/// that does not parse is treated as an interrupted write and ignored.
class Replayer {
 public:
  /// Reads and validates the header. Throws IoError or MalformedHeader.
  explicit Replayer(const std::filesystem::path& path, Speed speed = Speed::max());

  const Header& header() const noexcept { return header_; }

  /// Blocks until the item is due. Returns nullopt at end of file.
  std::optional<wire::DataMessage> next();

  /// Overrides the wait used for pacing (tests, cancellation).
  void set_sleeper(std::function<void(std::chrono::steady_clock::time_point)> sleeper) { sleeper_ = std::move(sleeper); }

 private:
  std::ifstream in_;
  Speed speed_;
  Header header_;
  std::size_t line_no_ = 1;
  std::optional<std::uint64_t> last_seq_;
  std::optional<double> first_t_;
  std::chrono::steady_clock::time_point start_;
  std::function<void(std::chrono::steady_clock::time_point)> sleeper_;
  bool done_ = false;
};

/// Replays a whole file into a callback. Throws as Replayer/next() does.
void replay(const std::filesystem::path& path, Speed speed, const std::function<void(const wire::DataMessage&)>& on_item);

/// Convenience: all items at max speed.
std::vector<wire::DataMessage> read_all(const std::filesystem::path& path);

}  // namespace livewatch::persistence
