#pragma once

#include <atomic>
#include <cstddef>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "livewatch/value.hpp"
#include "livewatch/wire.hpp"

namespace livewatch::cli {

enum ExitCode : int { kOk = 0, kRejected = 2, kUnreachable = 3, kInterrupted = 130 };

enum class OutputFormat { Lines, Csv, Table };

/// "lines", "csv" or "table". Throws std::invalid_argument.
OutputFormat parse_format(std::string_view text);

/// Canonical-encoding value, falling back to a plain string when the text
/// does not parse (so `--value hello` works without quotes).
Value parse_value_arg(std::string_view text);

/// Leaves of a value keyed by dotted path ("a.b", "grads.0"); a scalar at
/// the root is keyed "value".
std::vector<std::pair<std::string, Value>> flatten(const Value& v);

/// Renders stream items in one output format. Items go to `out`; error,
/// dropped and warning notices go to `err`.
class Formatter {
 public:
  Formatter(OutputFormat format, std::ostream& out, std::ostream& err) : format_(format), out_(out), err_(err) {}

  void write(const wire::DataMessage& msg);

 private:
  void write_csv(const Value& v);
  void write_table(const Value& v);

  OutputFormat format_;
  std::ostream& out_;
  std::ostream& err_;
  std::vector<std::string> columns_;
  bool header_done_ = false;
  bool warned_non_numeric_ = false;
  bool warned_new_columns_ = false;
};

/// Set by the SIGINT handler installed in main(); polled by long-running
/// subcommands.
std::atomic<bool>& interrupted();

/// Parses argv and runs one subcommand. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace livewatch::cli
