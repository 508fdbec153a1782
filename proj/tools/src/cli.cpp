#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "livewatch/agent.hpp"
#include "livewatch/client.hpp"
#include "livewatch/gateway.hpp"
#include "livewatch/persistence.hpp"
#include "livewatch/query.hpp"
#include "livewatch/trainer.hpp"

namespace livewatch::cli {

std::atomic<bool>& interrupted() {
  static std::atomic<bool> flag{false};
  return flag;
}

OutputFormat parse_format(std::string_view text) {
  if (text == "lines") return OutputFormat::Lines;
  if (text == "csv") return OutputFormat::Csv;
  if (text == "table") return OutputFormat::Table;
  throw std::invalid_argument("unknown format '" + std::string(text) + "' (expected lines, csv or table)");
}

Value parse_value_arg(std::string_view text) {
  try {
    return wire::decode_value(text);
  } catch (const std::exception&) {
    return Value(std::string(text));
  }
}

namespace {

void flatten_into(const Value& v, const std::string& prefix, std::vector<std::pair<std::string, Value>>& out) {
  auto key = [&](const std::string& k) { return prefix.empty() ? k : prefix + "." + k; };
  if (v.is_record()) {
    for (const auto& [k, child] : v.as_record()) flatten_into(child, key(k), out);
  } else if (v.is_list()) {
    const auto& l = v.as_list();
    for (std::size_t i = 0; i < l.size(); ++i) flatten_into(l[i], key(std::to_string(i)), out);
  } else {
    out.emplace_back(prefix.empty() ? "value" : prefix, v);
  }
}

std::string csv_number(const Value& v) {
  if (v.is_int()) return std::to_string(v.as_int());
  const double d = v.as_float();
  if (std::isnan(d)) return "NaN";
  if (std::isinf(d)) return d > 0 ? "Inf" : "-Inf";
  return wire::format_float(d);
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string describe(const Value& v) { return v.is_str() ? v.as_str() : wire::encode_value(v); }

}  // namespace

std::vector<std::pair<std::string, Value>> flatten(const Value& v) {
  std::vector<std::pair<std::string, Value>> out;
  flatten_into(v, "", out);
  return out;
}

void Formatter::write(const wire::DataMessage& msg) {
  switch (msg.kind) {
    case wire::DataKind::Item: {
      const Value v = msg.value.value_or(Value());
      if (format_ == OutputFormat::Lines)
        out_ << wire::encode_value(v) << '\n';
      else if (format_ == OutputFormat::Csv)
        write_csv(v);
      else
        write_table(v);
      out_.flush();
      break;
    }
    case wire::DataKind::Error:
      err_ << "error seq=" << msg.seq << ": " << describe(msg.value.value_or(Value())) << '\n';
      break;
    case wire::DataKind::Dropped:
      err_ << "dropped " << msg.count.value_or(0) << " item(s) through seq=" << msg.seq << '\n';
      break;
    case wire::DataKind::Closed:
      break;
  }
}

void Formatter::write_csv(const Value& v) {
  auto leaves = flatten(v);
  if (!header_done_) {
    for (const auto& [k, leaf] : leaves) {
      if (leaf.is_numeric()) {
        columns_.push_back(k);
      } else if (!warned_non_numeric_) {
        err_ << "warning: csv drops non-numeric fields (first: " << k << ")\n";
        warned_non_numeric_ = true;
      }
    }
    for (std::size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << csv_cell(columns_[i]);
    out_ << '\n';
    header_done_ = true;
  }
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (i) out_ << ',';
    for (const auto& [k, leaf] : leaves) {
      if (k == columns_[i]) {
        if (leaf.is_numeric()) out_ << csv_number(leaf);
        break;
      }
    }
  }
  out_ << '\n';
  if (!warned_new_columns_) {
    for (const auto& [k, leaf] : leaves) {
      if (leaf.is_numeric() && std::find(columns_.begin(), columns_.end(), k) == columns_.end()) {
        err_ << "warning: csv ignores fields absent from the first row (first: " << k << ")\n";
        warned_new_columns_ = true;
        break;
      }
    }
  }
}

void Formatter::write_table(const Value& v) {
  constexpr std::size_t kMinWidth = 12;
  auto leaves = flatten(v);
  if (!header_done_) {
    for (const auto& [k, leaf] : leaves) columns_.push_back(k);
    std::string rule;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const auto w = std::max(kMinWidth, columns_[i].size());
      out_ << (i ? "  " : "") << std::left << std::setw(static_cast<int>(w)) << columns_[i];
      rule += (i ? "  " : "") + std::string(w, '-');
    }
    out_ << '\n' << rule << '\n';
    header_done_ = true;
  }
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    std::string cell;
    for (const auto& [k, leaf] : leaves) {
      if (k == columns_[i]) {
        cell = leaf.is_str() ? leaf.as_str() : wire::encode_value(leaf);
        break;
      }
    }
    const auto w = std::max(kMinWidth, columns_[i].size());
    out_ << (i ? "  " : "") << std::right << std::setw(static_cast<int>(w)) << cell;
  }
  out_ << std::left << '\n';
}

// ===========================================================================
// Subcommands
// ===========================================================================

namespace {

struct StreamArgs {
  std::string connect;
  std::string event;
  std::string query;
  std::string window;
  std::string format = "lines";
  std::string out;
};

// Rejections print the agent's error code first so scripts can grep it.
int rejected(std::ostream& err, std::string_view code, const std::string& message) {
  err << code << ": " << message << '\n';
  return kRejected;
}

int unreachable(std::ostream& err, const std::exception& e) {
  err << "unreachable: " << e.what() << '\n';
  return kUnreachable;
}

int stream_command(const StreamArgs& a, const std::string& record_path, std::ostream& out, std::ostream& err) {
  client::Address addr;
  OutputFormat format;
  std::optional<query::WindowMode> window;
  try {
    addr = client::Address::parse(a.connect);
    format = parse_format(a.format);
    if (!a.window.empty()) window = query::parse_window(a.window);
  } catch (const query::ParseError& e) {
    return rejected(err, "parse_error", e.what());
  } catch (const std::exception& e) {
    return rejected(err, "usage", e.what());
  }

  std::ofstream file_out;
  std::ostream* sink = &out;
  if (!a.out.empty()) {
    file_out.open(a.out, std::ios::binary | std::ios::trunc);
    if (!file_out) return rejected(err, "io_error", "cannot open " + a.out);
    sink = &file_out;
  }

  try {
    auto session = client::Session::open(addr);
    auto handle = session->create_stream(a.event, a.query, window);
    std::shared_ptr<persistence::Recorder> recorder;
    if (!record_path.empty()) recorder = persistence::record(*handle, record_path);

    Formatter fmt(format, *sink, err);
    bool lost = false;
    for (;;) {
      if (interrupted()) {
        try {
          session->close_stream(*handle);
        } catch (const std::exception&) {
        }
        return kInterrupted;
      }
      auto msg = handle->next(std::chrono::milliseconds(100));
      if (!msg) continue;
      if (msg->kind == wire::DataKind::Error && msg->value && msg->value->is_str() &&
          msg->value->as_str().rfind("disconnected: ", 0) == 0)
        lost = true;
      fmt.write(*msg);
      if (msg->kind == wire::DataKind::Closed) break;
    }
    if (recorder) {
      for (const auto& f : handle->sink_failures()) err << "recorder: " << f << '\n';
      recorder->close();
    }
    return lost ? kUnreachable : kOk;
  } catch (const client::AgentError& e) {
    return rejected(err, wire::to_string(e.code()), e.message());
  } catch (const persistence::IoError& e) {
    return rejected(err, "io_error", e.what());
  } catch (const client::ClientError& e) {
    return unreachable(err, e);
  }
}

struct ReplayArgs {
  std::string path;
  std::string speed = "max";
  std::string format = "lines";
  std::string out;
};

int replay_command(const ReplayArgs& a, std::ostream& out, std::ostream& err) {
  try {
    const auto speed = persistence::Speed::parse(a.speed);
    const auto format = parse_format(a.format);
    persistence::Replayer replayer(a.path, speed);
    replayer.set_sleeper([](std::chrono::steady_clock::time_point due) {
      while (!interrupted() && std::chrono::steady_clock::now() < due)
        std::this_thread::sleep_for(std::min<std::chrono::steady_clock::duration>(
            std::chrono::milliseconds(50), due - std::chrono::steady_clock::now()));
    });
    std::unique_ptr<persistence::Recorder> recorder;
    if (!a.out.empty()) recorder = std::make_unique<persistence::Recorder>(a.out, replayer.header());
    Formatter fmt(format, out, err);
    while (auto m = replayer.next()) {
      if (interrupted()) return kInterrupted;
      if (recorder) recorder->consume(*m);
      fmt.write(*m);
    }
    return interrupted() ? kInterrupted : kOk;
  } catch (const persistence::MalformedHeader& e) {
    return rejected(err, "malformed_header", e.what());
  } catch (const persistence::MalformedLine& e) {
    return rejected(err, "malformed_line", e.what());
  } catch (const persistence::IoError& e) {
    return rejected(err, "io_error", e.what());
  } catch (const std::invalid_argument& e) {
    return rejected(err, "usage", e.what());
  }
}

struct SetArgs {
  std::string connect;
  std::string name;
  std::string value;
  std::string at_event;
};

int set_command(const SetArgs& a, std::ostream& out, std::ostream& err) {
  client::Address addr;
  try {
    addr = client::Address::parse(a.connect);
  } catch (const std::exception& e) {
    return rejected(err, "usage", e.what());
  }
  try {
    auto session = client::Session::open(addr);
    std::optional<std::string> at;
    if (!a.at_event.empty()) at = a.at_event;
    session->set_observable(a.name, parse_value_arg(a.value), at);
    out << "ok\n";
    return kOk;
  } catch (const client::AgentError& e) {
    return rejected(err, wire::to_string(e.code()), e.message());
  } catch (const client::ClientError& e) {
    return unreachable(err, e);
  }
}

int events_command(const std::string& connect, std::ostream& out, std::ostream& err) {
  client::Address addr;
  try {
    addr = client::Address::parse(connect);
  } catch (const std::exception& e) {
    return rejected(err, "usage", e.what());
  }
  try {
    auto session = client::Session::open(addr);
    Value info(session->list_events());
    out << "events:\n";
    if (const Value* ev = info.find("events"); ev && ev->is_list())
      for (const auto& e : ev->as_list()) out << "  " << describe(e) << '\n';
    out << "observables:\n";
    if (const Value* obs = info.find("observables"); obs && obs->is_list()) {
      for (const auto& o : obs->as_list()) {
        const Value* name = o.find("name");
        const Value* writable = o.find("writable");
        out << "  " << (name ? describe(*name) : describe(o));
        if (writable && writable->is_bool() && writable->as_bool()) out << " (writable)";
        out << '\n';
      }
    }
    return kOk;
  } catch (const client::AgentError& e) {
    return rejected(err, wire::to_string(e.code()), e.message());
  } catch (const client::ClientError& e) {
    return unreachable(err, e);
  }
}

struct SimArgs {
  trainer::TrainerConfig config;
  std::string layers = "8,16,1";
  std::int64_t throttle_ms = 0;
  std::string bind = "127.0.0.1";
  std::uint16_t control_port = 0;
  std::uint16_t data_port = 0;
  std::size_t wait_streams = 0;
};

struct Interrupted {};

int sim_command(SimArgs a, std::ostream& out, std::ostream& err) {
  try {
    a.config.layer_sizes.clear();
    std::stringstream ss(a.layers);
    for (std::string part; std::getline(ss, part, ',');) {
      std::size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size()) throw std::invalid_argument("bad layer size '" + part + "'");
      a.config.layer_sizes.push_back(v);
    }
    a.config.throttle = std::chrono::milliseconds(a.throttle_ms);
    a.config.validate();
  } catch (const std::exception& e) {
    return rejected(err, "config_error", e.what());
  }

  std::unique_ptr<Agent> agent;
  try {
    AgentOptions opts;
    opts.bind_address = a.bind;
    opts.control_port = a.control_port;
    opts.data_port = a.data_port;
    agent = std::make_unique<Agent>(opts);
  } catch (const std::exception& e) {
    return rejected(err, "bind_error", e.what());
  }

  trainer::Trainer t(a.config, agent.get());
  out << "LIVEWATCH listening control=" << agent->control_port() << " data=" << agent->data_port() << std::endl;

  while (agent->active_streams() < a.wait_streams) {
    if (interrupted()) {
      agent->shutdown();
      return kInterrupted;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  t.on_batch = [](std::int64_t, std::int64_t) {
    if (interrupted()) throw Interrupted{};
  };
  try {
    auto summary = t.run();
    agent->shutdown();
    out << wire::encode_value(summary.to_value()) << std::endl;
    return kOk;
  } catch (const Interrupted&) {
    agent->shutdown();
    return kInterrupted;
  }
}

int gateway_command(const std::string& listen, const std::vector<std::string>& agents, std::ostream& out,
                    std::ostream& err) {
  gateway::GatewayOptions opts;
  try {
    auto addr = client::Address::parse(listen);
    opts.bind_address = addr.host;
    opts.port = addr.port;
    for (const auto& a : agents) opts.agents.push_back(client::Address::parse(a));
  } catch (const std::exception& e) {
    return rejected(err, "usage", e.what());
  }
  try {
    gateway::Gateway gw(opts);
    out << "LIVEWATCH gateway listening port=" << gw.port() << std::endl;
    while (!interrupted()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    gw.stop();
    return kInterrupted;
  } catch (const gateway::BindError& e) {
    return rejected(err, "bind_error", e.what());
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"livewatch: live introspection for long-running processes", "livewatch"};
  app.require_subcommand(1);

  StreamArgs watch_args;
  auto* watch = app.add_subcommand("watch", "Create a stream and print its items");
  auto add_stream_flags = [](CLI::App* cmd, StreamArgs& s) {
    cmd->add_option("--connect", s.connect, "Agent control address HOST:PORT")->required();
    cmd->add_option("--event", s.event, "Event name")->required();
    cmd->add_option("--query", s.query, "Map-reduce query")->required();
    cmd->add_option("--window", s.window, "group | count=N | seconds=T");
    cmd->add_option("--format", s.format, "lines | csv | table")->capture_default_str();
  };
  add_stream_flags(watch, watch_args);
  watch->add_option("--out", watch_args.out, "Write formatted items to PATH instead of stdout");

  StreamArgs record_args;
  std::string record_path;
  auto* record = app.add_subcommand("record", "Watch a stream and record it to a .twstream file");
  add_stream_flags(record, record_args);
  record->add_option("--out", record_path, "Stream file to write (truncated)")->required();

  ReplayArgs replay_args;
  auto* replay = app.add_subcommand("replay", "Print a recorded stream file");
  replay->add_option("path", replay_args.path, "Stream file")->required();
  replay->add_option("--speed", replay_args.speed, "Multiplier of recorded time, or max")->capture_default_str();
  replay->add_option("--format", replay_args.format, "lines | csv | table")->capture_default_str();
  replay->add_option("--out", replay_args.out, "Re-record the replayed items to PATH");

  SetArgs set_args;
  auto* set = app.add_subcommand("set", "Change a writable observable at the next matching event");
  set->add_option("--connect", set_args.connect, "Agent control address HOST:PORT")->required();
  set->add_option("--name", set_args.name, "Observable name")->required();
  set->add_option("--value", set_args.value, "New value (canonical encoding)")->required();
  set->add_option("--at-event", set_args.at_event, "Apply only at this event");

  std::string events_connect;
  auto* events = app.add_subcommand("events", "List an agent's events and observables");
  events->add_option("--connect", events_connect, "Agent control address HOST:PORT")->required();

  SimArgs sim_args;
  auto* sim = app.add_subcommand("sim", "Run a simulated host process");
  sim->require_subcommand(1);
  auto* sim_trainer = sim->add_subcommand("trainer", "Instrumented MLP training loop");
  auto& cfg = sim_args.config;
  sim_trainer->add_option("--seed", cfg.seed)->capture_default_str();
  sim_trainer->add_option("--epochs", cfg.epochs)->capture_default_str();
  sim_trainer->add_option("--batches", cfg.batches_per_epoch, "Batches per epoch")->capture_default_str();
  sim_trainer->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  sim_trainer->add_option("--layers", sim_args.layers, "Comma-separated layer sizes")->capture_default_str();
  sim_trainer->add_option("--lr", cfg.learning_rate, "Initial learning rate")->capture_default_str();
  sim_trainer->add_option("--init-scale", cfg.init_scale)->capture_default_str();
  sim_trainer->add_option("--target-scale", cfg.target_scale)->capture_default_str();
  sim_trainer->add_option("--noise", cfg.noise)->capture_default_str();
  sim_trainer->add_option("--throttle-ms", sim_args.throttle_ms, "Sleep after each batch")->capture_default_str();
  sim_trainer->add_option("--bind", sim_args.bind)->capture_default_str();
  sim_trainer->add_option("--control-port", sim_args.control_port)->capture_default_str();
  sim_trainer->add_option("--data-port", sim_args.data_port)->capture_default_str();
  sim_trainer->add_option("--wait-streams", sim_args.wait_streams, "Start training once N streams exist");

  std::string gw_listen = "127.0.0.1:8080";
  std::vector<std::string> gw_agents;
  auto* gw = app.add_subcommand("gateway", "Serve agents over HTTP and WebSocket");
  gw->add_option("--listen", gw_listen, "HOST:PORT to listen on")->capture_default_str();
  gw->add_option("--agent", gw_agents, "Agent control address (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kRejected;
  }

  if (*watch) return stream_command(watch_args, "", out, err);
  if (*record) return stream_command(record_args, record_path, out, err);
  if (*replay) return replay_command(replay_args, out, err);
  if (*set) return set_command(set_args, out, err);
  if (*events) return events_command(events_connect, out, err);
  if (*sim_trainer) return sim_command(sim_args, out, err);
  if (*gw) return gateway_command(gw_listen, gw_agents, out, err);
  return kRejected;
}

}  // namespace livewatch::cli
