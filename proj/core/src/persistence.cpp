#include "livewatch/persistence.hpp"

#include <cmath>
#include <thread>

namespace livewatch::persistence {

std::string encode_header(const Header& h) {
  Value v(Record{{"format", Value(std::string(kFormat))},
                 {"version", Value(kFormatVersion)},
                 {"event", Value(h.event)},
                 {"query", Value(h.query)},
                 {"created", Value(h.created)}});
  std::string out = wire::encode_value(v);
  out += '\n';
  return out;
}

Header decode_header(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  Value v;
  try {
    v = wire::decode_value(line);
  } catch (const std::exception& e) {
    throw MalformedHeader(std::string("unreadable header: ") + e.what());
  }
  if (!v.is_record()) throw MalformedHeader("header is not an object");
  auto str_field = [&](const char* key) -> std::string {
    const Value* f = v.find(key);
    if (!f || !f->is_str()) throw MalformedHeader(std::string("header field '") + key + "' missing or not a string");
    return f->as_str();
  };
  if (str_field("format") != kFormat) throw MalformedHeader("not a " + std::string(kFormat) + " file");
  const Value* version = v.find("version");
  if (!version || !version->is_int()) throw MalformedHeader("header field 'version' missing or not an integer");
  if (version->as_int() != kFormatVersion)
    throw MalformedHeader("unsupported version " + std::to_string(version->as_int()));
  Header h;
  h.event = str_field("event");
  h.query = str_field("query");
  const Value* created = v.find("created");
  if (!created || !created->is_numeric()) throw MalformedHeader("header field 'created' missing or not a number");
  h.created = created->is_int() ? created->as_int() : static_cast<std::int64_t>(created->as_float());
  return h;
}

// ---------------------------------------------------------------------------
// Recorder
// ---------------------------------------------------------------------------

Recorder::Recorder(std::filesystem::path path, Header header) : path_(std::move(path)) {
  out_.open(path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open " + path_.string() + " for writing");
  out_ << encode_header(header);
  out_.flush();
  if (!out_) throw IoError("cannot write header to " + path_.string());
}

void Recorder::consume(const wire::DataMessage& msg) {
  std::lock_guard lk(mu_);
  if (!out_.is_open()) throw IoError("recorder for " + path_.string() + " is closed");
  out_ << wire::encode(msg);
  out_.flush();
  if (!out_) throw IoError("write failed on " + path_.string());
  ++items_;
}

std::size_t Recorder::items_written() const {
  std::lock_guard lk(mu_);
  return items_;
}

void Recorder::close() {
  std::lock_guard lk(mu_);
  if (out_.is_open()) out_.close();
}

std::shared_ptr<Recorder> record(client::StreamHandle& handle, const std::filesystem::path& path) {
  auto now = std::chrono::system_clock::now().time_since_epoch();
  Header h{handle.event_name(), handle.query(), std::chrono::duration_cast<std::chrono::seconds>(now).count()};
  auto rec = std::make_shared<Recorder>(path, std::move(h));
  handle.attach(rec);
  return rec;
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

Speed Speed::times(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("speed must be a positive number");
  return Speed{s};
}

Speed Speed::parse(std::string_view text) {
  if (text == "max") return max();
  std::string s(text);
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("speed must be 'max' or a positive number, got '" + s + "'");
  }
  if (used != s.size()) throw std::invalid_argument("speed must be 'max' or a positive number, got '" + s + "'");
  return times(d);
}

Replayer::Replayer(const std::filesystem::path& path, Speed speed) : in_(path, std::ios::binary), speed_(speed) {
  if (!in_) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in_, line)) throw MalformedHeader("empty file");
  if (in_.eof()) throw MalformedHeader("header line is not terminated");
  header_ = decode_header(line);
  sleeper_ = [](std::chrono::steady_clock::time_point until) { std::this_thread::sleep_until(until); };
}

std::optional<wire::DataMessage> Replayer::next() {
  if (done_) return std::nullopt;
  std::string line;
  if (!std::getline(in_, line)) {
    done_ = true;
    return std::nullopt;
  }
  ++line_no_;
  const bool terminated = !in_.eof();
  if (!terminated && line.empty()) {
    done_ = true;
    return std::nullopt;
  }
  wire::DataMessage msg;
  try {
    auto decoded = wire::decode(line);
    auto* dm = std::get_if<wire::DataMessage>(&decoded);
    if (!dm) throw std::runtime_error("not a data message");
    msg = std::move(*dm);
  } catch (const std::exception& e) {
    done_ = true;
    if (!terminated) return std::nullopt;  // torn final write
    throw MalformedLine(line_no_, e.what());
  }
  if (last_seq_ && msg.seq <= *last_seq_) {
    done_ = true;
    throw MalformedLine(line_no_, "seq " + std::to_string(msg.seq) + " does not increase");
  }
  last_seq_ = msg.seq;

  if (speed_.multiplier) {
    if (!first_t_) {
      first_t_ = msg.t;
      start_ = std::chrono::steady_clock::now();
    } else {
      double offset = (msg.t - *first_t_) / *speed_.multiplier;
      if (offset > 0.0 && std::isfinite(offset)) {
        auto due = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(offset));
        sleeper_(due);
      }
    }
  }
  return msg;
}

void replay(const std::filesystem::path& path, Speed speed, const std::function<void(const wire::DataMessage&)>& on_item) {
  Replayer r(path, speed);
  while (auto m = r.next()) on_item(*m);
}

std::vector<wire::DataMessage> read_all(const std::filesystem::path& path) {
  std::vector<wire::DataMessage> out;
  replay(path, Speed::max(), [&](const wire::DataMessage& m) { out.push_back(m); });
  return out;
}

}  // namespace livewatch::persistence
