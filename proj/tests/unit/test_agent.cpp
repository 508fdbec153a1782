#include <gtest/gtest.h>

#include <random>

#include "livewatch/agent.hpp"
#include "livewatch/wire.hpp"

using namespace livewatch;
using wire::DataKind;

namespace {

AgentOptions in_process() {
  AgentOptions o;
  o.listen = false;
  return o;
}

std::string create(Agent& a, const std::string& event, const std::string& query) {
  auto resp = a.handle_control(wire::CreateStream{event, query, std::nullopt});
  const auto* ok = std::get_if<wire::Ok>(&resp);
  if (!ok) throw std::runtime_error("create failed: " + std::get<wire::Error>(resp).message);
  return Value(ok->fields).find("stream_id")->as_str();
}

wire::ErrorCode error_of(const wire::Message& m) { return std::get<wire::Error>(m).code; }

std::vector<wire::DataMessage> drain(DeliveryQueue& q) {
  std::vector<wire::DataMessage> out;
  while (auto m = q.try_pop()) out.push_back(std::move(*m));
  return out;
}

}  // namespace

TEST(Agent, DuplicateRegistrationThrows) {
  Agent a(in_process());
  a.register_observable("x", [] { return Value(1); });
  EXPECT_THROW(a.register_observable("x", [] { return Value(2); }), DuplicateName);
}

TEST(Agent, GettersAreNotCalledWithoutStreams) {
  Agent a(in_process());
  a.register_observable("loss", [] { return Value(0.5); });
  for (int i = 0; i < 100; ++i) a.notify("batch");
  EXPECT_EQ(a.total_pulls(), 0u);
}

TEST(Agent, PullsOnlyWhatStreamsNeed) {
  Agent a(in_process());
  int x = 0;
  a.register_observable("loss", [&] { return Value(static_cast<double>(++x)); });
  a.register_observable("other", [] { return Value(1); });
  a.declare_event("batch");
  auto q = a.subscribe(wire::Subscribe{{}, true});
  create(a, "batch", "map(b -> b.loss)");
  for (int i = 0; i < 5; ++i) a.notify("batch");
  EXPECT_EQ(a.pull_count("loss"), 5u);
  EXPECT_EQ(a.pull_count("other"), 0u);
  auto msgs = drain(*q);
  ASSERT_EQ(msgs.size(), 5u);
  for (std::size_t i = 0; i < msgs.size(); ++i) {
    EXPECT_EQ(msgs[i].kind, DataKind::Item);
    EXPECT_EQ(*msgs[i].value, Value(static_cast<double>(i + 1)));
    if (i > 0) {
      EXPECT_GT(msgs[i].seq, msgs[i - 1].seq);
    }
  }
}

TEST(Agent, OtherEventsDoNotPull) {
  Agent a(in_process());
  a.register_observable("loss", [] { return Value(0.5); });
  a.declare_event("batch");
  a.declare_event("epoch");
  create(a, "epoch", "map(b -> b.loss)");
  for (int i = 0; i < 10; ++i) a.notify("batch");
  EXPECT_EQ(a.total_pulls(), 0u);
  a.notify("epoch");
  EXPECT_EQ(a.total_pulls(), 1u);
}

TEST(Agent, CreateStreamErrors) {
  Agent a(in_process());
  a.register_observable("loss", [] { return Value(0.5); });
  a.declare_event("batch");
  EXPECT_EQ(error_of(a.handle_control(wire::CreateStream{"nope", "map(b -> b.loss)", {}})), wire::ErrorCode::UnknownEvent);
  EXPECT_EQ(error_of(a.handle_control(wire::CreateStream{"batch", "map(b -> ", {}})), wire::ErrorCode::ParseError);
  EXPECT_EQ(error_of(a.handle_control(wire::CreateStream{"batch", "reduce(hist[0], b -> b)", {}})),
            wire::ErrorCode::ParseError);
  EXPECT_EQ(error_of(a.handle_control(wire::CreateStream{"batch", "map(b -> lr)", {}})),
            wire::ErrorCode::UnknownObservable);
  EXPECT_EQ(error_of(a.handle_control(wire::CloseStream{"zz"})), wire::ErrorCode::UnknownStream);
  create(a, "batch", "map(b -> b.loss)");
  EXPECT_EQ(a.active_streams(), 1u);
}

TEST(Agent, ExplicitStreamIdsMustBeUnique) {
  Agent a(in_process());
  a.declare_event("e");
  EXPECT_TRUE(std::holds_alternative<wire::Ok>(a.handle_control(wire::CreateStream{"e", "reduce(count)", "mine"})));
  EXPECT_TRUE(std::holds_alternative<wire::Error>(a.handle_control(wire::CreateStream{"e", "reduce(count)", "mine"})));
}

TEST(Agent, ListEventsAndStreams) {
  Agent a(in_process());
  a.register_observable("loss", [] { return Value(0.5); });
  a.register_observable("lr", [] { return Value(0.1); }, [](const Value&) {});
  a.declare_event("batch");
  a.notify("epoch");
  const auto resp = std::get<wire::Ok>(a.handle_control(wire::ListEvents{}));
  const Value fields(resp.fields);
  EXPECT_EQ(*fields.find("events"), Value::list({"batch", "epoch"}));
  EXPECT_EQ(*fields.find("observables"),
            Value::list({Value::record({{"name", "loss"}, {"writable", false}}),
                         Value::record({{"name", "lr"}, {"writable", true}})}));
  const std::string id = create(a, "batch", "reduce(count) | window(count=2)");
  const Value streams(std::get<wire::Ok>(a.handle_control(wire::ListStreams{})).fields);
  ASSERT_EQ(streams.find("streams")->as_list().size(), 1u);
  const Value& s = streams.find("streams")->as_list()[0];
  EXPECT_EQ(*s.find("stream_id"), Value(id));
  EXPECT_EQ(*s.find("window"), Value("count=2"));
}

TEST(Agent, SetObservableIsDeferredToNextEvent) {
  Agent a(in_process());
  double lr = 0.1;
  a.register_observable("lr", [&] { return Value(lr); }, [&](const Value& v) { lr = v.to_double(); });
  a.register_observable("loss", [] { return Value(1.0); });
  a.declare_event("batch");
  a.declare_event("epoch");
  EXPECT_EQ(error_of(a.handle_control(wire::SetObservable{"loss", Value(2.0), {}})), wire::ErrorCode::Readonly);
  EXPECT_EQ(error_of(a.handle_control(wire::SetObservable{"nope", Value(2.0), {}})),
            wire::ErrorCode::UnknownObservable);

  ASSERT_TRUE(std::holds_alternative<wire::Ok>(a.handle_control(wire::SetObservable{"lr", Value(0.5), {}})));
  EXPECT_EQ(lr, 0.1);
  a.notify("batch");
  EXPECT_EQ(lr, 0.5);

  a.handle_control(wire::SetObservable{"lr", Value(0.7), std::string("epoch")});
  a.notify("batch");
  EXPECT_EQ(lr, 0.5);
  a.notify("epoch");
  EXPECT_EQ(lr, 0.7);
}

TEST(Agent, SetterFailureIsContained) {
  Agent a(in_process());
  a.register_observable("x", [] { return Value(0); }, [](const Value&) { throw std::runtime_error("no"); });
  a.handle_control(wire::SetObservable{"x", Value(1), {}});
  EXPECT_NO_THROW(a.notify("e"));
}

TEST(Agent, GetterFailureSurfacesAsStreamError) {
  Agent a(in_process());
  a.register_observable("x", []() -> Value { throw std::runtime_error("boom"); });
  a.declare_event("e");
  auto q = a.subscribe(wire::Subscribe{{}, true});
  create(a, "e", "map(b -> b.x)");
  a.notify("e");
  auto msgs = drain(*q);
  ASSERT_EQ(msgs.size(), 1u);
  EXPECT_EQ(msgs[0].kind, DataKind::Error);
}

TEST(Agent, CloseFlushesAndMarksClosed) {
  Agent a(in_process());
  int v = 0;
  a.register_observable("v", [&] { return Value(++v); });
  a.declare_event("e");
  const std::string id = create(a, "e", "reduce(sum, b -> b.v) | window(count=10)");
  auto q = a.subscribe(wire::Subscribe{{id}, false});
  a.notify("e");
  a.notify("e");
  ASSERT_TRUE(std::holds_alternative<wire::Ok>(a.handle_control(wire::CloseStream{id})));
  auto msgs = drain(*q);
  ASSERT_EQ(msgs.size(), 2u);
  EXPECT_EQ(*msgs[0].value, Value(3));
  EXPECT_EQ(msgs[1].kind, DataKind::Closed);
  EXPECT_GT(msgs[1].seq, msgs[0].seq);
  EXPECT_TRUE(q->closed());
  EXPECT_EQ(a.active_streams(), 0u);
}

TEST(Agent, SubscriptionFilterIsolatesStreams) {
  Agent a(in_process());
  int n = 0;
  a.register_observable("n", [&] { return Value(n); });
  a.declare_event("e");
  const std::string s1 = create(a, "e", "map(b -> b.n)");
  const std::string s2 = create(a, "e", "map(b -> b.n * 10)");
  auto q1 = a.subscribe(wire::Subscribe{{s1}, false});
  auto q2 = a.subscribe(wire::Subscribe{{s2}, false});
  for (n = 0; n < 50; ++n) a.notify("e");
  auto m1 = drain(*q1);
  auto m2 = drain(*q2);
  ASSERT_EQ(m1.size(), 50u);
  ASSERT_EQ(m2.size(), 50u);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(m1[i].stream, s1);
    EXPECT_EQ(*m1[i].value, Value(i));
    EXPECT_EQ(m2[i].stream, s2);
    EXPECT_EQ(*m2[i].value, Value(i * 10));
  }
}

TEST(Agent, ShutdownClosesStreams) {
  Agent a(in_process());
  a.declare_event("e");
  const std::string id = create(a, "e", "reduce(count) | window(count=5)");
  auto q = a.subscribe(wire::Subscribe{{}, true});
  a.notify("e");
  a.shutdown();
  auto msgs = drain(*q);
  ASSERT_EQ(msgs.size(), 2u);
  EXPECT_EQ(*msgs[0].value, Value(1));
  EXPECT_EQ(msgs[1].kind, DataKind::Closed);
  EXPECT_NO_THROW(a.shutdown());
  EXPECT_TRUE(std::holds_alternative<wire::Error>(a.handle_control(wire::ListEvents{})));
}

// Random sequences of control requests and events keep the agent's per-stream
// seq strictly increasing and never pull observables nobody asked for.
TEST(AgentProperty, RandomInterleavingKeepsInvariants) {
  std::mt19937_64 rng(51);
  Agent a(in_process());
  for (int i = 0; i < 5; ++i) {
    a.register_observable("o" + std::to_string(i), [i] { return Value(i); });
  }
  a.declare_event("e");
  auto q = a.subscribe(wire::Subscribe{{}, true});
  std::vector<std::string> open;
  std::map<std::string, std::uint64_t> last;
  std::map<std::string, bool> seen_closed;
  for (int step = 0; step < 2000; ++step) {
    const auto r = rng() % 10;
    if (r == 0 && open.size() < 6) {
      const int k = static_cast<int>(rng() % 5);
      open.push_back(create(a, "e", "map(b -> b.o" + std::to_string(k) + ")"));
    } else if (r == 1 && !open.empty()) {
      const std::size_t k = rng() % open.size();
      a.handle_control(wire::CloseStream{open[k]});
      open.erase(open.begin() + static_cast<long>(k));
    } else {
      const std::uint64_t before = a.total_pulls();
      a.notify("e");
      if (open.empty()) {
        EXPECT_EQ(a.total_pulls(), before);
      }
    }
    while (auto m = q->try_pop()) {
      EXPECT_FALSE(seen_closed[m->stream]) << "message after closed";
      if (last.count(m->stream)) {
        EXPECT_GT(m->seq, last[m->stream]);
      }
      last[m->stream] = m->seq;
      if (m->kind == DataKind::Closed) seen_closed[m->stream] = true;
    }
  }
}
