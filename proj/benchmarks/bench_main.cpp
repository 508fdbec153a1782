#include <benchmark/benchmark.h>

#include <random>

#include "livewatch/agent.hpp"
#include "livewatch/query.hpp"
#include "livewatch/stream.hpp"
#include "livewatch/wire.hpp"

using namespace livewatch;

namespace {

// notify() with 10k registered observables and no streams.
void BM_IdleNotify(benchmark::State& state) {
  AgentOptions opts;
  opts.listen = false;
  Agent agent(opts);
  for (int i = 0; i < 10'000; ++i) agent.register_observable("o" + std::to_string(i), [] { return Value(0); });
  agent.declare_event("batch");
  for (auto _ : state) agent.notify("batch");
}
BENCHMARK(BM_IdleNotify);

// notify() with one map stream pulling a single observable.
void BM_NotifyOneStream(benchmark::State& state) {
  AgentOptions opts;
  opts.listen = false;
  Agent agent(opts);
  double loss = 0.5;
  agent.register_observable("loss", [&] { return Value(loss); });
  agent.declare_event("batch");
  auto q = agent.subscribe(wire::Subscribe{{}, true});
  agent.handle_control(wire::CreateStream{"batch", "map(b -> b.loss * 2)", std::nullopt});
  for (auto _ : state) {
    agent.notify("batch");
    benchmark::DoNotOptimize(q->try_pop());
  }
}
BENCHMARK(BM_NotifyOneStream);

void BM_ParseQuery(benchmark::State& state) {
  const std::string text = "where(b -> b.batch % 10 == 0) | map(b -> b.loss * lr + abs(b.grad)) | reduce(avg, v -> v) | window(count=10)";
  for (auto _ : state) benchmark::DoNotOptimize(query::parse(text));
}
BENCHMARK(BM_ParseQuery);

void BM_PostReduce(benchmark::State& state) {
  StreamProcessor p(query::parse("reduce(avg, b -> b.x) | window(count=100)"));
  std::uint64_t seq = 0;
  const Value rec(Record{{"x", Value(1.5)}});
  for (auto _ : state) benchmark::DoNotOptimize(p.post(StreamItem{rec, false, ++seq, 0.0}));
}
BENCHMARK(BM_PostReduce);

wire::DataMessage sample_message() {
  List grads;
  for (int i = 0; i < 8; ++i) grads.emplace_back(0.001 * i);
  return wire::DataMessage{"c1234abcd-s1", 42, 1700000000.25, wire::DataKind::Item,
                           Value(Record{{"loss", Value(0.125)}, {"epoch", Value(3)}, {"grads", Value(std::move(grads))}}),
                           std::nullopt};
}

void BM_EncodeData(benchmark::State& state) {
  const wire::Message m = sample_message();
  for (auto _ : state) benchmark::DoNotOptimize(wire::encode(m));
}
BENCHMARK(BM_EncodeData);

void BM_DecodeData(benchmark::State& state) {
  const std::string line = wire::encode(sample_message());
  for (auto _ : state) benchmark::DoNotOptimize(wire::decode(line));
}
BENCHMARK(BM_DecodeData);

}  // namespace

BENCHMARK_MAIN();
