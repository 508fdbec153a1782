#include <gtest/gtest.h>

#include <random>

#include "livewatch/query.hpp"
#include "livewatch/stream.hpp"
#include "oracles.hpp"

using namespace livewatch;

namespace {

StreamItem item(Value v, bool b = false, double t = 0.0) {
  static std::uint64_t seq = 0;
  return StreamItem{Value::record({{"x", std::move(v)}}), b, ++seq, t};
}

std::string window_text(oracle::Mode mode, std::int64_t n, double seconds) {
  switch (mode) {
    case oracle::Mode::Group: return "window(group)";
    case oracle::Mode::Count: return "window(count=" + std::to_string(n) + ")";
    case oracle::Mode::Time: return "window(seconds=" + oracle::float_text(seconds) + ")";
  }
  return {};
}

}  // namespace

TEST(Stream, MapOnlyEmitsPerItem) {
  StreamProcessor p(query::parse("map(b -> b.x * 2)"));
  auto out = p.post(item(3));
  ASSERT_TRUE(out.is_emit());
  EXPECT_EQ(out.value, Value(6));
}

TEST(Stream, WhereFilters) {
  StreamProcessor p(query::parse("where(b -> b.x > 0) | map(b -> b.x)"));
  EXPECT_TRUE(p.post(item(-1)).is_silent());
  EXPECT_EQ(p.post(item(5)).value, Value(5));
}

TEST(Stream, GroupClosesOnFilteredItem) {
  StreamProcessor p(query::parse("where(b -> b.x > 0) | reduce(sum, b -> b.x)"));
  EXPECT_TRUE(p.post(item(2)).is_silent());
  EXPECT_TRUE(p.post(item(3)).is_silent());
  auto out = p.post(item(-7, true));
  ASSERT_TRUE(out.is_emit());
  EXPECT_EQ(out.value, Value(5));
  // Empty group never emits.
  EXPECT_TRUE(p.post(item(-1, true)).is_silent());
}

TEST(Stream, CountWindow) {
  StreamProcessor p(query::parse("reduce(avg, b -> b.x) | window(count=3)"));
  EXPECT_TRUE(p.post(item(1)).is_silent());
  EXPECT_TRUE(p.post(item(2)).is_silent());
  auto out = p.post(item(6));
  ASSERT_TRUE(out.is_emit());
  EXPECT_EQ(out.value, Value(3.0));
  EXPECT_EQ(p.pending(), 0);
}

TEST(Stream, TimeWindowClosesBeforeFolding) {
  StreamProcessor p(query::parse("reduce(count) | window(seconds=1.0)"));
  EXPECT_TRUE(p.post(item(0, false, 10.0)).is_silent());
  EXPECT_TRUE(p.post(item(0, false, 10.5)).is_silent());
  auto out = p.post(item(0, false, 11.0));
  ASSERT_TRUE(out.is_emit());
  EXPECT_EQ(out.value, Value(2));
  EXPECT_EQ(p.pending(), 1);
  auto flushed = p.flush();
  ASSERT_TRUE(flushed.is_emit());
  EXPECT_EQ(flushed.value, Value(1));
}

TEST(Stream, FlushDropsOpenGroup) {
  StreamProcessor p(query::parse("reduce(sum, b -> b.x)"));
  p.post(item(1));
  EXPECT_TRUE(p.flush().is_silent());
}

TEST(Stream, ErrorsDoNotTouchState) {
  StreamProcessor p(query::parse("reduce(sum, b -> 10 / b.x) | window(count=2)"));
  EXPECT_TRUE(p.post(item(2)).is_silent());
  auto bad = p.post(item(0));
  ASSERT_TRUE(bad.is_error());
  EXPECT_FALSE(bad.error.empty());
  EXPECT_EQ(p.pending(), 1);
  auto out = p.post(item(5));
  ASSERT_TRUE(out.is_emit());
  EXPECT_EQ(out.value, Value(7.0));
}

TEST(Stream, NonNumericFoldIsAnError) {
  StreamProcessor p(query::parse("reduce(sum, b -> b.x)"));
  EXPECT_TRUE(p.post(item(1)).is_silent());
  EXPECT_TRUE(p.post(item("a")).is_error());
  EXPECT_EQ(p.post(item(2, true)).value, Value(3));
}

TEST(Stream, LastAcceptsAnyValue) {
  StreamProcessor p(query::parse("reduce(last, b -> b.x)"));
  p.post(item(1));
  EXPECT_EQ(p.post(item("z", true)).value, Value("z"));
}

TEST(Histogram, EdgesAndCounts) {
  const Value h = make_histogram({0.0, 1.0, 2.0, 3.0, 4.0}, 4);
  EXPECT_EQ(h, Value::record({{"edges", Value::list({0.0, 1.0, 2.0, 3.0, 4.0})},
                              {"counts", Value::list({1, 1, 1, 2})}}));
  const Value d = make_histogram({2.0, 2.0}, 3);
  EXPECT_EQ(d, Value::record({{"edges", Value::list({2.0, 3.0})}, {"counts", Value::list({2})}}));
}

// Every aggregator in every window mode matches a brute-force split-then-fold
// reference on random sequences.
TEST(StreamProperty, MatchesBruteForceOracle) {
  std::mt19937_64 rng(31);
  for (int round = 0; round < 300; ++round) {
    const auto items = oracle::random_items(rng, 60);
    for (oracle::Agg agg : oracle::kAllAggs) {
      for (oracle::Mode mode : {oracle::Mode::Group, oracle::Mode::Count, oracle::Mode::Time}) {
        const std::int64_t n = oracle::uniform_int(rng, 1, 7);
        const double seconds = 0.25 + oracle::unit(rng) * 2.0;
        const std::int64_t bins = oracle::uniform_int(rng, 1, 5);
        std::string text = "reduce(" + std::string(oracle::agg_text(agg));
        if (agg == oracle::Agg::Hist) text += "[" + std::to_string(bins) + "]";
        if (agg != oracle::Agg::Count) text += ", b -> b.x";
        text += ") | " + window_text(mode, n, seconds);
        StreamProcessor p(query::parse(text));
        std::vector<oracle::Emission> got;
        for (std::size_t i = 0; i < items.size(); ++i) {
          auto out = p.post(StreamItem{Value::record({{"x", items[i].value}}), items[i].b, i + 1, items[i].t});
          ASSERT_FALSE(out.is_error()) << text << ": " << out.error;
          if (out.is_emit()) got.push_back({i, out.value});
        }
        const auto want = oracle::windowed_reduce(items, agg, bins, mode, n, seconds);
        ASSERT_EQ(got.size(), want.size()) << text;
        for (std::size_t k = 0; k < got.size(); ++k) {
          ASSERT_EQ(got[k].at, want[k].at) << text;
          ASSERT_TRUE(oracle::matches(got[k].value, want[k].value, 1e-9)) << text << " emission " << k;
        }
      }
    }
  }
}
