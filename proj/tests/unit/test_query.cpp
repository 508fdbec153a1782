#include <gtest/gtest.h>

#include <cctype>
#include <random>

#include "livewatch/query.hpp"
#include "livewatch/wire.hpp"
#include "oracles.hpp"

using namespace livewatch;
using namespace livewatch::query;

namespace {

Value eval_text(const std::string& text, Value bindings = Value(Record{})) {
  return evaluate(*parse_expression(text), RecordBinding(std::move(bindings)));
}

}  // namespace

TEST(Parse, BinderRootedAccessHasNoFreeNames) {
  const Pipeline p = parse("map(b -> b.loss)");
  ASSERT_EQ(p.stages().size(), 1u);
  EXPECT_TRUE(std::holds_alternative<MapStage>(p.stages()[0]));
  EXPECT_TRUE(p.referenced_names().empty());
  EXPECT_EQ(p.record_fields(), std::set<std::string>{"loss"});
}

TEST(Parse, ReduceDefaultsToGroupWindow) {
  const Pipeline p = parse("reduce(avg, b -> b.duration)");
  ASSERT_NE(p.reducer(), nullptr);
  EXPECT_EQ(p.reducer()->aggregator.kind, Aggregator::Avg);
  EXPECT_EQ(p.window(), WindowMode::group());
}

TEST(Parse, StageAfterReduceIsRejected) {
  EXPECT_THROW(parse("map(x -> x.a) | reduce(sum, x -> x) | map(y -> y)"), ValidationError);
  EXPECT_THROW(parse("reduce(sum, x -> x) | reduce(sum, x -> x)"), ValidationError);
  EXPECT_THROW(parse("map(x -> x) | window(count=3)"), ValidationError);
  EXPECT_THROW(parse("reduce(count) | window(count=3) | window(group)"), ValidationError);
  EXPECT_NO_THROW(parse("reduce(count) | window(count=3)"));
  EXPECT_NO_THROW(parse("window(seconds=2.5) | reduce(count)"));
}

TEST(Parse, AggregatorRules) {
  EXPECT_THROW(parse("reduce(count, x -> x)"), ParseError);
  EXPECT_THROW(parse("reduce(sum)"), ParseError);
  EXPECT_THROW(parse("reduce(hist[0], x -> x)"), ValidationError);
  EXPECT_THROW(parse("reduce(count) | window(count=0)"), ValidationError);
  EXPECT_THROW(parse("reduce(count) | window(seconds=0)"), ValidationError);
  EXPECT_EQ(parse("reduce(hist[4], x -> x)").reducer()->aggregator.bins, 4);
}

TEST(Parse, ErrorsCarryPosition) {
  try {
    parse("map(b -> b.loss +)");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1);
    EXPECT_EQ(e.column(), 18);
  }
  try {
    parse("map(b ->\n  b.loss $ 2)");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
    EXPECT_EQ(e.column(), 10);
  }
}

TEST(Parse, BuiltinArityIsCheckedAtParseTime) {
  EXPECT_ANY_THROW(parse_expression("abs(1, 2)"));
  EXPECT_ANY_THROW(parse_expression("clamp(1, 2)"));
  EXPECT_ANY_THROW(parse_expression("nosuch(1)"));
  EXPECT_NO_THROW(parse_expression("min(x.values)"));
  EXPECT_NO_THROW(parse_expression("max(1, 2)"));
}

TEST(FreeIdentifiers, Examples) {
  EXPECT_TRUE(free_identifiers(parse("map(b -> b.loss)")).empty());
  EXPECT_EQ(free_identifiers(parse("map(b -> b.loss + lr)")), std::set<std::string>{"lr"});
  EXPECT_TRUE(free_identifiers(parse("where(b -> b.idx % 2 == 0) | reduce(count)")).empty());
  // A later stage's binder is the previous stage's output, not the record.
  const Pipeline p = parse("map(b -> b.loss) | map(v -> v * scale)");
  EXPECT_EQ(p.referenced_names(), std::set<std::string>{"scale"});
  EXPECT_EQ(p.record_fields(), std::set<std::string>{"loss"});
  EXPECT_TRUE(parse("map(b -> b)").needs_full_record());
}

TEST(Evaluate, Examples) {
  EXPECT_EQ(eval_text("x.loss * 2", Value::record({{"x", Value::record({{"loss", 0.5}})}})), Value(1.0));
  EXPECT_EQ(eval_text("1 / 4"), Value(0.25));
  EXPECT_EQ(eval_text("x.grads[1]", Value::record({{"x", Value::record({{"grads", Value::list({0.1, 0.2})}})}})),
            Value(0.2));
}

TEST(Evaluate, NumericRules) {
  EXPECT_EQ(eval_text("4 / 2"), Value(2.0));
  EXPECT_EQ(eval_text("1 + 2.5"), Value(3.5));
  EXPECT_EQ(eval_text("7 % 3"), Value(1));
  EXPECT_EQ(eval_text("-7 % 3"), Value(-1));
  EXPECT_EQ(eval_text("5 % -1"), Value(0));
  EXPECT_EQ(eval_text("1 == 1.0"), Value(true));
  EXPECT_EQ(eval_text("2 < 2.5"), Value(true));
  EXPECT_EQ(eval_text("\"a\" == 1"), Value(false));
  EXPECT_EQ(eval_text("\"ab\" == \"ab\""), Value(true));
  EXPECT_EQ(eval_text("round(2.5)"), Value(3));
  EXPECT_EQ(eval_text("len(\"abc\")"), Value(3));
  EXPECT_EQ(eval_text("clamp(5, 0, 3)"), Value(3));
  EXPECT_EQ(eval_text("min(v)", Value::record({{"v", Value::list({3, 1.5, 2})}})), Value(1.5));
  EXPECT_EQ(eval_text("!(1 < 2) || true"), Value(true));
}

TEST(Evaluate, ErrorClasses) {
  EXPECT_THROW(eval_text("sqrt(-1)"), EvalError);
  EXPECT_THROW(eval_text("1 + \"a\""), EvalError);
  EXPECT_THROW(eval_text("1 / 0"), EvalError);
  EXPECT_THROW(eval_text("1 % 0"), EvalError);
  EXPECT_THROW(eval_text("1.5 % 1"), EvalError);
  EXPECT_THROW(eval_text("\"a\" < \"b\""), EvalError);
  EXPECT_THROW(eval_text("v[2]", Value::record({{"v", Value::list({1, 2})}})), EvalError);
  EXPECT_THROW(eval_text("v[-1]", Value::record({{"v", Value::list({1, 2})}})), EvalError);
  EXPECT_THROW(eval_text("x.missing", Value::record({{"x", Value::record({{"a", 1}})}})), EvalError);
  EXPECT_THROW(eval_text("9223372036854775807 + 1"), EvalError);
  EXPECT_THROW(eval_text("ln(0)"), EvalError);
  EXPECT_THROW(eval_text("unbound + 1"), EvalError);
}

TEST(EvaluateProperty, AgreesWithReferenceEvaluator) {
  std::mt19937_64 rng(21);
  int errors = 0;
  for (int i = 0; i < 1000; ++i) {
    const oracle::Arith a = oracle::random_arith(rng, 5);
    const std::int64_t x = oracle::uniform_int(rng, -100, 100);
    const double y = (oracle::unit(rng) * 2.0 - 1.0) * 10.0;
    const std::string text = oracle::render(a);
    const auto expected = oracle::reference_eval(a, x, y);
    const RecordBinding env(Value::record({{"x", x}, {"y", y}}));
    const ExprPtr e = parse_expression(text);
    if (!expected) {
      ++errors;
      EXPECT_THROW(evaluate(*e, env), EvalError) << text;
      continue;
    }
    const Value got = evaluate(*e, env);
    ASSERT_EQ(got.is_int(), expected->is_int) << text;
    if (got.is_int())
      EXPECT_EQ(got.as_int(), expected->i) << text;
    else
      EXPECT_TRUE(oracle::close(got.as_float(), expected->f, 1e-12)) << text << " got " << got.as_float() << " want " << expected->f;
  }
  EXPECT_LT(errors, 500);  // the generator must mostly produce evaluable trees
}

namespace {

std::string random_pipeline_text(std::mt19937_64& rng) {
  auto expr = [&](const std::string& binder) {
    std::string e = oracle::render(oracle::random_arith(rng, 3));
    // substitute the variables x and y (not letters inside "max")
    std::string out;
    for (std::size_t i = 0; i < e.size(); ++i) {
      const char c = e[i];
      const bool word = (i > 0 && std::isalpha(static_cast<unsigned char>(e[i - 1]))) ||
                        (i + 1 < e.size() && std::isalpha(static_cast<unsigned char>(e[i + 1])));
      if (word)
        out += c;
      else if (c == 'x')
        out += binder + ".a";
      else if (c == 'y')
        out += oracle::coin(rng) ? "lr" : binder + ".b[0]";
      else
        out += c;
    }
    return out;
  };
  std::string text;
  const int pre = static_cast<int>(oracle::uniform_int(rng, 0, 3));
  for (int i = 0; i < pre; ++i) {
    if (!text.empty()) text += " | ";
    if (oracle::coin(rng))
      text += "where(r -> " + expr("r") + " > " + std::to_string(oracle::uniform_int(rng, -5, 5)) + " && true)";
    else
      text += "map(r -> " + expr("r") + " == \"s\\\"q\")";
  }
  if (oracle::coin(rng)) {
    if (!text.empty()) text += " | ";
    static const char* kAggs[] = {"sum", "avg", "min", "max", "last", "hist[3]"};
    if (oracle::coin(rng, 0.2))
      text += "reduce(count)";
    else
      text += std::string("reduce(") + kAggs[oracle::uniform_int(rng, 0, 5)] + ", v -> " + expr("v") + ")";
    switch (oracle::uniform_int(rng, 0, 3)) {
      case 0: text += " | window(group)"; break;
      case 1: text += " | window(count=" + std::to_string(oracle::uniform_int(rng, 1, 9)) + ")"; break;
      case 2: text += " | window(seconds=0.25)"; break;
      default: break;
    }
  }
  if (text.empty()) text = "map(z -> z.a)";
  return text;
}

}  // namespace

TEST(ParseProperty, PrintParseFixpoint) {
  std::mt19937_64 rng(22);
  for (int i = 0; i < 500; ++i) {
    const std::string text = random_pipeline_text(rng);
    Pipeline p = [&] {
      try {
        return parse(text);
      } catch (const std::exception& e) {
        ADD_FAILURE() << text << ": " << e.what();
        throw;
      }
    }();
    const std::string printed = print(p);
    const Pipeline again = parse(printed);
    ASSERT_TRUE(again == p) << text << "\n  printed: " << printed;
    ASSERT_EQ(print(again), printed);
    ASSERT_EQ(free_identifiers(again), free_identifiers(p));
  }
}

TEST(ParseProperty, EvaluationIsPure) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 200; ++i) {
    const oracle::Arith a = oracle::random_arith(rng, 4);
    const ExprPtr e = parse_expression(oracle::render(a));
    const RecordBinding env(Value::record({{"x", 3}, {"y", 0.5}}));
    std::optional<Value> first;
    bool first_failed = false;
    try {
      first = evaluate(*e, env);
    } catch (const EvalError&) {
      first_failed = true;
    }
    for (int k = 0; k < 3; ++k) {
      if (first_failed) {
        EXPECT_THROW(evaluate(*e, env), EvalError);
      } else {
        EXPECT_EQ(evaluate(*e, env), *first);
      }
    }
  }
}
