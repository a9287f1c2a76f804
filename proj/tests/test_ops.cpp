#include <gtest/gtest.h>

#include "support.hpp"
#include "tssam/layers.hpp"

using namespace tssam;
using testing_support::fd_check;
using testing_support::readout;

namespace {

ParamStore<double> store_with(std::initializer_list<std::pair<std::string, Tensor<double>>> entries) {
  ParamStore<double> s;
  for (const auto& [n, t] : entries) s.add(n, t, false);
  return s;
}

Tensor<double> run(ParamStore<double>& s, const std::function<Var<double>(Context<double>&)>& f) {
  Tape<double> tape(false);
  Context<double> ctx(tape, s, Mode::eval);
  return f(ctx).value();
}

}  // namespace

TEST(Ops, Conv3x3MatchesLoopOracle) {
  auto s = store_with({{"x", oracle::random({2, 3, 5, 4}, 1)}, {"w", oracle::random({4, 3, 3, 3}, 2)}, {"b", oracle::random({4}, 3)}});
  auto out = run(s, [](Context<double>& c) { return ops::conv2d<double>(c.param("x"), c.param("w"), c.param("b")); });
  EXPECT_LE(oracle::max_abs_diff(out, oracle::conv(s.value("x"), s.value("w"), s.value("b"))), 1e-12);
}

TEST(Ops, TransposedConvMatchesScatterOracle) {
  auto s = store_with({{"x", oracle::random({2, 3, 2, 3}, 4)}, {"w", oracle::random({3, 5, 2, 2}, 5)}, {"b", oracle::random({5}, 6)}});
  auto out = run(s, [](Context<double>& c) { return ops::conv_transpose2x2(c.param("x"), c.param("w"), c.param("b")); });
  ASSERT_EQ(out.shape(), (Shape{2, 5, 4, 6}));
  EXPECT_LE(oracle::max_abs_diff(out, oracle::deconv(s.value("x"), s.value("w"), s.value("b"))), 1e-12);
}

TEST(Ops, BilinearMatchesOracleAndPreservesConstants) {
  auto s = store_with({{"x", oracle::random({1, 2, 3, 4}, 7)}});
  for (auto [oh, ow] : std::vector<std::pair<std::size_t, std::size_t>>{{6, 8}, {12, 16}, {5, 7}, {2, 2}}) {
    auto out = run(s, [&](Context<double>& c) { return ops::resize_bilinear(c.param("x"), oh, ow); });
    EXPECT_LE(oracle::max_abs_diff(out, oracle::bilinear(s.value("x"), oh, ow)), 1e-12) << oh << "x" << ow;
  }
  auto k = store_with({{"x", Tensor<double>({1, 1, 4, 4}, 0.37)}});
  auto up = run(k, [](Context<double>& c) { return ops::upsample_bilinear(c.param("x"), 2); });
  for (double v : up.values()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Ops, PoolsMatchOracle) {
  auto s = store_with({{"x", oracle::random({2, 3, 4, 6}, 8)}});
  auto a = run(s, [](Context<double>& c) { return ops::avg_pool2x2(c.param("x")); });
  auto m = run(s, [](Context<double>& c) { return ops::max_pool2x2(c.param("x")); });
  EXPECT_LE(oracle::max_abs_diff(a, oracle::avg_pool(s.value("x"))), 1e-15);
  EXPECT_EQ(oracle::max_abs_diff(m, oracle::max_pool(s.value("x"))), 0.0);
}

TEST(Ops, BatchNormTrainNeedsTwoSamples) {
  Tensor<double> rm({2}), rv({2}, 1.0);
  auto s = store_with({{"x", oracle::random({1, 2, 2, 2}, 9)}, {"g", Tensor<double>({2}, 1.0)}, {"b", Tensor<double>({2})}});
  Tape<double> tape;
  Context<double> ctx(tape, s, Mode::train);
  EXPECT_THROW(ops::batch_norm(ctx.param("x"), ctx.param("g"), ctx.param("b"), rm, rv, true, 0.1, 1e-5), ShapeError);
  EXPECT_NO_THROW(ops::batch_norm(ctx.param("x"), ctx.param("g"), ctx.param("b"), rm, rv, false, 0.1, 1e-5));
}

TEST(Ops, BatchNormTrainUpdatesRunningStatsWithMomentum) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
  Tensor<double> rm({1}), rv({1}, 1.0);
  ParamStore<double> s;
  s.add("g", Tensor<double>({1}, 1.0), false);
  s.add("b", Tensor<double>({1}), false);
  Tape<double> tape;
  Context<double> ctx(tape, s, Mode::train);
  ops::batch_norm(tape.constant(x), ctx.param("g"), ctx.param("b"), rm, rv, true, 0.1, 1e-5);
  // mean 3, unbiased variance (4+1+0+9)/3
  EXPECT_DOUBLE_EQ(rm[0], 0.3);
  EXPECT_DOUBLE_EQ(rv[0], 0.9 + 0.1 * 14.0 / 3.0);
}

TEST(Ops, ShapeErrorsNameTheOperation) {
  auto s = store_with({{"x", oracle::random({1, 3, 4, 4}, 1)}, {"w", oracle::random({2, 4, 1, 1}, 2)}, {"b", oracle::random({2}, 3)}});
  Tape<double> tape;
  Context<double> ctx(tape, s, Mode::eval);
  try {
    ops::conv2d<double>(ctx.param("x"), ctx.param("w"), ctx.param("b"));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos) << e.what();
  }
}

// ------------------------------------------------------------------ gradients

struct GradCase {
  const char* name;
  std::function<ParamStore<double>()> make;
  std::function<Var<double>(Context<double>&)> fn;
  Mode mode = Mode::eval;
};

class OpGradients : public ::testing::TestWithParam<int> {};

std::vector<GradCase> grad_cases() {
  using C = Context<double>;
  return {
      {"add_mul", [] { return store_with({{"a", oracle::random({1, 2, 2, 2}, 1)}, {"b", oracle::random({1, 2, 2, 2}, 2)}}); },
       [](C& c) { return readout(ops::mul(ops::add(c.param("a"), c.param("b")), c.param("a"))); }},
      {"conv3x3", [] { return store_with({{"x", oracle::random({2, 2, 3, 3}, 3)}, {"w", oracle::random({3, 2, 3, 3}, 4)}, {"b", oracle::random({3}, 5)}}); },
       [](C& c) { return readout(ops::conv2d<double>(c.param("x"), c.param("w"), c.param("b"))); }},
      {"linear", [] { return store_with({{"x", oracle::random({2, 3, 2, 2}, 6)}, {"w", oracle::random({4, 3}, 7)}, {"b", oracle::random({4}, 8)}}); },
       [](C& c) { return readout(ops::linear_channels(c.param("x"), c.param("w"), c.param("b"))); }},
      {"deconv", [] { return store_with({{"x", oracle::random({1, 2, 2, 2}, 9)}, {"w", oracle::random({2, 3, 2, 2}, 10)}, {"b", oracle::random({3}, 11)}}); },
       [](C& c) { return readout(ops::conv_transpose2x2(c.param("x"), c.param("w"), c.param("b"))); }},
      {"patch_embed", [] { return store_with({{"x", oracle::random({1, 3, 16, 32}, 12)}, {"w", oracle::random({2, 3, 16, 16}, 13, -0.1, 0.1)}, {"b", oracle::random({2}, 14)}}); },
       [](C& c) { return readout(ops::patch_embed(c.param("x"), c.param("w"), c.param("b"))); }},
      {"layer_norm", [] { return store_with({{"x", oracle::random({2, 4, 2, 1}, 15)}, {"g", oracle::random({4}, 16)}, {"b", oracle::random({4}, 17)}}); },
       [](C& c) { return readout(ops::layer_norm_channels(c.param("x"), c.param("g"), c.param("b"))); }},
      {"batch_norm_train", [] { return store_with({{"x", oracle::random({2, 3, 2, 2}, 18)}, {"g", oracle::random({3}, 19)}, {"b", oracle::random({3}, 20)}}); },
       [](C& c) {
         static Tensor<double> rm({3}), rv({3}, 1.0);
         return readout(ops::batch_norm(c.param("x"), c.param("g"), c.param("b"), rm, rv, true, 0.1, 1e-5));
       }},
      {"batch_norm_eval", [] { return store_with({{"x", oracle::random({2, 3, 2, 2}, 21)}, {"g", oracle::random({3}, 22)}, {"b", oracle::random({3}, 23)}}); },
       [](C& c) {
         static Tensor<double> rm = oracle::random({3}, 24), rv = oracle::random({3}, 25, 0.5, 1.5);
         return readout(ops::batch_norm(c.param("x"), c.param("g"), c.param("b"), rm, rv, false, 0.1, 1e-5));
       }},
      {"attention", [] { return store_with({{"x", oracle::random({1, 12, 2, 2}, 26)}}); },
       [](C& c) { return readout(ops::self_attention(c.param("x"), 2)); }},
      {"pointwise", [] { return store_with({{"x", oracle::random({1, 2, 3, 3}, 27, -2, 2)}}); },
       [](C& c) {
         auto x = c.param("x");
         return readout(ops::add(ops::add(ops::gelu(x), ops::tanh(x)), ops::scale(ops::sigmoid(x), 0.7)));
       }},
      {"resize", [] { return store_with({{"x", oracle::random({1, 2, 3, 2}, 28)}}); },
       [](C& c) { return readout(ops::resize_bilinear(c.param("x"), 7, 5)); }},
      {"pools_concat", [] { return store_with({{"x", oracle::random({1, 2, 4, 4}, 29)}, {"y", oracle::random({1, 1, 2, 2}, 30)}}); },
       [](C& c) {
         auto x = c.param("x");
         return readout(ops::concat_channels(ops::add(ops::avg_pool2x2(x), ops::max_pool2x2(x)), c.param("y")));
       }},
      {"relu", [] { return store_with({{"x", oracle::random({1, 2, 3, 3}, 31)}}); },
       [](C& c) { return readout(ops::relu(c.param("x"))); }},
  };
}

TEST_P(OpGradients, MatchCentralDifferences) {
  const auto cs = grad_cases()[std::size_t(GetParam())];
  auto store = cs.make();
  const auto r = fd_check(store, cs.fn, {}, cs.mode);
  EXPECT_LE(r.max_rel, 1e-6) << cs.name << " abs " << r.max_abs;
  EXPECT_GT(r.max_grad, 1e-4) << cs.name;
}

INSTANTIATE_TEST_SUITE_P(All, OpGradients, ::testing::Range(0, 13));

TEST(Ops, KinkTrackingFlagsReluSignChange) {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{0.5, -0.5});
  auto sig = [](const Tensor<double>& v) {
    Tape<double> t(false);
    t.set_track_kinks(true);
    ops::relu(t.constant(v));
    return t.decision_signature();
  };
  auto y = x;
  y[0] = 0.4;
  EXPECT_EQ(sig(x), sig(y));
  y[0] = -0.1;
  EXPECT_NE(sig(x), sig(y));
}
