#include <gtest/gtest.h>

#include "support.hpp"
#include "tssam/ffd.hpp"

using namespace tssam;
using testing_support::fd_check;

namespace {

ParamStore<double> ffd_store(const ModelConfig& cfg, std::uint64_t seed = 0) {
  ParamStore<double> s;
  Rng rng(seed);
  ffd::declare(s, cfg, rng);
  return s;
}

}  // namespace

TEST(Ffd, KeyPoolOfConstantIsTwiceTheConstant) {
  ParamStore<double> s;
  Rng rng(0);
  layers::declare_conv_block(s, "p", 1, 1, 1, rng);
  s.value("p.weight").fill(1);
  s.value("p.bias").fill(0);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  // identity projection: batch norm with unit running stats is within eps of identity
  const double c = 0.75, scale = 1.0 / std::sqrt(1.0 + 1e-5);
  auto y = ffd::key_pool(ctx, "p", t.constant(Tensor<double>({1, 1, 4, 4}, c))).value();
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_NEAR(v, 2 * c * scale, 1e-15);
}

TEST(Ffd, KeyPoolShapeAndOddInput) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  EXPECT_EQ(ffd::key_pool(ctx, "ffd.key_proj1", t.constant(oracle::random({1, 8, 8, 8}, 1))).shape(), (Shape{1, 8, 4, 4}));
  EXPECT_THROW(ffd::key_pool(ctx, "ffd.key_proj1", t.constant(oracle::random({1, 8, 5, 8}, 1))), ShapeError);
}

TEST(Ffd, KeyPoolMatchesLoopOracle) {
  ParamStore<double> s;
  Rng rng(0);
  layers::declare_conv_block(s, "p", 1, 1, 1, rng);
  oracle::randomize(s, 2);
  const auto x = oracle::random({1, 1, 4, 4}, 3);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  auto y = ffd::key_pool(ctx, "p", t.constant(x)).value();
  EXPECT_LE(oracle::max_abs_diff(y, oracle::key_pool(s, "p", x)), 1e-12);
}

TEST(Ffd, InjectStageDoublesResolution) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  auto y = ffd::inject_stage(ctx, 1, t.constant(oracle::random({1, 16, 4, 4}, 1)), t.constant(oracle::random({1, 8, 4, 4}, 2)),
                             t.constant(oracle::random({1, 8, 8, 8}, 3)));
  EXPECT_EQ(y.shape(), (Shape{1, 16, 8, 8}));
}

TEST(Ffd, InjectStageContractViolationsNameTheStage) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  auto x = t.constant(oracle::random({1, 16, 4, 4}, 1));
  try {
    ffd::inject_stage(ctx, 2, x, t.constant(Tensor<double>({1, 8, 2, 2})), t.constant(Tensor<double>({1, 8, 8, 8})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ffd::inject_stage(ctx, 1, x, t.constant(Tensor<double>({1, 8, 4, 4})), t.constant(Tensor<double>({1, 8, 4, 4}))),
               ShapeError);
}

TEST(Ffd, ForwardShapeAndLadder) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  mrm::Hierarchy<double> h{t.constant(oracle::random({2, 8, 8, 8}, 1)), t.constant(oracle::random({2, 8, 16, 16}, 2))};
  std::vector<Shape> ladder;
  auto y = ffd::ffd_forward(ctx, t.constant(oracle::random({2, 16, 4, 4}, 3)), h, &ladder);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 64, 64}));
  ASSERT_EQ(ladder.size(), 4u);
  EXPECT_EQ(ladder[0], (Shape{2, 16, 4, 4}));
  EXPECT_EQ(ladder[1], (Shape{2, 16, 8, 8}));
  EXPECT_EQ(ladder[2], (Shape{2, 16, 16, 16}));
  EXPECT_EQ(ladder[3], (Shape{2, 1, 64, 64}));
}

TEST(Ffd, ZeroHeadGivesZeroLogits) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  s.value("ffd.head.weight").fill(0);
  s.value("ffd.head.bias").fill(0);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  mrm::Hierarchy<double> h{t.constant(oracle::random({1, 8, 8, 8}, 1)), t.constant(oracle::random({1, 8, 16, 16}, 2))};
  auto y = ffd::ffd_forward(ctx, t.constant(oracle::random({1, 16, 4, 4}, 3)), h).value();
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Ffd, HierarchyAtWrongScaleIsRejected) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  Tape<double> t(false);
  Context<double> ctx(t, s, Mode::eval);
  mrm::Hierarchy<double> h{t.constant(Tensor<double>({1, 8, 8, 8})), t.constant(Tensor<double>({1, 8, 8, 8}))};
  EXPECT_THROW(ffd::ffd_forward(ctx, t.constant(Tensor<double>({1, 16, 4, 4})), h), ShapeError);
}

TEST(Ffd, PipelineMatchesEquationOracle) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  oracle::randomize(s, 7);
  const auto side = oracle::random({2, 16, 2, 2}, 8);
  const oracle::Pair hier{oracle::random({2, 8, 4, 4}, 9), oracle::random({2, 8, 8, 8}, 10)};
  for (bool train : {false, true}) {
    const auto expect = oracle::ffd_forward(s, side, hier, train);
    auto st = s;
    Tape<double> t(false);
    Context<double> ctx(t, st, train ? Mode::train : Mode::eval);
    auto y = ffd::ffd_forward(ctx, t.constant(side), {t.constant(hier.s8), t.constant(hier.s4)}).value();
    EXPECT_LE(oracle::max_abs_diff(y, expect), 1e-10) << (train ? "train" : "eval");
  }
}

TEST(Ffd, AllParametersTrainable) {
  ModelConfig cfg;
  auto s = ffd_store(cfg);
  for (const auto& e : s.entries()) EXPECT_FALSE(e.frozen) << e.name;
}

TEST(Ffd, MeanLogitGradientMatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.side_width = 3;
  cfg.refine_width = 2;
  auto s = ffd_store(cfg, 4);
  oracle::randomize(s, 5);
  // a 16x16 image: stream at 1x1, hierarchy at 2x2 and 4x4
  s.add("side", oracle::random({1, 3, 1, 1}, 6), true);
  s.add("h8", oracle::random({1, 2, 2, 2}, 7), true);
  s.add("h4", oracle::random({1, 2, 4, 4}, 8), true);
  auto f = [](Context<double>& c) {
    return ops::mean_all(ffd::ffd_forward(c, c.param("side"), {c.param("h8"), c.param("h4")}));
  };
  const auto r = fd_check(s, f);
  EXPECT_LE(r.max_rel, 1e-4) << r.max_abs;
  EXPECT_GT(r.max_grad, 1e-3);
}
