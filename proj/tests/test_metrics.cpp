#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "oracles.hpp"
#include "tssam/errors.hpp"
#include "tssam/metrics.hpp"

using namespace tssam;
using metrics::Map;
using oracle::Grid;

namespace {

Grid grid(const Map& m) {
  Grid g(m.dim(0), std::vector<double>(m.dim(1)));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) g[i][j] = m[i * m.dim(1) + j];
  return g;
}

Map random_pred(std::size_t h, std::size_t w, std::uint64_t seed) { return oracle::random({h, w}, seed, 0.0, 1.0); }

// binary map with at least one pixel of each class
Map random_gt(std::size_t h, std::size_t w, std::uint64_t seed, double p = 0.4) {
  auto m = oracle::random({h, w}, seed, 0.0, 1.0);
  for (auto& v : m.values()) v = v < p ? 1.0 : 0.0;
  m[0] = 1.0;
  m[m.numel() - 1] = 0.0;
  return m;
}

Map constant(std::size_t h, std::size_t w, double v) { return Map({h, w}, v); }

Map invert(Map m) {
  for (auto& v : m.values()) v = 1.0 - v;
  return m;
}

Map vertical_split(std::size_t h, std::size_t w) {
  Map m({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = w / 2; j < w; ++j) m[i * w + j] = 1.0;
  return m;
}

}  // namespace

TEST(Metrics, MatchOraclesOnRandomPairs) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = random_pred(8, 8, seed);
    const auto g = random_gt(8, 8, seed + 1000);
    const auto P = grid(p), G = grid(g);
    EXPECT_EQ(metrics::mae(p, g), oracle::mae(P, G)) << seed;
    EXPECT_EQ(metrics::ber(p, g), oracle::ber(P, G)) << seed;
    EXPECT_NEAR(metrics::weighted_fbeta(p, g), oracle::weighted_fbeta(P, G), 1e-8) << seed;
    EXPECT_NEAR(metrics::s_measure(p, g), oracle::s_measure(P, G), 1e-6) << seed;
    EXPECT_NEAR(metrics::e_measure(p, g), oracle::e_measure(P, G), 1e-6) << seed;
  }
}

TEST(Metrics, MatchOraclesOnNonSquareAndBinaryPredictions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = random_pred(6, 11, seed);
    if (seed % 2) p = random_gt(6, 11, seed + 7, 0.5);
    const auto g = random_gt(6, 11, seed + 500, 0.2);
    const auto P = grid(p), G = grid(g);
    EXPECT_NEAR(metrics::weighted_fbeta(p, g), oracle::weighted_fbeta(P, G), 1e-8) << seed;
    EXPECT_NEAR(metrics::s_measure(p, g), oracle::s_measure(P, G), 1e-6) << seed;
    EXPECT_NEAR(metrics::e_measure(p, g), oracle::e_measure(P, G), 1e-6) << seed;
  }
}

TEST(Mae, Constants) {
  const auto g = random_gt(5, 7, 1);
  EXPECT_EQ(metrics::mae(g, g), 0.0);
  EXPECT_EQ(metrics::mae(constant(4, 4, 0.25), constant(4, 4, 0)), 0.25);
  EXPECT_THROW(metrics::mae(constant(4, 4, 0), constant(4, 5, 0)), ShapeError);
}

TEST(Ber, Constants) {
  const auto g = random_gt(8, 8, 2);
  EXPECT_EQ(metrics::ber(g, g), 0.0);
  EXPECT_EQ(metrics::ber(constant(8, 8, 1), g), 50.0);
  EXPECT_EQ(metrics::ber(constant(8, 8, 0), constant(8, 8, 0)), 0.0);
  EXPECT_EQ(metrics::ber(invert(g), g), 100.0);
}

TEST(Ber, InvariantUnderClassSwap) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = random_pred(8, 8, seed), g = random_gt(8, 8, seed + 3);
    EXPECT_DOUBLE_EQ(metrics::ber(invert(p), invert(g)), metrics::ber(p, g)) << seed;
  }
}

TEST(WeightedFbeta, Constants) {
  const auto g = random_gt(12, 12, 3);
  EXPECT_NEAR(metrics::weighted_fbeta(g, g), 1.0, 1e-12);
  // the error field is blurred with zero padding, so weighted true positives
  // vanish only when the foreground stays clear of the border
  Map interior({12, 12});
  for (std::size_t i = 4; i < 8; ++i)
    for (std::size_t j = 3; j < 9; ++j) interior[i * 12 + j] = 1.0;
  EXPECT_EQ(metrics::weighted_fbeta(invert(interior), interior), 0.0);
  EXPECT_LT(metrics::weighted_fbeta(invert(g), g), 0.5);
  EXPECT_THROW(metrics::weighted_fbeta(g, constant(12, 12, 0)), UndefinedMetric);
}

TEST(SMeasure, Constants) {
  const auto split = vertical_split(8, 8);
  EXPECT_NEAR(metrics::s_measure(split, split), 1.0, 1e-6);
  EXPECT_EQ(metrics::s_measure(constant(8, 8, 0), constant(8, 8, 0)), 1.0);
  EXPECT_EQ(metrics::s_measure(constant(8, 8, 1), constant(8, 8, 0)), 0.0);
  EXPECT_NEAR(metrics::s_measure(constant(8, 8, 0.3), constant(8, 8, 1)), 0.3, 1e-15);
  EXPECT_NEAR(metrics::s_measure(constant(8, 8, 0.3), constant(8, 8, 0)), 0.7, 1e-15);
}

TEST(EMeasure, Constants) {
  const auto g = random_gt(10, 10, 4);
  EXPECT_NEAR(metrics::e_measure(g, g), 1.0, 1e-6);
  EXPECT_NEAR(metrics::e_measure(invert(g), g), 0.0, 1e-6);
  const auto split = vertical_split(8, 8);
  EXPECT_NEAR(metrics::e_measure(split, split), 1.0, 1e-6);
  auto speck = constant(6, 6, 0);
  speck[7] = 0.9;
  EXPECT_NEAR(metrics::e_measure(speck, constant(6, 6, 0)), 35.0 / 36.0, 1e-12);
}

TEST(Metrics, StayInRange) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto p = random_pred(8, 8, seed);
    const auto g = random_gt(8, 8, seed + 77, 0.1 + 0.8 * double(seed % 10) / 10);
    const auto m = metrics::evaluate_image(p, g);
    for (double v : {m.s_alpha, m.e_phi, m.mae, *m.f_beta_w}) {
      EXPECT_GE(v, 0.0) << seed;
      EXPECT_LE(v, 1.0) << seed;
    }
    const double b = metrics::ber(m.conf);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 100.0);
  }
}

TEST(Metrics, FlippingPixelsNeverHelps) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = random_gt(16, 16, seed, 0.3);
    std::vector<std::size_t> order(g.numel());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
    auto p = g;
    double f_prev = metrics::weighted_fbeta(p, g), mae_prev = metrics::mae(p, g);
    for (std::size_t k = 1; k <= 16; ++k) {
      p[order[k - 1]] = 1.0 - p[order[k - 1]];
      const double f = metrics::weighted_fbeta(p, g), m = metrics::mae(p, g);
      EXPECT_LE(f, f_prev + 1e-12) << "seed " << seed << " k " << k;
      EXPECT_GE(m, mae_prev) << "seed " << seed << " k " << k;
      f_prev = f, mae_prev = m;
    }
  }
}

TEST(Metrics, RejectsNonBinaryGroundTruthAndBadRank) {
  auto g = random_gt(4, 4, 5);
  g[3] = 0.5;
  EXPECT_THROW(metrics::mae(constant(4, 4, 0), g), ValidationError);
  EXPECT_THROW(metrics::mae(Map({1, 4, 4}), Map({1, 4, 4})), ShapeError);
}

TEST(Metrics, PlaneExtractsOneSample) {
  Tensor<float> t({2, 1, 2, 3});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = float(i);
  const auto p = metrics::plane(t, 1);
  EXPECT_EQ(p.shape(), (Shape{2, 3}));
  EXPECT_EQ(p[5], 11.0);
  EXPECT_THROW(metrics::plane(Tensor<float>({1, 3, 2, 2})), ShapeError);
}

TEST(EvaluateDataset, SingleImageEqualsPerImageMetrics) {
  const auto p = random_pred(8, 8, 6), g = random_gt(8, 8, 7);
  const auto r = metrics::evaluate_dataset({{"a", p, g}});
  EXPECT_EQ(r.n_images, 1u);
  EXPECT_EQ(r.mae, metrics::mae(p, g));
  EXPECT_EQ(r.ber, metrics::ber(p, g));
  EXPECT_EQ(r.f_beta_w, metrics::weighted_fbeta(p, g));
  EXPECT_EQ(r.s_alpha, metrics::s_measure(p, g));
  EXPECT_EQ(r.e_phi, metrics::e_measure(p, g));
}

TEST(EvaluateDataset, DuplicatingImagesLeavesReportUnchanged) {
  std::vector<metrics::EvalItem> once, twice;
  for (std::uint64_t k = 0; k < 3; ++k) {
    metrics::EvalItem it{"s" + std::to_string(k), random_pred(8, 8, 10 + k), random_gt(8, 8, 20 + k)};
    once.push_back(it);
    twice.push_back(it);
    it.id += "_dup";
    twice.push_back(it);
  }
  const auto a = metrics::evaluate_dataset(once), b = metrics::evaluate_dataset(twice);
  EXPECT_DOUBLE_EQ(a.mae, b.mae);
  EXPECT_DOUBLE_EQ(a.s_alpha, b.s_alpha);
  EXPECT_DOUBLE_EQ(a.e_phi, b.e_phi);
  EXPECT_DOUBLE_EQ(a.f_beta_w, b.f_beta_w);
  EXPECT_EQ(a.ber, b.ber);
  EXPECT_EQ(b.n_images, 6u);
}

TEST(EvaluateDataset, TwoImagesMatchHandAverage) {
  const auto p1 = random_pred(8, 8, 30), g1 = random_gt(8, 8, 31);
  const auto p2 = random_pred(8, 8, 32), g2 = random_gt(8, 8, 33, 0.7);
  const auto r = metrics::evaluate_dataset({{"b", p2, g2}, {"a", p1, g1}});
  const auto P1 = grid(p1), G1 = grid(g1), P2 = grid(p2), G2 = grid(g2);
  EXPECT_NEAR(r.mae, (oracle::mae(P1, G1) + oracle::mae(P2, G2)) / 2, 1e-15);
  EXPECT_NEAR(r.f_beta_w, (oracle::weighted_fbeta(P1, G1) + oracle::weighted_fbeta(P2, G2)) / 2, 1e-8);
  EXPECT_NEAR(r.s_alpha, (oracle::s_measure(P1, G1) + oracle::s_measure(P2, G2)) / 2, 1e-6);
  EXPECT_NEAR(r.e_phi, (oracle::e_measure(P1, G1) + oracle::e_measure(P2, G2)) / 2, 1e-6);
  // BER pools both images into one confusion matrix: stack them vertically
  Grid P = P1, G = G1;
  P.insert(P.end(), P2.begin(), P2.end());
  G.insert(G.end(), G2.begin(), G2.end());
  EXPECT_EQ(r.ber, oracle::ber(P, G));
}

TEST(EvaluateDataset, InputOrderDoesNotMatter) {
  std::vector<metrics::EvalItem> items;
  for (std::uint64_t k = 0; k < 5; ++k) items.push_back({"id" + std::to_string(k), random_pred(8, 8, k), random_gt(8, 8, k + 9)});
  auto rev = items;
  std::reverse(rev.begin(), rev.end());
  EXPECT_EQ(metrics::to_json(metrics::evaluate_dataset(items)).dump(), metrics::to_json(metrics::evaluate_dataset(rev)).dump());
}

TEST(EvaluateDataset, EmptyForegroundImagesAreExcludedFromF) {
  const auto g = random_gt(8, 8, 40);
  const auto r = metrics::evaluate_dataset({{"a", g, g}, {"b", constant(8, 8, 0), constant(8, 8, 0)}});
  EXPECT_EQ(r.f_beta_excluded, 1u);
  EXPECT_NEAR(r.f_beta_w, 1.0, 1e-12);
  EXPECT_EQ(r.n_images, 2u);
}

TEST(EvaluateDataset, MissingPairsAbortUnlessAllowed) {
  std::map<std::string, Map> preds{{"a", constant(4, 4, 0.2)}, {"x", constant(4, 4, 0.2)}};
  std::map<std::string, Map> gts{{"a", random_gt(4, 4, 1)}, {"b", random_gt(4, 4, 2)}};
  try {
    metrics::evaluate_dataset(preds, gts, false);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("b (no prediction)"), std::string::npos) << m;
    EXPECT_NE(m.find("x (no ground truth)"), std::string::npos) << m;
  }
  std::vector<std::string> missing;
  const auto r = metrics::evaluate_dataset(preds, gts, true, &missing);
  EXPECT_EQ(r.n_images, 1u);
  EXPECT_EQ(missing.size(), 2u);
}

TEST(EvaluateDataset, JsonAndTableCarryEveryField) {
  const auto r = metrics::evaluate_dataset({{"a", random_pred(8, 8, 1), random_gt(8, 8, 2)}});
  const auto j = metrics::to_json(r);
  for (const char* k : {"s_alpha", "e_phi", "f_beta_w", "mae", "ber", "n_images"}) EXPECT_TRUE(j.contains(k)) << k;
  const auto t = metrics::format_table(r);
  for (const char* k : {"S_alpha", "E_phi", "F_beta_w", "MAE", "BER"}) EXPECT_NE(t.find(k), std::string::npos) << k;
}
