#include <gtest/gtest.h>

#include <random>

#include "reidkit/reidkit.hpp"
#include "oracles.hpp"

using namespace reidkit;

namespace {

LocalDistMatrix random_matrix(int r, int c, std::mt19937_64& rng) {
  LocalDistMatrix d(r, c);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : d.d) v = u(rng);
  return d;
}

StripeSet random_stripes(int h, int c, std::mt19937_64& rng) {
  StripeSet s(h, c);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < h; ++i) {
    auto st = s.stripe(i);
    std::vector<double> v(c);
    for (double& x : v) x = g(rng);
    v = oracle::unit(v);
    std::copy(v.begin(), v.end(), st.begin());
  }
  return s;
}

StripeSet uniform_stripes(int h, std::vector<double> v) {
  v = oracle::unit(v);
  StripeSet s(h, static_cast<int>(v.size()));
  for (int i = 0; i < h; ++i) std::copy(v.begin(), v.end(), s.stripe(i).begin());
  return s;
}

}  // namespace

TEST(HorizontalPool, WidthOneRowsBecomeNormalizedStripes) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 4, 3, 1}, rng);
  const auto sets = horizontal_pool(x);
  ASSERT_EQ(sets.size(), 2u);
  for (int n = 0; n < 2; ++n)
    for (int r = 0; r < 3; ++r) {
      std::vector<double> row;
      for (int c = 0; c < 4; ++c) row.push_back(x.at(n, c, r, 0));
      const auto ref = oracle::unit(row);
      for (int c = 0; c < 4; ++c) EXPECT_NEAR(sets[n].stripe(r)[c], ref[c], 1e-14);
    }
}

TEST(HorizontalPool, ConstantMapGivesIdenticalStripes) {
  const auto sets = horizontal_pool(Tensor(1, 3, 4, 5, 2.0));
  for (int r = 1; r < 4; ++r)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(sets[0].stripe(r)[c], sets[0].stripe(0)[c]);
}

TEST(HorizontalPool, MatchesRowMeanOracle) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 5, 4, 3}, rng);
  const auto sets = horizontal_pool(x);
  for (int n = 0; n < 2; ++n)
    for (int r = 0; r < 4; ++r) {
      std::vector<double> m(5, 0.0);
      for (int c = 0; c < 5; ++c) {
        for (int w = 0; w < 3; ++w) m[c] += x.at(n, c, r, w);
        m[c] /= 3;
      }
      const auto ref = oracle::unit(m);
      for (int c = 0; c < 5; ++c) EXPECT_NEAR(sets[n].stripe(r)[c], ref[c], 1e-14);
    }
}

TEST(HorizontalPool, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 2, 4}, rng);
  std::vector<StripeSet> g;
  for (int n = 0; n < 2; ++n) g.push_back(random_stripes(2, 3, rng));
  const Tensor gx = horizontal_pool_backward(x, g);
  auto loss = [&](const Tensor& t) {
    double s = 0.0;
    const auto sets = horizontal_pool(t);
    for (int n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < sets[n].values.size(); ++k) s += sets[n].values[k] * g[n].values[k];
    return s;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    const double fd = oracle::derivative(
        [&](double v) {
          x[i] = v;
          return loss(x);
        },
        orig);
    x[i] = orig;
    EXPECT_NEAR(gx[i], fd, 1e-7);
  }
}

TEST(StripeDistance, IdentityAndSaturation) {
  std::mt19937_64 rng(4);
  const StripeSet a = random_stripes(3, 4, rng);
  const auto d = stripe_distance_matrix(a, a);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(d(i, i), 0.0);
  StripeSet far(1, 1), near(1, 1);
  far.values[0] = 1e3;
  const double v = stripe_distance_matrix(far, near)(0, 0);
  EXPECT_LE(v, 1.0);
  EXPECT_GT(v, 0.999);
  far.values[0] = 20.0;
  EXPECT_LT(stripe_distance_matrix(far, near)(0, 0), 1.0);
}

TEST(StripeDistance, MatchesTwoStepOracle) {
  std::mt19937_64 rng(5);
  const StripeSet a = random_stripes(3, 6, rng), b = random_stripes(3, 6, rng);
  const auto d = stripe_distance_matrix(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const std::vector<double> ai(a.stripe(i).begin(), a.stripe(i).end());
      const std::vector<double> bj(b.stripe(j).begin(), b.stripe(j).end());
      const double x = oracle::euclid(ai, bj);
      EXPECT_NEAR(d(i, j), (std::exp(x) - 1) / (std::exp(x) + 1), 1e-14);
      EXPECT_GE(d(i, j), 0.0);
      EXPECT_LT(d(i, j), 1.0);
    }
  EXPECT_THROW(stripe_distance_matrix(a, random_stripes(3, 5, rng)), ConfigError);
}

TEST(StripeDistance, RawModeIsEuclidean) {
  std::mt19937_64 rng(6);
  const StripeSet a = random_stripes(2, 3, rng), b = random_stripes(2, 3, rng);
  const auto d = stripe_distance_matrix(a, b, StripeMetric::raw);
  const std::vector<double> a0(a.stripe(0).begin(), a.stripe(0).end());
  const std::vector<double> b1(b.stripe(1).begin(), b.stripe(1).end());
  EXPECT_NEAR(d(0, 1), oracle::euclid(a0, b1), 1e-14);
}

TEST(ShortestPath, SmallCases) {
  LocalDistMatrix one(1, 1, 0.37);
  EXPECT_EQ(shortest_path(one), 0.37);
  LocalDistMatrix d(2, 2);
  d(0, 0) = 1;
  d(0, 1) = 2;
  d(1, 0) = 3;
  d(1, 1) = 1;
  EXPECT_EQ(shortest_path(d), 4.0);
  const auto cells = shortest_path_cells(d);
  EXPECT_EQ(cells, (std::vector<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 1}}));
  EXPECT_THROW(shortest_path(LocalDistMatrix()), ConfigError);
}

TEST(ShortestPath, MatchesEnumerationUpToSevenBySeven) {
  std::mt19937_64 rng(7);
  for (int r = 1; r <= 7; ++r)
    for (int c = 1; c <= 7; ++c)
      for (int t = 0; t < 3; ++t) {
        const auto d = random_matrix(r, c, rng);
        EXPECT_NEAR(shortest_path(d), oracle::min_path(d), 1e-12) << r << "x" << c;
        double along = 0.0;
        const auto cells = shortest_path_cells(d);
        EXPECT_EQ(static_cast<int>(cells.size()), r + c - 1);
        for (auto [i, j] : cells) along += d(i, j);
        EXPECT_NEAR(along, shortest_path(d), 1e-12);
      }
}

TEST(ShortestPath, MonotoneUnderCellIncrease) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    auto d = random_matrix(5, 5, rng);
    const double before = shortest_path(d);
    d.d[t % 25] += 0.3;
    EXPECT_GE(shortest_path(d), before);
  }
}

TEST(LocalDistance, Symmetric) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const StripeSet a = random_stripes(6, 8, rng), b = random_stripes(6, 8, rng);
    EXPECT_NEAR(local_distance(a, b), local_distance(b, a), 1e-12);
    const double v = local_distance(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 6 + 6 - 1);
  }
}

TEST(LocalDistance, SelfDistanceZeroForUniformStripes) {
  const StripeSet a = uniform_stripes(5, {0.3, -1.0, 2.0});
  EXPECT_EQ(local_distance(a, a), 0.0);
}

TEST(LocalDistance, SelfDistanceIsPathOverZeroDiagonal) {
  // Right/down paths leave the diagonal, so distinct stripes within one
  // image make the self distance positive.
  std::mt19937_64 rng(12);
  const StripeSet a = random_stripes(4, 6, rng);
  const auto d = stripe_distance_matrix(a, a);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(d(i, i), 0.0);
  EXPECT_NEAR(local_distance(a, a), oracle::min_path(d), 1e-12);
  EXPECT_GT(local_distance(a, a), 0.0);
}

TEST(LocalDistance, OneFarStripeCostsAtMostOne) {
  const StripeSet a = uniform_stripes(4, {1.0, 0.0, 0.0});
  StripeSet b = a;
  for (double& v : b.stripe(2)) v = -v;
  const double d = local_distance(a, b);
  EXPECT_NEAR(d, std::tanh(0.5 * 2.0), 1e-12);
  EXPECT_LE(d, 1.0);
}

TEST(LocalDistance, BackwardAlongPathMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  StripeSet a = random_stripes(4, 3, rng), b = random_stripes(4, 3, rng);
  StripeSet ga(4, 3), gb(4, 3);
  local_distance_backward(a, b, 1.0, ga, gb);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double orig = a.values[i];
    const double fd = oracle::derivative(
        [&](double v) {
          a.values[i] = v;
          return local_distance(a, b);
        },
        orig);
    a.values[i] = orig;
    EXPECT_NEAR(ga.values[i], fd, 1e-7);
  }
}
