#include <gtest/gtest.h>

#include <random>

#include "reidkit/reidkit.hpp"
#include "oracles.hpp"

using namespace reidkit;

namespace {

std::mt19937_64 rng_for(std::uint64_t s) { return std::mt19937_64(s); }

}  // namespace

TEST(Conv2d, IdentityKernelCopiesInput) {
  auto rng = rng_for(1);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  auto p = LayerParams::conv(3, 3, 1);
  for (int c = 0; c < 3; ++c) p.weight.value[c * 3 + c] = 1.0;
  const Tensor y = conv2d(x, p, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, AllOnesKernelSumsConstantInput) {
  const double c = 1.75;
  const Tensor x(1, 1, 3, 3, c);
  auto p = LayerParams::conv(1, 1, 3);
  std::fill(p.weight.value.begin(), p.weight.value.end(), 1.0);
  const Tensor y = conv2d(x, p, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 9 * c);
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  auto rng = rng_for(2);
  for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    const Tensor x = random_tensor({2, 3, 5, 5}, rng);
    auto p = LayerParams::conv(4, 3, 3, true);
    randomize(p, rng);
    const Tensor y = conv2d(x, p, stride, pad);
    const Tensor ref = oracle::conv(x, p, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, PointwiseFastPathMatchesOracle) {
  auto rng = rng_for(3);
  const Tensor x = random_tensor({2, 5, 3, 4}, rng);
  auto p = LayerParams::conv(6, 5, 1, true);
  randomize(p, rng);
  const Tensor y = conv2d(x, p, 1, 0), ref = oracle::conv(x, p, 1, 0);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv2d, OutputDimsFollowConvArithmetic) {
  auto p = LayerParams::conv(2, 1, 3);
  const Tensor y = conv2d(Tensor(1, 1, 7, 6), p, 2, 1);
  EXPECT_EQ(y.h(), (7 + 2 - 3) / 2 + 1);
  EXPECT_EQ(y.w(), (6 + 2 - 3) / 2 + 1);
}

TEST(Conv2d, ChannelMismatchIsConfigError) {
  auto p = LayerParams::conv(2, 3, 3);
  try {
    conv2d(Tensor(1, 4, 5, 5), p, 1, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find('4'), std::string::npos);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputIsConfigError) {
  auto p = LayerParams::conv(1, 1, 5);
  EXPECT_THROW(conv2d(Tensor(1, 1, 2, 2), p, 1, 0), ConfigError);
}

TEST(Linear, IdentityWeightsCopyInput) {
  auto rng = rng_for(4);
  const Tensor x = random_tensor({3, 4, 1, 1}, rng);
  auto p = LayerParams::linear(4, 4);
  for (int i = 0; i < 4; ++i) p.weight.value[i * 4 + i] = 1.0;
  const Tensor y = linear(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Linear, ZeroWeightsGiveBias) {
  auto rng = rng_for(5);
  auto p = LayerParams::linear(3, 5);
  std::fill(p.bias.value.begin(), p.bias.value.end(), -0.25);
  const Tensor y = linear(random_tensor({2, 5, 1, 1}, rng), p);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], -0.25);
}

TEST(Linear, MatchesDotProductOracle) {
  auto rng = rng_for(6);
  auto p = LayerParams::linear(3, 8);
  randomize(p, rng);
  const Tensor x = random_tensor({4, 8, 1, 1}, rng);
  const Tensor y = linear(x, p), ref = oracle::dense(x, p);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Linear, DimensionMismatchIsConfigError) {
  auto p = LayerParams::linear(3, 8);
  EXPECT_THROW(linear(Tensor(1, 7, 1, 1), p), ConfigError);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  auto rng = rng_for(7);
  const Tensor x = random_tensor({2, 3, 2, 2}, rng);
  auto p = LayerParams::batchnorm(3);
  const Tensor y = batch_norm(x, p, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, TrainOutputHasZeroMeanUnitVariancePerChannel) {
  auto rng = rng_for(8);
  const Tensor x = random_tensor({5, 3, 2, 3}, rng, -4.0, 7.0);
  auto p = LayerParams::batchnorm(3);
  const Tensor y = batch_norm(x, p, Mode::train);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    int n = 0;
    for (int b = 0; b < 5; ++b)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j, ++n) s += y.at(b, c, i, j);
    const double mean = s / n;
    for (int b = 0; b < 5; ++b)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) ss += (y.at(b, c, i, j) - mean) * (y.at(b, c, i, j) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(ss / n, 1.0, 1e-3);
  }
}

TEST(BatchNorm, TrainUpdatesRunningStatsByMomentum) {
  auto rng = rng_for(9);
  const Tensor x = random_tensor({4, 2, 3, 3}, rng, 1.0, 3.0);
  auto p = LayerParams::batchnorm(2);
  batch_norm(x, p, Mode::train);
  const auto m = oracle::channel_means(x);
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (int b = 0; b < 4; ++b) mean += m[b * 2 + c];
    mean /= 4;
    EXPECT_NEAR(p.running_mean[c], 0.1 * mean, 1e-12);
    EXPECT_GT(p.running_var[c], 0.0);
  }
}

TEST(BatchNorm, SingleSampleZeroVarianceIsGuarded) {
  auto p = LayerParams::batchnorm(2);
  const Tensor y = batch_norm(Tensor(1, 2, 1, 1, 3.0), p, Mode::train);
  EXPECT_TRUE(y.all_finite());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(BatchNorm, ChannelMismatchIsConfigError) {
  auto p = LayerParams::batchnorm(3);
  EXPECT_THROW(batch_norm(Tensor(1, 2, 1, 1), p, Mode::eval), ConfigError);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  const auto rep = run_grad_probe("bn", 11);
  EXPECT_LT(rep.max_error, 1e-5) << rep.worst;
}

TEST(LayerParams, ValidateRejectsBadShapesAndVariances) {
  auto p = LayerParams::linear(3, 4);
  p.weight.value.pop_back();
  EXPECT_THROW(p.validate(), ConfigError);
  auto bn = LayerParams::batchnorm(2);
  bn.running_var[1] = 0.0;
  EXPECT_THROW(bn.validate(), ConfigError);
}

TEST(Activations, ReluValues) {
  const Tensor y = relu(Tensor({1, 3, 1, 1}, {-2.0, 0.0, 3.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 3.0);
}

TEST(Activations, SigmoidAtZeroAndRange) {
  EXPECT_EQ(sigmoid(Tensor(1, 1, 1, 1))[0], 0.5);
  const Tensor y = sigmoid(Tensor({1, 4, 1, 1}, {-30.0, -1.0, 1.0, 30.0}));
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_GT(y[i], 0.0);
    EXPECT_LT(y[i], 1.0);
  }
}

TEST(Activations, SigmoidBackwardAtZero) {
  const Tensor y = sigmoid(Tensor(1, 1, 1, 1));
  const double g = sigmoid_backward(y, Tensor(1, 1, 1, 1, 1.0))[0];
  EXPECT_DOUBLE_EQ(g, 0.25);
  const double fd = oracle::derivative([](double v) { return 1.0 / (1.0 + std::exp(-v)); }, 0.0);
  EXPECT_NEAR(g, fd, 1e-9);
}

TEST(Gap, ConstantChannelAndMean) {
  EXPECT_EQ(global_avg_pool(Tensor(1, 1, 3, 2, 4.5))[0], 4.5);
  EXPECT_EQ(global_avg_pool(Tensor({1, 1, 2, 2}, {1.0, 3.0, 5.0, 7.0}))[0], 4.0);
}

TEST(Gap, BackwardSpreadsEvenly) {
  const Shape s{2, 3, 4, 5};
  const Tensor g = global_avg_pool_backward(s, Tensor(2, 3, 1, 1, 1.0));
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 1.0 / 20);
}

TEST(Gap, AddingOwnNegationGivesZeroMeanChannels) {
  auto rng = rng_for(12);
  const Tensor x = random_tensor({2, 4, 3, 3}, rng);
  Tensor neg = global_avg_pool(x);
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];
  const Tensor y = elementwise(x, neg, ElementwiseOp::add, Broadcast::per_channel);
  for (double m : oracle::channel_means(y)) EXPECT_NEAR(m, 0.0, 1e-12);
}

TEST(Elementwise, NeutralOperandsLeaveInputUnchanged) {
  auto rng = rng_for(13);
  const Tensor a = random_tensor({2, 3, 2, 2}, rng);
  const Tensor ones(2, 3, 1, 1, 1.0), zeros(2, 3, 1, 1, 0.0);
  const Tensor m = elementwise(a, ones, ElementwiseOp::mul, Broadcast::per_channel);
  const Tensor s = elementwise(a, zeros, ElementwiseOp::add, Broadcast::per_channel);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(m[i], a[i]);
    EXPECT_EQ(s[i], a[i]);
  }
}

TEST(Elementwise, MulBackwardIsUpstreamTimesOther) {
  auto rng = rng_for(14);
  const Tensor a = random_tensor({1, 2, 2, 2}, rng);
  const Tensor b({1, 2, 1, 1}, {0.2, 0.8});
  auto [ga, gb] =
      elementwise_backward(a, b, ElementwiseOp::mul, Broadcast::per_channel, Tensor(a.shape(), 1.0));
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(ga[c * 4 + i], b[c]);
  const auto rep = run_grad_probe("mul", 15);
  EXPECT_LT(rep.max_error, 1e-6) << rep.worst;
}

TEST(Elementwise, IncompatibleShapesAreConfigError) {
  EXPECT_THROW(elementwise(Tensor(1, 2, 2, 2), Tensor(1, 3, 1, 1), ElementwiseOp::mul,
                           Broadcast::per_channel),
               ConfigError);
  EXPECT_THROW(elementwise(Tensor(1, 2, 2, 2), Tensor(1, 2, 2, 1), ElementwiseOp::add),
               ConfigError);
}

TEST(Tensor, FiniteInFiniteOut) {
  auto rng = rng_for(16);
  const Tensor x = random_tensor({2, 3, 6, 6}, rng, -50.0, 50.0);
  auto conv = LayerParams::conv(2, 3, 3, true);
  randomize(conv, rng);
  auto bn = LayerParams::batchnorm(2);
  EXPECT_TRUE(conv2d(x, conv, 1, 1).all_finite());
  EXPECT_TRUE(batch_norm(conv2d(x, conv, 1, 1), bn, Mode::train).all_finite());
  EXPECT_TRUE(sigmoid(x).all_finite());
  EXPECT_TRUE(relu(x).all_finite());
  EXPECT_TRUE(max_pool2d(x, 3, 2, 1).all_finite());
}

TEST(Tensor, ShapeContracts) {
  EXPECT_THROW(Tensor(0, 1, 1, 1), ConfigError);
  EXPECT_THROW(Tensor({1, 2, 1, 1}, std::vector<double>{1.0}), ConfigError);
  Tensor t(1, 2, 1, 1);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(GradCheck, SingleLinearLayer) {
  for (std::uint64_t s = 1; s <= 5; ++s) EXPECT_LT(run_grad_probe("linear", s).max_error, 1e-8);
}

TEST(GradCheck, ReluAwayFromZero) {
  for (std::uint64_t s = 1; s <= 5; ++s) EXPECT_LT(run_grad_probe("relu", s).max_error, 1e-6);
}

TEST(GradCheck, FullCwaBlock) {
  for (std::uint64_t s = 1; s <= 5; ++s) EXPECT_LT(run_grad_probe("cwa", s).max_error, 1e-4);
}

TEST(GradCheck, DetectsAWrongGradient) {
  auto p = LayerParams::linear(2, 3);
  auto rng = rng_for(17);
  randomize(p, rng);
  Tensor in;
  FnGraph g{"broken", nullptr, nullptr, {}};
  g.fwd = [&](const Tensor& x) {
    in = x;
    return linear(x, p);
  };
  g.bwd = [&](const Tensor& gy) {
    Tensor gx = linear_backward(in, p, gy);
    gx[0] += 0.1;
    return gx;
  };
  p.collect(g.params);
  const auto rep = grad_check(g, random_tensor({2, 3, 1, 1}, rng), 1);
  EXPECT_GT(rep.max_error, 0.05);
  EXPECT_EQ(rep.worst, "input[0]");
}

TEST(GradCheck, NonFiniteOutputNamesTheOp) {
  FnGraph g{"blowup", [](const Tensor& x) {
              Tensor y = x;
              y[0] = std::numeric_limits<double>::infinity();
              return y;
            },
            [](const Tensor& gy) { return gy; }, {}};
  try {
    grad_check(g, Tensor(1, 1, 1, 2), 1, "blowup");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("blowup"), std::string::npos);
  }
}

TEST(Dropout, SurvivingFractionAndScale) {
  const Tensor m = dropout_mask({100, 100, 1, 1}, 0.5, 3);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_TRUE(m[i] == 0.0 || m[i] == 2.0);
    kept += m[i] != 0.0;
  }
  const double frac = static_cast<double>(kept) / m.size();
  EXPECT_GE(frac, 0.49);
  EXPECT_LE(frac, 0.51);
  EXPECT_THROW(dropout_mask({1, 1, 1, 1}, 1.0, 0), ConfigError);
}

TEST(MaxPool, PicksWindowMaximumAndRoutesGrad) {
  const Tensor x({1, 1, 2, 2}, {1.0, 4.0, 3.0, 2.0});
  std::vector<std::size_t> am;
  const Tensor y = max_pool2d(x, 2, 2, 0, &am);
  EXPECT_EQ(y[0], 4.0);
  const Tensor g = max_pool2d_backward(x.shape(), am, Tensor(1, 1, 1, 1, 1.0));
  EXPECT_EQ(g[1], 1.0);
  EXPECT_EQ(g[0] + g[2] + g[3], 0.0);
}
