#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mca/errors.hpp"
#include "mca/moments.hpp"
#include "oracles.hpp"

using namespace mca;

namespace {

TensorD channel(const std::vector<double>& v) { return TensorD(Shape{1, 1, 1, v.size()}, v); }

double lib_moment(const std::vector<double>& v, int k) {
  return k == 1 ? moment1(channel(v)).item() : central_moment(channel(v), k).item();
}

/// Mixed generator: gaussian, heavy offset, skewed, two-point and near-constant channels.
std::vector<double> random_channel(std::mt19937_64& rng) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 400)(rng);
  const int kind = std::uniform_int_distribution<int>(0, 4)(rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double offset = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
  std::vector<double> v(n);
  for (auto& x : v) {
    switch (kind) {
      case 0: x = gauss(rng); break;
      case 1: x = offset + 0.01 * gauss(rng); break;
      case 2: x = expo(rng); break;
      case 3: x = (rng() & 1) ? 1.0 : 0.0; break;
      default: x = offset + 1e-6 * gauss(rng); break;
    }
  }
  return v;
}

}  // namespace

TEST(Moments, FixedColumns) {
  // Expected values computed by the brute-force oracle.
  const std::vector<double> a{1, 2, 3, 4}, b{0, 0, 0, 4};
  EXPECT_NEAR(static_cast<double>(oracle::mean(a)), 2.5, 1e-15);
  EXPECT_NEAR(static_cast<double>(oracle::central_moment(a, 2)), 1.25, 1e-15);
  EXPECT_NEAR(static_cast<double>(oracle::central_moment(b, 3)), 6.0, 1e-15);

  EXPECT_EQ(lib_moment(a, 1), 2.5);
  EXPECT_EQ(lib_moment(a, 2), 1.25);
  EXPECT_EQ(lib_moment(a, 3), 0.0);
  EXPECT_EQ(lib_moment(b, 3), 6.0);
}

TEST(Moments, ConstantChannelIsExactlyZero) {
  const std::vector<double> c(37, 0.1);
  EXPECT_EQ(lib_moment(c, 1), 0.1);
  EXPECT_EQ(lib_moment(c, 2), 0.0);
  EXPECT_EQ(lib_moment(c, 3), 0.0);
  const Tensor cf(Shape{1, 1, 3, 3}, 0.3f);
  EXPECT_EQ(central_moment(cf, 3).item(), 0.0f);
}

TEST(Moments, UnsupportedOrderRejected) {
  EXPECT_THROW(central_moment(channel({1, 2}), 4), ConfigError);
  EXPECT_THROW(central_moment(channel({1, 2}), 1), ConfigError);
}

TEST(Moments, PerChannelLayout) {
  // Channel c of sample n holds c*10 + n + {0,1}: mean c*10 + n + 0.5, variance 0.25.
  std::vector<double> v;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 2; ++i) v.push_back(c * 10 + n + i);
  const TensorD x(Shape{2, 3, 1, 2}, v);
  const auto m1 = moment1(x), m2 = central_moment(x, 2);
  ASSERT_EQ(m1.shape(), (Shape{2, 3}));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(m1.values()[n * 3 + c], c * 10 + n + 0.5);
      EXPECT_EQ(m2.values()[n * 3 + c], 0.25);
    }
}

TEST(MomentsProperty, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto v = random_channel(rng);
    for (int k = 1; k <= 3; ++k) {
      const long double ref = k == 1 ? oracle::mean(v) : oracle::central_moment(v, k);
      const long double scale = k == 1 ? std::fabs(oracle::mean(v)) + oracle::absolute_moment(v, 1)
                                       : oracle::absolute_moment(v, k);
      const double err = std::fabs(static_cast<long double>(lib_moment(v, k)) - ref);
      ASSERT_LE(err, 1e-12 * static_cast<double>(scale) + 1e-300) << "trial " << trial << " k " << k;
    }
  }
}

TEST(MomentsProperty, ShiftInvarianceAndScaleEquivariance) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> shift_d(-100.0, 100.0);
  std::uniform_int_distribution<int> lambda_d(1, 32);
  // Samples on a 2^-30 grid, shifts on a 2^-10 grid and factors on a 1/8
  // grid keep x + c and lambda x exact, so any difference comes from the
  // moment computation itself.
  const double grid = std::ldexp(1.0, -30);
  for (int trial = 0; trial < 500; ++trial) {
    auto v = random_channel(rng);
    for (auto& x : v) x = std::round(x / grid) * grid;
    const double c = std::round(std::ldexp(shift_d(rng), 10)) / 1024.0;
    const double lambda = (rng() & 1 ? 1.0 : -1.0) * lambda_d(rng) / 8.0;
    std::vector<double> shifted(v), scaled(v);
    for (auto& x : shifted) x += c;
    for (auto& x : scaled) x *= lambda;
    for (int k = 2; k <= 3; ++k) {
      const double base = lib_moment(v, k);
      const double size = static_cast<double>(oracle::absolute_moment(v, k));
      EXPECT_NEAR(lib_moment(shifted, k), base, 1e-10 * size) << trial;
      EXPECT_NEAR(lib_moment(scaled, k), std::pow(lambda, k) * base, 1e-10 * std::pow(std::abs(lambda), k) * size)
          << trial;
    }
  }
}

TEST(Moments, AggregateStacksRequestedOrders) {
  const TensorD x(Shape{1, 2, 1, 4}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 4});
  const int orders[] = {1, 3};
  const auto m = aggregate(x, orders);
  ASSERT_EQ(m.values.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(m.values.values()[0], 2.5);
  EXPECT_EQ(m.values.values()[1], 1.0);
  EXPECT_EQ(m.values.values()[2], 0.0);
  EXPECT_EQ(m.values.values()[3], 6.0);
  const int bad1[] = {2, 1}, bad2[] = {4}, bad3[] = {1, 1};
  EXPECT_THROW(aggregate(x, bad1), ConfigError);
  EXPECT_THROW(aggregate(x, bad2), ConfigError);
  EXPECT_THROW(aggregate(x, bad3), ConfigError);
  EXPECT_THROW(aggregate(x, std::span<const int>()), ConfigError);
}

TEST(Moments, SampleMomentsScalar) {
  const std::vector<double> v{0, 0, 0, 4};
  const auto m = sample_moments(v);
  EXPECT_EQ(m.mean, 1.0);
  EXPECT_EQ(m.m2, 3.0);
  EXPECT_EQ(m.m3, 6.0);
}

TEST(Moments, EmaScalar) {
  // Bernoulli(1/2) in one dimension: mean 0.5, variance 0.25, third moment 0.
  const std::vector<double> v{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(ema_scalar(v, 1, EmaConfig{2, {1.0, 1.0}}), 0.75);
  EXPECT_DOUBLE_EQ(ema_scalar(v, 1, EmaConfig{1, {0.5}}), 0.25);
  // Two dimensions: means (0.5, 1) -> norm sqrt(1.25); variances (0.25, 0) -> 0.25.
  const std::vector<double> w{0, 1, 1, 1};
  EXPECT_DOUBLE_EQ(ema_scalar(w, 2, EmaConfig{2, {1.0, 1.0}}), std::sqrt(1.25) + 0.25);
  EXPECT_THROW(ema_scalar(v, 1, EmaConfig{2, {1.0}}), ConfigError);
  EXPECT_THROW(ema_scalar(v, 1, EmaConfig{2, {1.0, 0.0}}), ConfigError);
}

TEST(Bound, ClosedFormValues) {
  for (int k = 1; k <= 3; ++k) {
    for (long dims : {1L, 4L, 100L}) {
      EXPECT_NEAR(moment_norm_bound(k, dims), oracle::norm_bound(k, static_cast<double>(dims)), 1e-15 * std::sqrt(dims));
    }
  }
  EXPECT_NEAR(moment_norm_bound(2, 1), 0.273148, 5e-7);
  EXPECT_THROW(moment_norm_bound(0, 1), ConfigError);
}

TEST(Bound, BernoulliHalfExtremal) {
  std::vector<double> v;
  for (int i = 0; i < 1000; ++i) v.push_back(i % 2);
  const auto b = check_bound(v, 1, 0.0, 1.0, 2);
  EXPECT_TRUE(b.holds);
  EXPECT_EQ(b.moment_norm, 0.25);
  EXPECT_NEAR(b.margin, 0.0231, 1e-4);
}

TEST(BoundProperty, NeverViolatedOnUnitInterval) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 3000; ++trial) {
    const std::size_t dims = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const std::size_t draws = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
    const double p = u(rng);
    const int kind = trial % 3;
    std::vector<double> s(dims * draws);
    for (auto& x : s) x = kind == 0 ? u(rng) : kind == 1 ? (u(rng) < p ? 1.0 : 0.0) : std::pow(u(rng), 4.0);
    for (int k = 1; k <= 3; ++k) ASSERT_TRUE(check_bound(s, dims, 0.0, 1.0, k).holds) << trial << " k " << k;
  }
}

TEST(Bound, RejectsOutOfRangeSamples) {
  const std::vector<double> v{0.2, 1.5};
  EXPECT_THROW(check_bound(v, 1, 0.0, 1.0, 2), ConfigError);
  EXPECT_THROW(check_bound(v, 1, 1.0, 1.0, 2), ConfigError);
}
