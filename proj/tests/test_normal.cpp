#include <cmath>
#include <random>

#include <boost/math/special_functions/erf.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <gtest/gtest.h>

#include "stratfit/normal.hpp"

namespace sn = stratfit::normal;
using Big = boost::multiprecision::cpp_bin_float_50;

namespace {

Big oracle_cdf(double x) {
  return boost::math::erfc(-Big(x) / boost::multiprecision::sqrt(Big(2))) / 2;
}

double rel_err(double got, const Big& want) {
  if (want == 0) return std::abs(got);
  return static_cast<double>(boost::multiprecision::abs((Big(got) - want) / want));
}

// Relative bound, widened by one unit of the subnormal spacing.
::testing::AssertionResult close(double got, const Big& want, double rel) {
  const Big err = boost::multiprecision::abs(Big(got) - want);
  if (err <= rel * boost::multiprecision::abs(want) + std::numeric_limits<double>::denorm_min())
    return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "relative error " << rel_err(got, want);
}

}  // namespace

TEST(NormalCdf, MatchesHighPrecisionOracleOnGrid) {
  for (double x = -38.0; x <= 8.0; x += 0.0625) {
    const Big want = oracle_cdf(x);
    EXPECT_TRUE(close(sn::cdf(x), want, 2e-14)) << "x=" << x;
    EXPECT_LT(std::abs(sn::cdf(x) - static_cast<double>(want)), 1e-15) << "x=" << x;
  }
}

TEST(NormalCdf, RandomPointsAcrossBranchBoundaries) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  for (int i = 0; i < 2000; ++i) {
    const double x = u(rng);
    EXPECT_LT(rel_err(sn::cdf(x), oracle_cdf(x)), 2e-14) << "x=" << x;
  }
  for (double x : {-2.0, std::nextafter(-2.0, -4.0), std::nextafter(-2.0, 0.0), 2.0, std::nextafter(2.0, 4.0)})
    EXPECT_LT(rel_err(sn::cdf(x), oracle_cdf(x)), 2e-14) << "x=" << x;
}

TEST(NormalCdf, LogCdfKeepsRelativeAccuracyInLowerTail) {
  for (double x : {-35.0, -20.0, -10.0, -5.0, -3.5, -1.0, 0.0, 1.0, 4.0, 7.0}) {
    const Big want = boost::multiprecision::log(oracle_cdf(x));
    EXPECT_LT(rel_err(sn::log_cdf(x), want), 1e-13) << "x=" << x;
  }
}

TEST(NormalCdf, SymmetryAndLimits) {
  for (double x = 0.0; x < 8.0; x += 0.37) EXPECT_NEAR(sn::cdf(x) + sn::cdf(-x), 1.0, 1e-15);
  EXPECT_EQ(sn::cdf(-50.0), 0.0);
  EXPECT_EQ(sn::cdf(50.0), 1.0);
  EXPECT_EQ(sn::cdf(0.0), 0.5);
  EXPECT_TRUE(std::isnan(sn::cdf(std::nan(""))));
  EXPECT_TRUE(std::isfinite(sn::log_cdf(-60.0)));
}

TEST(NormalCdf, InverseMillsRatio) {
  for (double x : {-30.0, -8.0, -3.0, -0.5, 0.0, 2.0, 6.0}) {
    const Big phi = boost::multiprecision::exp(-Big(x) * x / 2) / boost::multiprecision::sqrt(2 * boost::math::constants::pi<Big>());
    EXPECT_LT(rel_err(sn::inverse_mills(x), phi / oracle_cdf(x)), 1e-13) << "x=" << x;
  }
}

TEST(NormalPdf, Density) {
  EXPECT_DOUBLE_EQ(sn::pdf(0.0), sn::kInvSqrt2Pi);
  EXPECT_NEAR(sn::log_pdf(1.3), std::log(sn::pdf(1.3)), 1e-15);
}
