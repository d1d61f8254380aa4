#pragma once

// Standard normal density and distribution function.
//
// Phi is evaluated with Marsaglia's Taylor series on [-2, 2] and with a
// Lentz continued fraction for the Mills ratio beyond that, so both Phi and
// log Phi keep full relative accuracy deep into the lower tail. Absolute
// error is below 1e-15 everywhere.

#include <cmath>
#include <limits>

namespace stratfit::normal {

inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934381868;
inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736405617640;

inline double pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

inline double log_pdf(double x) { return -kLogSqrt2Pi - 0.5 * x * x; }

namespace detail {

inline constexpr double kSeriesLimit = 2.0;

// Mills ratio Q(x) / phi(x) for x >= kSeriesLimit, from
//   Q(x) / phi(x) = 1 / (x + 1/(x + 2/(x + 3/(x + ...))))
inline double mills_ratio(double x) {
  constexpr double tiny = 1e-300;
  double f = x;
  double c = x;
  double d = 0.0;
  for (int n = 1; n < 2000; ++n) {
    const double a = n;
    d = x + a * d;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    c = x + a / c;
    if (std::abs(c) < tiny) c = tiny;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return 1.0 / f;
}

// (Phi(x) - 1/2) / phi(x) = x + x^3/3 + x^5/(3*5) + ...
inline double central_series(double x) {
  const double x2 = x * x;
  double term = x;
  double sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= x2 / (2 * n + 1);
    sum += term;
    if (std::abs(term) <= 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

}  // namespace detail

inline double cdf(double x) {
  if (std::isnan(x)) return x;
  if (x < -detail::kSeriesLimit) {
    if (x < -40.0) return 0.0;
    return pdf(x) * detail::mills_ratio(-x);
  }
  if (x > detail::kSeriesLimit) {
    if (x > 40.0) return 1.0;
    return 1.0 - pdf(x) * detail::mills_ratio(x);
  }
  return 0.5 + pdf(x) * detail::central_series(x);
}

inline double log_cdf(double x) {
  if (std::isnan(x)) return x;
  if (x < -detail::kSeriesLimit) {
    return log_pdf(x) + std::log(detail::mills_ratio(-x));
  }
  if (x > detail::kSeriesLimit) {
    if (x > 40.0) return 0.0;
    return std::log1p(-pdf(x) * detail::mills_ratio(x));
  }
  return std::log(0.5 + pdf(x) * detail::central_series(x));
}

// phi(x) / Phi(x), finite for all x.
inline double inverse_mills(double x) {
  if (x < -detail::kSeriesLimit) return 1.0 / detail::mills_ratio(-x);
  return std::exp(log_pdf(x) - log_cdf(x));
}

}  // namespace stratfit::normal
