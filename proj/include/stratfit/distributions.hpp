#pragma once

// Component densities (normal and censored-at-zero tobit) and the random
// generators used by the simulation harness.

#include <algorithm>
#include <cmath>
#include <random>
#include <variant>

#include "stratfit/error.hpp"
#include "stratfit/model.hpp"
#include "stratfit/normal.hpp"

namespace stratfit {

struct ComponentParams {
  double location = 0.0;
  double scale = 1.0;
  ComponentFamily family = ComponentFamily::Normal;
};

// Hot-path form: log_scale is passed in so callers can hoist it.
inline double component_log_density(double y, double location, double scale, double log_scale,
                                    ComponentFamily family) {
  if (family == ComponentFamily::Tobit && y == 0.0) return normal::log_cdf(-location / scale);
  const double r = (y - location) / scale;
  return -log_scale - normal::kLogSqrt2Pi - 0.5 * r * r;
}

inline double log_density(double y, const ComponentParams& cp) {
  if (!(cp.scale > 0.0)) throw InputError("component scale must be positive");
  if (cp.family == ComponentFamily::Tobit && y < 0.0)
    throw InputError("negative outcome under censored family");
  return component_log_density(y, cp.location, cp.scale, std::log(cp.scale), cp.family);
}

// Mean of the observed outcome: the location for the normal family, and
// E[max(0, Y*)] = eta * Phi(eta/zeta) + zeta * phi(eta/zeta) for the tobit.
inline double observed_mean(const ComponentParams& cp) {
  if (cp.family == ComponentFamily::Normal) return cp.location;
  const double u = cp.location / cp.scale;
  return cp.location * normal::cdf(u) + cp.scale * normal::pdf(u);
}

template <class Rng>
double sample(const ComponentParams& cp, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double latent = cp.location + cp.scale * gauss(rng);
  return cp.family == ComponentFamily::Tobit ? std::max(0.0, latent) : latent;
}

// Student-t with df degrees of freedom, rescaled to unit variance.
struct HeavyTail {
  double df = 3.0;
};

// Shifted log-normal standardized to mean 0 and variance 1 with the given
// skewness (negative values mirror the distribution).
struct Skewed {
  double skewness = 1.0;
};

using Misspecification = std::variant<HeavyTail, Skewed>;

namespace detail {

// Skewness of a log-normal with log-scale sigma.
inline double lognormal_skewness(double sigma) {
  const double u = std::expm1(sigma * sigma);
  return (u + 3.0) * std::sqrt(u);
}

// Inverse of lognormal_skewness by bisection.
inline double lognormal_sigma_for_skewness(double skewness) {
  double lo = 0.0;
  double hi = 1.0;
  while (lognormal_skewness(hi) < skewness) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (lognormal_skewness(mid) < skewness ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Draw with mean `location` and SD `scale` under a non-normal error law.
// The family of cp is honoured (tobit censors the draw at zero).
template <class Rng>
double sample_misspecified(const ComponentParams& cp, const Misspecification& shape, Rng& rng) {
  double standardized = 0.0;
  if (const auto* ht = std::get_if<HeavyTail>(&shape)) {
    if (!(ht->df > 2.0)) throw InputError("heavy-tail df must exceed 2");
    std::student_t_distribution<double> t(ht->df);
    standardized = t(rng) / std::sqrt(ht->df / (ht->df - 2.0));
  } else {
    const double skew = std::get<Skewed>(shape).skewness;
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double z = gauss(rng);
    if (skew == 0.0) {
      standardized = z;
    } else {
      const double sigma = detail::lognormal_sigma_for_skewness(std::abs(skew));
      const double s2 = sigma * sigma;
      const double mean = std::exp(0.5 * s2);
      const double sd = std::sqrt(std::expm1(s2) * std::exp(s2));
      standardized = (std::exp(sigma * z) - mean) / sd;
      if (skew < 0.0) standardized = -standardized;
    }
  }
  const double value = cp.location + cp.scale * standardized;
  return cp.family == ComponentFamily::Tobit ? std::max(0.0, value) : value;
}

}  // namespace stratfit
