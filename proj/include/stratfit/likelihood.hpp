#pragma once

// Weighted observed-data likelihood of the principal-strata mixture and the
// E-step posterior over strata.
//
// A treated case observed at level z mixes the strata (z0, z) for every z0;
// a control case observed at level z mixes (z, z1) for every z1. Each case's
// log mixture density is multiplied by its weight.

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stratfit/dataset.hpp"
#include "stratfit/distributions.hpp"
#include "stratfit/error.hpp"
#include "stratfit/model.hpp"

namespace stratfit {

// Rows are cases, columns are strata. Strata incompatible with a case's
// observed cell carry exactly zero.
using PosteriorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// Per-stratum log joint terms log p_s + log f(y; theta_{s,t}) with the
// location table and log scales hoisted out of the case loop.
class MixtureEvaluator {
 public:
  explicit MixtureEvaluator(const ModelParams& params)
      : params_(params), locations_(params.location_table()) {
    log_probs_.resize(params.grid.size());
    for (int s = 0; s < params.grid.size(); ++s) log_probs_[s] = std::log(params.probs(s));
    log_scales_ = {std::log(params.scales(0)), std::log(params.scales(1))};
    for (int arm = 0; arm < 2; ++arm) normal_const_[arm] = -log_scales_[arm] - normal::kLogSqrt2Pi;
    inv_scales_ = {1.0 / params.scales(0), 1.0 / params.scales(1)};
    tobit_ = params.family == ComponentFamily::Tobit;
  }

  const std::vector<int>& compatible(const Case& c) const {
    return params_.grid.compatible(c.arm, c.z);
  }

  double log_joint(const Case& c, int s) const {
    if (log_probs_[s] == -std::numeric_limits<double>::infinity()) return log_probs_[s];
    if (tobit_ && c.y == 0.0) return log_probs_[s] + normal::log_cdf(-locations_(s, c.arm) * inv_scales_[c.arm]);
    const double r = (c.y - locations_(s, c.arm)) * inv_scales_[c.arm];
    return log_probs_[s] + normal_const_[c.arm] - 0.5 * r * r;
  }

  // Fills terms with exp(log joint - max log joint) over the compatible
  // strata (so terms / sum are the posteriors) and returns the log-sum-exp.
  // Throws on a degenerate (zero-probability) mixture.
  double log_mixture(const Case& c, std::size_t i, std::array<double, 16>& terms, double& sum) const {
    const auto& strata = compatible(c);
    double max_term = -std::numeric_limits<double>::infinity();
    std::size_t arg_max = 0;
    for (std::size_t k = 0; k < strata.size(); ++k) {
      terms[k] = log_joint(c, strata[k]);
      if (terms[k] > max_term) max_term = terms[k], arg_max = k;
    }
    if (!std::isfinite(max_term)) throw NumericalError("degenerate mixture at case " + std::to_string(i));
    sum = 1.0;
    for (std::size_t k = 0; k < strata.size(); ++k) {
      terms[k] = k == arg_max ? 1.0 : std::exp(terms[k] - max_term);
      if (k != arg_max) sum += terms[k];
    }
    return max_term + std::log(sum);
  }

 private:
  const ModelParams& params_;
  Eigen::MatrixXd locations_;
  std::vector<double> log_probs_;
  std::array<double, 2> log_scales_{};
  std::array<double, 2> normal_const_{};
  std::array<double, 2> inv_scales_{};
  bool tobit_ = false;
};

}  // namespace detail

struct Expectation {
  PosteriorMatrix posterior;
  double loglik = 0.0;
};

// E-step and weighted log-likelihood in one pass. Posteriors are computed in
// log space with max-subtraction.
inline Expectation expectation(const ModelParams& params, const Dataset& data, bool with_posterior = true) {
  detail::MixtureEvaluator eval(params);
  Expectation out;
  if (with_posterior) out.posterior = PosteriorMatrix::Zero(static_cast<Eigen::Index>(data.size()), params.grid.size());
  std::array<double, 16> terms{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Case& c = data.cases[i];
    double sum = 0.0;
    const double lm = eval.log_mixture(c, i, terms, sum);
    if (c.weight > 0.0) out.loglik += c.weight * lm;
    if (with_posterior) {
      const auto& strata = eval.compatible(c);
      const double inv = 1.0 / sum;
      for (std::size_t k = 0; k < strata.size(); ++k)
        out.posterior(static_cast<Eigen::Index>(i), strata[k]) = terms[k] * inv;
    }
  }
  return out;
}

inline double log_likelihood(const ModelParams& params, const Dataset& data) {
  return expectation(params, data, false).loglik;
}

inline PosteriorMatrix e_step(const ModelParams& params, const Dataset& data) {
  return expectation(params, data, true).posterior;
}

// Unweighted log mixture density of every case.
inline Eigen::VectorXd case_log_likelihoods(const ModelParams& params, const Dataset& data) {
  detail::MixtureEvaluator eval(params);
  Eigen::VectorXd out(static_cast<Eigen::Index>(data.size()));
  std::array<double, 16> terms{};
  double sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = eval.log_mixture(data.cases[i], i, terms, sum);
  return out;
}

}  // namespace stratfit
