#pragma once

// Stratum-specific treatment effects and their standard errors.
//
// Covariances live on the packed parameter vector (see model.hpp). The naive
// covariance is the inverse observed information from a central-difference
// Hessian of the weighted log-likelihood; the sandwich uses central-difference
// per-case scores aggregated within clusters. Effect SEs follow by the delta
// method.

#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stratfit/dataset.hpp"
#include "stratfit/distributions.hpp"
#include "stratfit/error.hpp"
#include "stratfit/fit.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/model.hpp"

namespace stratfit {

inline constexpr double kZ975 = 1.959963984540054;

inline double difference_step(double coordinate) { return std::max(1e-5, 1e-5 * std::abs(coordinate)); }

// Throws NumericalError unless the parameters sit strictly inside the
// parameter space (no probability within 1e-6 of 0 or 1, no active scale
// floor).
inline void require_interior(const ModelParams& params, bool scale_floor_active) {
  if (scale_floor_active) throw NumericalError("not at an interior maximum: scale floor active");
  for (Eigen::Index s = 0; s < params.probs.size(); ++s)
    if (params.probs(s) < 1e-6 || params.probs(s) > 1.0 - 1e-6)
      throw NumericalError("not at an interior maximum: probability of stratum " + std::to_string(s) +
                           " on the simplex boundary");
}

// Central-difference Hessian of the weighted log-likelihood in packed
// coordinates.
inline Eigen::MatrixXd numerical_hessian(const ModelParams& params, const Dataset& data) {
  const Eigen::VectorXd theta = pack(params);
  const Eigen::Index n = theta.size();
  Eigen::VectorXd h(n);
  for (Eigen::Index j = 0; j < n; ++j) h(j) = difference_step(theta(j));
  auto ll = [&](const Eigen::VectorXd& t) { return log_likelihood(unpack(t, params), data); };
  const double f0 = ll(theta);

  Eigen::MatrixXd hess(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h(j);
    tm(j) -= h(j);
    hess(j, j) = (ll(tp) - 2.0 * f0 + ll(tm)) / (h(j) * h(j));
    for (Eigen::Index k = 0; k < j; ++k) {
      Eigen::VectorXd pp = theta, pm = theta, mp = theta, mm = theta;
      pp(j) += h(j), pp(k) += h(k);
      pm(j) += h(j), pm(k) -= h(k);
      mp(j) -= h(j), mp(k) += h(k);
      mm(j) -= h(j), mm(k) -= h(k);
      hess(j, k) = hess(k, j) = (ll(pp) - ll(pm) - ll(mp) + ll(mm)) / (4.0 * h(j) * h(k));
    }
  }
  return hess;
}

// Central-difference gradient of the weighted log-likelihood.
inline Eigen::VectorXd numerical_gradient(const ModelParams& params, const Dataset& data) {
  const Eigen::VectorXd theta = pack(params);
  Eigen::VectorXd g(theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double h = difference_step(theta(j));
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    g(j) = (log_likelihood(unpack(tp, params), data) - log_likelihood(unpack(tm, params), data)) / (2.0 * h);
  }
  return g;
}

// Unweighted per-case scores, cases x packed parameters.
inline Eigen::MatrixXd case_scores(const ModelParams& params, const Dataset& data) {
  const Eigen::VectorXd theta = pack(params);
  Eigen::MatrixXd scores(static_cast<Eigen::Index>(data.size()), theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double h = difference_step(theta(j));
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    scores.col(j) = (case_log_likelihoods(unpack(tp, params), data) - case_log_likelihoods(unpack(tm, params), data)) / (2.0 * h);
  }
  return scores;
}

struct ParameterCovariance {
  ModelParams params;
  Eigen::MatrixXd cov;  // packed coordinates

  Eigen::VectorXd se() const { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

// (-H)^-1, failing when H is not negative definite.
inline Eigen::MatrixXd inverse_negative_hessian(const Eigen::MatrixXd& hess) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (hess + hess.transpose()));
  const Eigen::VectorXd ev = eig.eigenvalues();
  if (ev.maxCoeff() >= 0.0) {
    std::ostringstream msg;
    msg << "not at an interior maximum: Hessian eigenvalues [";
    for (Eigen::Index i = 0; i < ev.size(); ++i) msg << (i ? ", " : "") << ev(i);
    msg << "]";
    throw NumericalError(msg.str());
  }
  const Eigen::MatrixXd& v = eig.eigenvectors();
  return v * (-ev).cwiseInverse().asDiagonal() * v.transpose();
}

inline ParameterCovariance observed_information_covariance(const ModelParams& params, const Dataset& data) {
  return {params, inverse_negative_hessian(numerical_hessian(params, data))};
}

namespace detail {

inline ParameterCovariance sandwich(const ModelParams& params, const Dataset& data,
                                    const std::vector<std::int64_t>& groups) {
  const Eigen::MatrixXd bread = inverse_negative_hessian(numerical_hessian(params, data));
  const Eigen::MatrixXd scores = case_scores(params, data);
  std::map<std::int64_t, Eigen::VectorXd> totals;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double w = data.cases[i].weight;
    if (!(w > 0.0)) continue;
    auto [it, inserted] = totals.try_emplace(groups[i], Eigen::VectorXd::Zero(scores.cols()));
    it->second += w * scores.row(static_cast<Eigen::Index>(i)).transpose();
  }
  const auto g = static_cast<double>(totals.size());
  if (totals.size() < 2) throw NumericalError("sandwich variance needs at least 2 clusters");
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(scores.cols(), scores.cols());
  for (const auto& [id, u] : totals) meat.noalias() += u * u.transpose();
  meat *= g / (g - 1.0);
  return {params, bread * meat * bread};
}

}  // namespace detail

// Huber-White sandwich with scores summed within clusters and the G/(G-1)
// small-sample factor.
inline ParameterCovariance cluster_sandwich_covariance(const ModelParams& params, const Dataset& data) {
  std::vector<std::int64_t> groups;
  groups.reserve(data.size());
  for (const Case& c : data.cases) groups.push_back(c.cluster);
  return detail::sandwich(params, data, groups);
}

// Heteroskedasticity-robust sandwich: every case its own cluster.
inline ParameterCovariance robust_sandwich_covariance(const ModelParams& params, const Dataset& data) {
  std::vector<std::int64_t> groups(data.size());
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i] = static_cast<std::int64_t>(i);
  return detail::sandwich(params, data, groups);
}

inline Eigen::VectorXd observed_information_se(const FitResult& fit, const Dataset& data) {
  require_interior(fit.params, fit.scale_floor_active);
  return observed_information_covariance(fit.params, data).se();
}

inline Eigen::VectorXd cluster_sandwich_se(const FitResult& fit, const Dataset& data) {
  require_interior(fit.params, fit.scale_floor_active);
  return cluster_sandwich_covariance(fit.params, data).se();
}

// d(effect_s)/d(theta) in packed coordinates.
inline Eigen::VectorXd effect_gradient(const ModelParams& params, int stratum) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(packed_size(params));
  const Eigen::VectorXd x = design_row(params.grid, params.mean_structure, stratum);
  const auto rows = static_cast<int>(params.locations.rows());
  const int offset = packed_location_offset(params);
  g.segment(offset, rows) = -x;
  g.segment(offset + rows, rows) = x;
  return g;
}

inline double effect_se(const ParameterCovariance& cov, int stratum) {
  const Eigen::VectorXd g = effect_gradient(cov.params, stratum);
  return std::sqrt(std::max(0.0, g.dot(cov.cov * g)));
}

struct EffectRow {
  int stratum = 0;
  Stratum coords;
  bool diagonal = false;
  double effect = 0.0;                 // location_1 - location_0
  double observed_scale_effect = 0.0;  // E[Y | s, 1] - E[Y | s, 0]
  double se_naive = std::numeric_limits<double>::quiet_NaN();
  double se_cluster = std::numeric_limits<double>::quiet_NaN();

  bool significant_naive() const { return std::abs(effect) > kZ975 * se_naive; }
  bool significant_cluster() const { return std::abs(effect) > kZ975 * se_cluster; }
};

struct EffectTable {
  std::vector<EffectRow> rows;  // every stratum; diagonal rows are the estimands
  std::string naive_error;      // set when naive SEs could not be computed
  std::string cluster_error;

  const EffectRow& at(int z0, int z1) const {
    for (const auto& r : rows)
      if (r.coords.z0 == z0 && r.coords.z1 == z1) return r;
    throw std::out_of_range("no such stratum");
  }
};

// Point estimates only; SE columns are NaN.
inline EffectTable treatment_effects(const ModelParams& params) {
  EffectTable table;
  for (int s = 0; s < params.grid.size(); ++s) {
    EffectRow row;
    row.stratum = s;
    row.coords = params.grid.stratum(s);
    row.diagonal = params.grid.diagonal(s);
    row.effect = params.location(s, 1) - params.location(s, 0);
    row.observed_scale_effect =
        observed_mean({params.location(s, 1), params.scales(1), params.family}) -
        observed_mean({params.location(s, 0), params.scales(0), params.family});
    table.rows.push_back(row);
  }
  return table;
}

inline EffectTable treatment_effects(const FitResult& fit) { return treatment_effects(fit.params); }

// Effects with naive and cluster-robust SEs. A failing SE computation leaves
// its column NaN and records the reason.
inline EffectTable effect_table(const FitResult& fit, const Dataset& data) {
  EffectTable table = treatment_effects(fit);
  try {
    require_interior(fit.params, fit.scale_floor_active);
    const auto cov = observed_information_covariance(fit.params, data);
    for (auto& row : table.rows) row.se_naive = effect_se(cov, row.stratum);
  } catch (const NumericalError& e) {
    table.naive_error = e.what();
  }
  try {
    require_interior(fit.params, fit.scale_floor_active);
    const auto cov = cluster_sandwich_covariance(fit.params, data);
    for (auto& row : table.rows) row.se_cluster = effect_se(cov, row.stratum);
  } catch (const NumericalError& e) {
    table.cluster_error = e.what();
  }
  return table;
}

}  // namespace stratfit
