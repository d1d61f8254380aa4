#pragma once

// M-step of the principal-strata EM.
//
// Strata probabilities pool both arms (membership does not depend on the arm
// received). Normal components have closed-form updates; the tobit update
// maximizes the posterior-weighted censored log-likelihood per arm by damped
// Newton on (location coefficients, log scale), with step-halving so the
// expected complete-data log-likelihood never decreases.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stratfit/dataset.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/model.hpp"
#include "stratfit/normal.hpp"

namespace stratfit {

inline constexpr double kFrozenStratumWeight = 1e-8;

struct MStepOptions {
  // Lower bounds on the per-arm scales; see default_scale_floors.
  Eigen::Vector2d scale_floor{0.0, 0.0};
  int max_newton_iterations = 100;
};

struct MStepResult {
  ModelParams params;
  bool scale_floor_active = false;
  // (stratum, arm) pairs whose location was held at its previous value.
  std::vector<std::pair<int, int>> frozen;
};

// 1e-3 times the weighted outcome SD of each arm.
inline Eigen::Vector2d default_scale_floors(const Dataset& data) {
  Eigen::Vector2d floor;
  for (int arm = 0; arm < 2; ++arm) {
    const double sd = weighted_arm_moments(data, arm).second;
    floor(arm) = 1e-3 * (sd > 0.0 ? sd : 1.0);
  }
  return floor;
}

namespace detail {

// Posterior-weighted sufficient statistics of one arm, per stratum.
struct ArmStats {
  Eigen::VectorXd weight;    // all cases
  Eigen::VectorXd censored;  // y == 0 (tobit only)
  Eigen::VectorXd positive;  // weight of cases entering the density part
  Eigen::VectorXd sum_y;
  Eigen::VectorXd sum_yy;
  double arm_weight = 0.0;

  explicit ArmStats(int strata)
      : weight(Eigen::VectorXd::Zero(strata)),
        censored(Eigen::VectorXd::Zero(strata)),
        positive(Eigen::VectorXd::Zero(strata)),
        sum_y(Eigen::VectorXd::Zero(strata)),
        sum_yy(Eigen::VectorXd::Zero(strata)) {}
};

inline std::array<ArmStats, 2> collect_stats(const PosteriorMatrix& post, const Dataset& data,
                                             const ModelParams& shape) {
  const int strata = shape.grid.size();
  std::array<ArmStats, 2> stats{ArmStats(strata), ArmStats(strata)};
  const bool tobit = shape.family == ComponentFamily::Tobit;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Case& c = data.cases[i];
    if (!(c.weight > 0.0)) continue;
    ArmStats& st = stats[c.arm];
    st.arm_weight += c.weight;
    for (int s : shape.grid.compatible(c.arm, c.z)) {
      const double w = c.weight * post(static_cast<Eigen::Index>(i), s);
      st.weight(s) += w;
      if (tobit && c.y == 0.0) {
        st.censored(s) += w;
      } else {
        st.positive(s) += w;
        st.sum_y(s) += w * c.y;
        st.sum_yy(s) += w * c.y * c.y;
      }
    }
  }
  return stats;
}

inline Eigen::MatrixXd design_matrix(const ModelParams& shape) {
  const int strata = shape.grid.size();
  Eigen::MatrixXd x(strata, location_rows(shape.grid, shape.mean_structure));
  for (int s = 0; s < strata; ++s) x.row(s) = design_row(shape.grid, shape.mean_structure, s).transpose();
  return x;
}

// Posterior-weighted tobit objective of one arm in (beta, tau = log scale).
class TobitArmObjective {
 public:
  TobitArmObjective(const ArmStats& stats, Eigen::MatrixXd design)
      : stats_(stats), design_(std::move(design)) {}

  int dim() const { return static_cast<int>(design_.cols()) + 1; }

  double value(const Eigen::VectorXd& theta) const {
    const auto [beta, tau] = split(theta);
    const double scale = std::exp(tau);
    const Eigen::VectorXd eta = design_ * beta;
    double q = 0.0;
    for (Eigen::Index s = 0; s < eta.size(); ++s) {
      if (stats_.censored(s) > 0.0) q += stats_.censored(s) * normal::log_cdf(-eta(s) / scale);
      if (stats_.positive(s) > 0.0) {
        const double ss = stats_.sum_yy(s) - 2.0 * eta(s) * stats_.sum_y(s) + eta(s) * eta(s) * stats_.positive(s);
        q += -stats_.positive(s) * (tau + normal::kLogSqrt2Pi) - 0.5 * ss / (scale * scale);
      }
    }
    return q;
  }

  void derivatives(const Eigen::VectorXd& theta, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) const {
    const auto [beta, tau] = split(theta);
    const double scale = std::exp(tau);
    const double var = scale * scale;
    const Eigen::Index r = design_.cols();
    const Eigen::VectorXd eta = design_ * beta;
    grad = Eigen::VectorXd::Zero(dim());
    hess = Eigen::MatrixXd::Zero(dim(), dim());
    for (Eigen::Index s = 0; s < eta.size(); ++s) {
      double g_eta = 0.0, g_tau = 0.0, h_ee = 0.0, h_et = 0.0, h_tt = 0.0;
      const double cens = stats_.censored(s);
      if (cens > 0.0) {
        const double a = -eta(s) / scale;
        const double lambda = normal::inverse_mills(a);
        const double dlambda = -lambda * (a + lambda);
        g_eta += -cens * lambda / scale;
        g_tau += -cens * lambda * a;
        h_ee += cens * dlambda / var;
        h_et += cens * (lambda + a * dlambda) / scale;
        h_tt += cens * (lambda * a + dlambda * a * a);
      }
      const double pos = stats_.positive(s);
      if (pos > 0.0) {
        const double resid = stats_.sum_y(s) - eta(s) * pos;
        const double ss = stats_.sum_yy(s) - 2.0 * eta(s) * stats_.sum_y(s) + eta(s) * eta(s) * pos;
        g_eta += resid / var;
        g_tau += -pos + ss / var;
        h_ee += -pos / var;
        h_et += -2.0 * resid / var;
        h_tt += -2.0 * ss / var;
      }
      const Eigen::VectorXd x = design_.row(s).transpose();
      grad.head(r) += g_eta * x;
      grad(r) += g_tau;
      hess.topLeftCorner(r, r) += h_ee * x * x.transpose();
      hess.col(r).head(r) += h_et * x;
      hess.row(r).head(r) += h_et * x.transpose();
      hess(r, r) += h_tt;
    }
  }

 private:
  std::pair<Eigen::VectorXd, double> split(const Eigen::VectorXd& theta) const {
    const Eigen::Index r = design_.cols();
    return {theta.head(r), theta(r)};
  }

  const ArmStats& stats_;
  Eigen::MatrixXd design_;
};

// Damped Newton ascent from theta. Coordinates flagged in `fixed` are held.
// Returns true when the log-scale coordinate ended on its lower bound.
inline bool maximize_tobit_arm(const TobitArmObjective& objective, Eigen::VectorXd& theta,
                               const std::vector<bool>& fixed, double min_tau, int max_iterations) {
  const int n = objective.dim();
  double current = objective.value(theta);
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  for (int iter = 0; iter < max_iterations; ++iter) {
    objective.derivatives(theta, grad, hess);
    for (int j = 0; j < n; ++j)
      if (fixed[static_cast<std::size_t>(j)]) {
        grad(j) = 0.0;
        hess.row(j).setZero();
        hess.col(j).setZero();
        hess(j, j) = -1.0;
      }
    if (grad.cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + std::abs(current))) break;

    // Levenberg damping until -H + mu*I is positive definite.
    Eigen::MatrixXd neg_h = -hess;
    Eigen::VectorXd step;
    double mu = 0.0;
    const double diag_scale = std::max(1e-12, neg_h.diagonal().cwiseAbs().maxCoeff());
    for (int attempt = 0; attempt < 40; ++attempt) {
      Eigen::LLT<Eigen::MatrixXd> llt(neg_h + mu * Eigen::MatrixXd::Identity(n, n));
      if (llt.info() == Eigen::Success) {
        step = llt.solve(grad);
        break;
      }
      mu = mu == 0.0 ? 1e-8 * diag_scale : mu * 10.0;
    }
    if (step.size() == 0) step = grad / diag_scale;

    bool improved = false;
    double alpha = 1.0;
    for (int halving = 0; halving < 60; ++halving, alpha *= 0.5) {
      Eigen::VectorXd trial = theta + alpha * step;
      trial(n - 1) = std::max(trial(n - 1), min_tau);
      const double value = objective.value(trial);
      if (std::isfinite(value) && value >= current) {
        const double change = (trial - theta).cwiseAbs().maxCoeff();
        theta = trial;
        improved = value > current || change > 0.0;
        current = value;
        break;
      }
    }
    if (!improved || (alpha * step).cwiseAbs().maxCoeff() < 1e-13 * (1.0 + theta.cwiseAbs().maxCoeff()))
      break;
  }
  return theta(n - 1) <= min_tau;
}

}  // namespace detail

// One M-step. `previous` supplies grid, family, mean structure and the
// values held for strata whose posterior weight in an arm is below 1e-8.
inline MStepResult m_step(const PosteriorMatrix& posterior, const Dataset& data, const ModelParams& previous,
                          const MStepOptions& options = {}) {
  MStepResult out{previous, false, {}};
  ModelParams& next = out.params;
  const int strata = previous.grid.size();
  const auto stats = detail::collect_stats(posterior, data, previous);

  const double total = stats[0].arm_weight + stats[1].arm_weight;
  if (!(total > 0.0)) throw NumericalError("m_step: no positive case weight");
  for (int s = 0; s < strata; ++s) next.probs(s) = (stats[0].weight(s) + stats[1].weight(s)) / total;
  next.probs /= next.probs.sum();

  const Eigen::MatrixXd design = detail::design_matrix(previous);
  for (int arm = 0; arm < 2; ++arm) {
    const detail::ArmStats& st = stats[arm];
    for (int s = 0; s < strata; ++s)
      if (st.weight(s) < kFrozenStratumWeight) out.frozen.emplace_back(s, arm);
    if (!(st.arm_weight > 0.0)) continue;

    if (previous.family == ComponentFamily::Normal) {
      if (previous.mean_structure == MeanStructure::Saturated) {
        for (int s = 0; s < strata; ++s)
          if (st.weight(s) >= kFrozenStratumWeight) next.locations(s, arm) = st.sum_y(s) / st.weight(s);
      } else {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(design.cols(), design.cols());
        Eigen::VectorXd b = Eigen::VectorXd::Zero(design.cols());
        for (int s = 0; s < strata; ++s) {
          a += st.weight(s) * design.row(s).transpose() * design.row(s);
          b += st.sum_y(s) * design.row(s).transpose();
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
        if (lu.rank() == a.rows()) next.locations.col(arm) = lu.solve(b);
      }
      double rss = 0.0;
      for (int s = 0; s < strata; ++s) {
        const double loc = next.location(s, arm);
        rss += st.sum_yy(s) - 2.0 * loc * st.sum_y(s) + loc * loc * st.weight(s);
      }
      double scale = std::sqrt(std::max(0.0, rss) / st.arm_weight);
      if (scale < options.scale_floor(arm)) {
        scale = options.scale_floor(arm);
        out.scale_floor_active = true;
      }
      next.scales(arm) = scale;
    } else {
      detail::TobitArmObjective objective(st, design);
      Eigen::VectorXd theta(objective.dim());
      theta.head(design.cols()) = previous.locations.col(arm);
      const double min_tau = options.scale_floor(arm) > 0.0 ? std::log(options.scale_floor(arm))
                                                            : -std::numeric_limits<double>::infinity();
      theta(design.cols()) = std::max(std::log(previous.scales(arm)), min_tau);
      std::vector<bool> fixed(static_cast<std::size_t>(objective.dim()), false);
      if (previous.mean_structure == MeanStructure::Saturated)
        for (int s = 0; s < strata; ++s) fixed[static_cast<std::size_t>(s)] = st.weight(s) < kFrozenStratumWeight;
      if (detail::maximize_tobit_arm(objective, theta, fixed, min_tau, options.max_newton_iterations))
        out.scale_floor_active = true;
      next.locations.col(arm) = theta.head(design.cols());
      next.scales(arm) = std::exp(theta(design.cols()));
    }
  }
  return out;
}

}  // namespace stratfit
