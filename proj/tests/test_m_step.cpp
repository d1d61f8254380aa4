#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/m_step.hpp"

using namespace stratfit;

namespace {

ModelParams truth_four_strata(ComponentFamily family) {
  ModelParams p = ModelParams::zeros(StrataGrid(2), family);
  p.probs << 0.4, 0.3, 0.2, 0.1;
  p.locations.col(0) << 0.5, 3.0, -1.0, 1.5;
  p.locations.col(1) << 1.5, 4.0, 0.5, 2.5;
  p.scales << 1.0, 1.3;
  return p;
}

Dataset simulate(const ModelParams& p, int n_per_arm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick(p.probs.data(), p.probs.data() + p.probs.size());
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset d;
  for (int arm = 0; arm < 2; ++arm)
    for (int i = 0; i < n_per_arm; ++i) {
      const int s = pick(rng);
      double y = p.location(s, arm) + p.scales(arm) * g(rng);
      if (p.family == ComponentFamily::Tobit) y = std::max(0.0, y);
      d.cases.push_back({y, arm, p.grid.observed_level(s, arm), 1.0, static_cast<std::int64_t>(d.cases.size())});
    }
  return d;
}

}  // namespace

TEST(MStep, HardAssignmentGivesWeightedMeans) {
  const StrataGrid g(2);
  Dataset d;
  // arm 1, z=0 is compatible with strata 0 and 1; arm 0, z=0 with strata 0 and 2.
  d.cases = {{1.0, 1, 0, 1.0, 0}, {3.0, 1, 0, 3.0, 1}, {10.0, 1, 0, 1.0, 2}, {5.0, 1, 1, 1.0, 3},
             {-1.0, 0, 0, 2.0, 4}, {2.0, 0, 1, 1.0, 5}, {4.0, 0, 1, 1.0, 6}};
  PosteriorMatrix post = PosteriorMatrix::Zero(7, 4);
  post(0, 0) = post(1, 0) = 1.0;
  post(2, 1) = 1.0;
  post(3, 3) = 1.0;
  post(4, 2) = 1.0;
  post(5, 1) = 1.0;
  post(6, 3) = 1.0;
  const ModelParams prev = ModelParams::zeros(g, ComponentFamily::Normal);
  const MStepResult r = m_step(post, d, prev);
  EXPECT_DOUBLE_EQ(r.params.locations(0, 1), (1.0 + 9.0) / 4.0);
  EXPECT_DOUBLE_EQ(r.params.locations(1, 1), 10.0);
  EXPECT_DOUBLE_EQ(r.params.locations(3, 1), 5.0);
  EXPECT_DOUBLE_EQ(r.params.locations(2, 0), -1.0);
  EXPECT_DOUBLE_EQ(r.params.locations(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.params.locations(3, 0), 4.0);
  // No arm-0 mass on stratum 0: held at the previous value.
  EXPECT_EQ(r.params.locations(0, 0), 0.0);
  EXPECT_NE(std::find(r.frozen.begin(), r.frozen.end(), std::pair{0, 0}), r.frozen.end());
  const double rss1 = 1.0 * 1.5 * 1.5 + 3.0 * 0.5 * 0.5;
  EXPECT_NEAR(r.params.scales(1), std::sqrt(rss1 / 6.0), 1e-14);
  const double total = 6.0 + 4.0;
  EXPECT_NEAR(r.params.probs(0), 4.0 / total, 1e-14);
  EXPECT_NEAR(r.params.probs(2), 2.0 / total, 1e-14);
  EXPECT_NEAR(r.params.probs.sum(), 1.0, 1e-14);
}

TEST(MStep, ScaleFloorEngagesOnConstantStrata) {
  Dataset d;
  d.cases = {{1.0, 1, 0, 1.0, 0}, {1.0, 1, 1, 1.0, 1}, {2.0, 0, 0, 1.0, 2}, {2.0, 0, 1, 1.0, 3}};
  PosteriorMatrix post = PosteriorMatrix::Zero(4, 4);
  post(0, 0) = post(1, 2) = post(2, 0) = post(3, 1) = 1.0;
  MStepOptions opt;
  opt.scale_floor << 0.01, 0.02;
  const MStepResult r = m_step(post, d, ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal), opt);
  EXPECT_TRUE(r.scale_floor_active);
  EXPECT_EQ(r.params.scales(0), 0.01);
  EXPECT_EQ(r.params.scales(1), 0.02);
}

TEST(MStep, TobitNewtonMatchesGridSearch) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (const auto& [eta, zeta] : {std::pair{0.8, 1.5}, std::pair{-0.7, 2.0}, std::pair{2.5, 0.9}}) {
    std::vector<double> y, w;
    Dataset d;
    for (int i = 0; i < 400; ++i) {
      y.push_back(std::max(0.0, eta + zeta * g(rng)));
      w.push_back(u(rng));
      d.cases.push_back({y.back(), 1, 0, w.back(), i});
    }
    // A few arm-0 cases keep the dataset well formed; they do not touch arm 1.
    d.cases.push_back({1.0, 0, 0, 1.0, 1000});
    PosteriorMatrix post = PosteriorMatrix::Zero(static_cast<Eigen::Index>(d.size()), 4);
    for (Eigen::Index i = 0; i < post.rows(); ++i) post(i, 0) = 1.0;
    ModelParams prev = ModelParams::zeros(StrataGrid(2), ComponentFamily::Tobit);
    prev.locations(0, 1) = 0.0;
    const MStepResult r = m_step(post, d, prev);
    const auto [e_hat, z_hat] = oracle::tobit_grid_search(y, w);
    EXPECT_NEAR(r.params.locations(0, 1), e_hat, 1e-4);
    EXPECT_NEAR(r.params.scales(1), z_hat, 1e-4);
  }
}

TEST(MStep, TobitDerivativesMatchFiniteDifferences) {
  detail::ArmStats st(4);
  st.censored << 3.0, 0.5, 0.0, 2.0;
  st.positive << 10.0, 4.0, 6.0, 0.0;
  st.sum_y << 14.0, 9.0, 3.0, 0.0;
  st.sum_yy << 30.0, 25.0, 4.0, 0.0;
  for (auto structure : {MeanStructure::Saturated, MeanStructure::LinearInZ}) {
    const ModelParams shape = ModelParams::zeros(StrataGrid(2), ComponentFamily::Tobit, structure);
    const detail::TobitArmObjective obj(st, detail::design_matrix(shape));
    Eigen::VectorXd theta(obj.dim());
    for (Eigen::Index j = 0; j < theta.size(); ++j) theta(j) = 0.3 * static_cast<double>(j) - 0.4;
    theta(theta.size() - 1) = 0.2;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    obj.derivatives(theta, grad, hess);
    const double h = 1e-5;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      Eigen::VectorXd tp = theta, tm = theta;
      tp(j) += h;
      tm(j) -= h;
      EXPECT_NEAR(grad(j), (obj.value(tp) - obj.value(tm)) / (2 * h), 1e-6);
      Eigen::VectorXd gp, gm;
      Eigen::MatrixXd unused;
      obj.derivatives(tp, gp, unused);
      obj.derivatives(tm, gm, unused);
      for (Eigen::Index k = 0; k < theta.size(); ++k) EXPECT_NEAR(hess(k, j), (gp(k) - gm(k)) / (2 * h), 1e-5);
    }
  }
}

TEST(MStep, EmFixedPointAtTruthOnLargeSample) {
  for (auto family : {ComponentFamily::Normal, ComponentFamily::Tobit}) {
    const ModelParams truth = truth_four_strata(family);
    const Dataset d = simulate(truth, 100000, family == ComponentFamily::Normal ? 1 : 2);
    const MStepResult r = m_step(e_step(truth, d), d, truth);
    // Four standard errors of the sparsest stratum's location.
    const double tol = 4.0 * truth.scales.maxCoeff() / std::sqrt(100000.0 * truth.probs.minCoeff());
    EXPECT_LT((r.params.probs - truth.probs).cwiseAbs().maxCoeff(), 0.01);
    EXPECT_LT((r.params.locations - truth.locations).cwiseAbs().maxCoeff(), tol);
    EXPECT_LT((r.params.scales - truth.scales).cwiseAbs().maxCoeff(), 0.01);
  }
}

TEST(MStep, LinearStructureSolvesWeightedLeastSquares) {
  const ModelParams truth = truth_four_strata(ComponentFamily::Normal);
  const Dataset d = simulate(truth, 2000, 3);
  const PosteriorMatrix post = e_step(truth, d);
  ModelParams lin = ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal, MeanStructure::LinearInZ);
  const MStepResult rl = m_step(post, d, lin);
  const MStepResult rs = m_step(post, d, truth);
  // With four strata the linear-in-z structure is saturated, so both agree.
  EXPECT_LT((rl.params.location_table() - rs.params.location_table()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(rl.params.scales(0), rs.params.scales(0), 1e-9);
}

TEST(MStep, NeverDecreasesLikelihood) {
  for (auto family : {ComponentFamily::Normal, ComponentFamily::Tobit}) {
    const ModelParams truth = truth_four_strata(family);
    const Dataset d = simulate(truth, 500, 4);
    ModelParams p = truth;
    p.locations.array() += 0.7;
    p.probs << 0.25, 0.25, 0.25, 0.25;
    MStepOptions opt;
    opt.scale_floor = default_scale_floors(d);
    double prev = log_likelihood(p, d);
    for (int it = 0; it < 30; ++it) {
      p = m_step(e_step(p, d), d, p, opt).params;
      const double ll = log_likelihood(p, d);
      EXPECT_GE(ll, prev - 1e-8);
      prev = ll;
    }
  }
}
