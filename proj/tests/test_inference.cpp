#include <cmath>

#include <gtest/gtest.h>

#include "stratfit/inference.hpp"
#include "stratfit/simulation.hpp"

using namespace stratfit;

namespace {

struct Fixture {
  Dataset data;
  ModelParams truth;
  FitResult fit;
};

Fixture fitted(int n, double dispersion, std::uint64_t seed, double effect = 1.0) {
  SimConfig c;
  c.n_per_arm = n;
  c.dispersion_sd = dispersion;
  c.effect = effect;
  auto rng = replicate_rng(seed, 0);
  auto [data, truth] = generate(c, rng);
  FitConfig fc;
  fc.threads = 1;
  FitResult f = fit(data, ModelSpec{}, fc);
  return {std::move(data), std::move(truth), std::move(f)};
}

}  // namespace

TEST(Inference, HardSeparationMatchesTextbookLocationSe) {
  // With components ten SDs apart every case is classified with certainty,
  // so a location SE is sigma / sqrt(n_t p_s).
  const Fixture fx = fitted(4000, 10.0, 21);
  const auto cov = observed_information_covariance(fx.fit.params, fx.data);
  const Eigen::VectorXd se = cov.se();
  const int offset = packed_location_offset(fx.fit.params);
  for (int arm = 0; arm < 2; ++arm)
    for (int s = 0; s < 4; ++s) {
      const double want = fx.fit.params.scales(arm) / std::sqrt(4000.0 * fx.fit.params.probs(s));
      EXPECT_NEAR(se(offset + arm * 4 + s) / want, 1.0, 0.05) << "arm " << arm << " stratum " << s;
    }
}

TEST(Inference, HessianIsSymmetricAndGradientVanishes) {
  const Fixture fx = fitted(1500, 2.4, 22);
  const Eigen::MatrixXd h = numerical_hessian(fx.fit.params, fx.data);
  EXPECT_LT((h - h.transpose()).cwiseAbs().maxCoeff(), 1e-4 * h.cwiseAbs().maxCoeff());
  const Eigen::VectorXd g = numerical_gradient(fx.fit.params, fx.data);
  EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-4 * std::abs(fx.fit.loglik));
}

TEST(Inference, SingletonClustersReduceToRobustSandwich) {
  const Fixture fx = fitted(800, 2.4, 23);
  const auto clustered = cluster_sandwich_covariance(fx.fit.params, fx.data);
  const auto robust = robust_sandwich_covariance(fx.fit.params, fx.data);
  EXPECT_LT((clustered.cov - robust.cov).cwiseAbs().maxCoeff(), 1e-10 * robust.cov.cwiseAbs().maxCoeff());
}

TEST(Inference, ClusterScoresAreSummedWithinClusters) {
  Fixture fx = fitted(800, 2.4, 24);
  const auto robust = robust_sandwich_covariance(fx.fit.params, fx.data);
  // Each case split into a two-member cluster at half weight: the cluster
  // score and the cluster count are unchanged. The bread differs only by
  // finite-difference rounding of a reordered sum.
  Dataset pairs;
  for (const Case& c : fx.data.cases) {
    Case half = c;
    half.weight = 0.5;
    pairs.cases.push_back(half);
    pairs.cases.push_back(half);
  }
  const auto clustered = cluster_sandwich_covariance(fx.fit.params, pairs);
  EXPECT_LT((clustered.cov - robust.cov).cwiseAbs().maxCoeff(), 1e-2 * robust.cov.cwiseAbs().maxCoeff());
}

TEST(Inference, SingleClusterFails) {
  Fixture fx = fitted(400, 2.4, 25);
  for (Case& c : fx.data.cases) c.cluster = 7;
  EXPECT_THROW(cluster_sandwich_covariance(fx.fit.params, fx.data), NumericalError);
  const EffectTable t = effect_table(fx.fit, fx.data);
  EXPECT_FALSE(t.cluster_error.empty());
  EXPECT_TRUE(std::isnan(t.rows[0].se_cluster));
  EXPECT_FALSE(std::isnan(t.rows[0].se_naive));
}

TEST(Inference, EffectSeIsDeltaMethodOfLocationCovariance) {
  const Fixture fx = fitted(1000, 2.4, 26);
  const auto cov = observed_information_covariance(fx.fit.params, fx.data);
  const int offset = packed_location_offset(fx.fit.params);
  for (int s = 0; s < 4; ++s) {
    const int i0 = offset + s, i1 = offset + 4 + s;
    const double want = std::sqrt(cov.cov(i1, i1) + cov.cov(i0, i0) - 2.0 * cov.cov(i0, i1));
    EXPECT_NEAR(effect_se(cov, s), want, 1e-10 * want);
  }
}

TEST(Inference, EffectSignFollowsArmDifference) {
  const Fixture fx = fitted(1000, 2.4, 27);
  ModelParams flipped = fx.fit.params;
  flipped.locations.col(0) = fx.fit.params.locations.col(1);
  flipped.locations.col(1) = fx.fit.params.locations.col(0);
  const EffectTable a = treatment_effects(fx.fit.params), b = treatment_effects(flipped);
  for (int s = 0; s < 4; ++s) {
    EXPECT_EQ(a.rows[static_cast<std::size_t>(s)].effect, -b.rows[static_cast<std::size_t>(s)].effect);
    EXPECT_EQ(a.rows[static_cast<std::size_t>(s)].effect,
              fx.fit.params.location(s, 1) - fx.fit.params.location(s, 0));
  }
  EXPECT_TRUE(a.at(0, 0).diagonal);
  EXPECT_FALSE(a.at(1, 0).diagonal);
}

TEST(Inference, RecoversKnownEffect) {
  const Fixture fx = fitted(5000, 2.4, 28, 2.0);
  const EffectTable t = effect_table(fx.fit, fx.data);
  EXPECT_TRUE(t.naive_error.empty()) << t.naive_error;
  EXPECT_TRUE(t.cluster_error.empty()) << t.cluster_error;
  for (const EffectRow& r : t.rows) {
    EXPECT_NEAR(r.effect, 2.0, 0.25) << "stratum " << r.stratum;
    EXPECT_NEAR(r.observed_scale_effect, r.effect, 1e-12);
    EXPECT_TRUE(r.significant_naive());
    EXPECT_GT(r.se_cluster, 0.0);
  }
}

TEST(Inference, BoundaryFitsRefuseStandardErrors) {
  Fixture fx = fitted(400, 2.4, 29);
  fx.fit.scale_floor_active = true;
  EXPECT_THROW(observed_information_se(fx.fit, fx.data), NumericalError);
  fx.fit.scale_floor_active = false;
  fx.fit.params.probs << 0.5, 0.5 - 1e-8, 0.0, 1e-8;
  EXPECT_THROW(cluster_sandwich_se(fx.fit, fx.data), NumericalError);
}
