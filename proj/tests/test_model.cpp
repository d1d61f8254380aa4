#include <random>
#include <set>

#include <gtest/gtest.h>

#include "stratfit/dataset.hpp"
#include "stratfit/model.hpp"
#include "stratfit/strata_grid.hpp"

using namespace stratfit;

namespace {

ModelParams random_params(std::mt19937_64& rng, int k, MeanStructure structure) {
  std::uniform_real_distribution<double> u(0.05, 1.0), loc(-20.0, 20.0), sc(0.05, 30.0);
  ModelParams p = ModelParams::zeros(StrataGrid(k), ComponentFamily::Normal, structure);
  for (Eigen::Index s = 0; s < p.probs.size(); ++s) p.probs(s) = u(rng);
  p.probs /= p.probs.sum();
  for (Eigen::Index r = 0; r < p.locations.rows(); ++r)
    for (int a = 0; a < 2; ++a) p.locations(r, a) = loc(rng);
  p.scales << sc(rng), sc(rng);
  return p;
}

}  // namespace

TEST(StrataGrid, IndexIsBijection) {
  for (int k : {2, 3, 4}) {
    StrataGrid g(k);
    ASSERT_EQ(g.size(), k * k);
    std::set<std::pair<int, int>> seen;
    for (int s = 0; s < g.size(); ++s) {
      const Stratum& st = g.stratum(s);
      EXPECT_GE(st.z0, 0);
      EXPECT_LT(st.z1, k);
      EXPECT_EQ(g.index(st.z0, st.z1), s);
      seen.insert({st.z0, st.z1});
    }
    EXPECT_EQ(static_cast<int>(seen.size()), k * k);
  }
}

TEST(StrataGrid, CompatibleStrataMatchObservedCoordinate) {
  StrataGrid g(3);
  for (int arm = 0; arm < 2; ++arm)
    for (int z = 0; z < 3; ++z) {
      const auto& c = g.compatible(arm, z);
      ASSERT_EQ(c.size(), 3u);
      for (int s : c) EXPECT_EQ(arm == 1 ? g.stratum(s).z1 : g.stratum(s).z0, z);
      EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
    }
}

TEST(Pack, UniformProbsGiveZeroLogRatios) {
  ModelParams p = ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal);
  const Eigen::VectorXd flat = pack(p);
  for (int s = 0; s < 3; ++s) EXPECT_EQ(flat(s), 0.0);
  EXPECT_EQ(flat(packed_scale_offset(p)), 0.0);
  EXPECT_EQ(flat(packed_scale_offset(p) + 1), 0.0);
  EXPECT_EQ(flat.size(), 3 + 8 + 2);
}

TEST(Pack, RoundTripPropertyOverRandomDraws) {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const int k = 2 + draw % 2;
    const auto structure = draw % 3 == 0 ? MeanStructure::LinearInZ : MeanStructure::Saturated;
    const ModelParams p = random_params(rng, k, structure);
    const ModelParams q = unpack(pack(p), p);
    worst = std::max(worst, (q.probs - p.probs).cwiseAbs().maxCoeff());
    worst = std::max(worst, (q.locations - p.locations).cwiseAbs().maxCoeff());
    worst = std::max(worst, ((q.scales - p.scales).array() / p.scales.array()).abs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Pack, UnpackAlwaysLandsOnSimplex) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 200.0);
  const ModelParams shape = ModelParams::zeros(StrataGrid(3), ComponentFamily::Tobit);
  for (int draw = 0; draw < 500; ++draw) {
    Eigen::VectorXd flat(packed_size(shape));
    for (Eigen::Index j = 0; j < flat.size(); ++j) flat(j) = j < 8 ? g(rng) : 0.1 * g(rng) / 200.0;
    const ModelParams p = unpack(flat, shape);
    EXPECT_NEAR(p.probs.sum(), 1.0, 1e-12);
    EXPECT_TRUE((p.probs.array() >= 0.0).all() && (p.probs.array() <= 1.0).all());
    EXPECT_TRUE(p.probs.allFinite());
  }
}

TEST(ModelParams, LocationCounts) {
  EXPECT_EQ(ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal).locations.size(), 8);
  EXPECT_EQ(ModelParams::zeros(StrataGrid(3), ComponentFamily::Normal).locations.size(), 18);
  EXPECT_EQ(ModelParams::zeros(StrataGrid(3), ComponentFamily::Normal, MeanStructure::LinearInZ).locations.size(), 8);
}

TEST(ModelParams, LinearStructureExpandsByFormula) {
  ModelParams p = ModelParams::zeros(StrataGrid(3), ComponentFamily::Normal, MeanStructure::LinearInZ);
  // intercept, z1, z0, z1*z0 per arm
  p.locations.col(0) << 1.0, 0.5, -2.0, 0.25;
  p.locations.col(1) << -3.0, 1.5, 0.75, -1.0;
  const ModelParams sat = to_saturated(p);
  for (int s = 0; s < 9; ++s) {
    const Stratum& st = p.grid.stratum(s);
    for (int arm = 0; arm < 2; ++arm) {
      const auto& b = p.locations.col(arm);
      const double want = b(0) + b(1) * st.z1 + b(2) * st.z0 + b(3) * st.z1 * st.z0;
      EXPECT_DOUBLE_EQ(p.location(s, arm), want);
      EXPECT_DOUBLE_EQ(sat.location(s, arm), want);
    }
  }
}

TEST(ModelParams, ValidateRejectsBadValues) {
  ModelParams p = ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal);
  EXPECT_NO_THROW(p.validate());
  p.probs(0) += 1e-9;
  EXPECT_THROW(p.validate(), InputError);
  p = ModelParams::zeros(StrataGrid(2), ComponentFamily::Normal);
  p.scales(1) = 0.0;
  EXPECT_THROW(p.validate(), InputError);
}

TEST(Dataset, EffectiveSampleSize) {
  Dataset d;
  for (int i = 0; i < 7; ++i) d.cases.push_back({1.0, 1, 0, 1.0, i});
  EXPECT_DOUBLE_EQ(effective_sample_size(d, 1), 7.0);
  Dataset e;
  e.cases.push_back({1.0, 0, 0, 2.0, 0});
  e.cases.push_back({1.0, 0, 0, 0.0, 1});
  EXPECT_DOUBLE_EQ(effective_sample_size(e, 0), 1.0);
  EXPECT_THROW(effective_sample_size(e, 1), InputError);
}

TEST(Dataset, ValidationFlagsEmptyCellsAndCensoringViolations) {
  StrataGrid g(2);
  Dataset d;
  d.cases = {{1.0, 1, 0, 1.0, 0}, {1.0, 1, 1, 1.0, 1}, {1.0, 0, 0, 1.0, 2}, {1.0, 0, 1, 0.0, 3}};
  try {
    validate_dataset(d, g, ComponentFamily::Normal);
    FAIL() << "expected empty-cell error";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("empty cell (t=0, z=1)"), std::string::npos);
  }
  d.cases[3].weight = 0.5;
  EXPECT_NO_THROW(validate_dataset(d, g, ComponentFamily::Normal));
  d.cases[2].y = -0.5;
  EXPECT_THROW(validate_dataset(d, g, ComponentFamily::Tobit), InputError);
  d.cases[2].z = 2;
  EXPECT_THROW(validate_dataset(d, g, ComponentFamily::Normal), InputError);
}

TEST(Dataset, SnapCensoredZeros) {
  Dataset d;
  d.cases = {{5e-13, 0, 0, 1.0, 0}, {2e-12, 0, 0, 1.0, 1}};
  snap_censored_zeros(d);
  EXPECT_EQ(d.cases[0].y, 0.0);
  EXPECT_EQ(d.cases[1].y, 2e-12);
}
