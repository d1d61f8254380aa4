#include <random>
#include <set>

#include <gtest/gtest.h>

#include "stratfit/simulation.hpp"
#include "stratfit/warm_start.hpp"

using namespace stratfit;

namespace {

Dataset four_strata_data(int n, double dispersion, std::uint64_t seed) {
  SimConfig c;
  c.n_per_arm = n;
  c.dispersion_sd = dispersion;
  auto rng = replicate_rng(seed, 0);
  return generate(c, rng).first;
}

}  // namespace

TEST(UnivariateMixture, RecoversSeparatedComponents) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> y, w;
  for (int i = 0; i < 2000; ++i) {
    y.push_back((i % 2 ? 5.0 : 0.0) + g(rng));
    w.push_back(1.0);
  }
  const auto mix = fit_univariate_mixture(y, w, 2);
  EXPECT_NEAR(mix.means[0], 0.0, 0.15);
  EXPECT_NEAR(mix.means[1], 5.0, 0.15);
  EXPECT_NEAR(mix.proportions[0], 0.5, 0.05);
  EXPECT_FALSE(mix.degenerate);
}

TEST(UnivariateMixture, ConstantCellCollapses) {
  const std::vector<double> y(50, 3.25), w(50, 1.0);
  const auto mix = fit_univariate_mixture(y, w, 2);
  EXPECT_TRUE(mix.degenerate);
  EXPECT_EQ(mix.means[0], 3.25);
  EXPECT_EQ(mix.means[1], 3.25);
}

TEST(UnivariateMixture, TooFewValuesThrows) {
  EXPECT_THROW(fit_univariate_mixture({1.0, 2.0}, {1.0, 1.0}, 3), InputError);
}

TEST(WarmStart, FourStrataHasTwoComponentsInFourCells) {
  const Dataset d = four_strata_data(500, 2.0, 3);
  const WarmStarts ws = warm_start_cells(d, StrataGrid(2), ComponentFamily::Normal);
  ASSERT_EQ(ws.cells.size(), 4u);
  for (const auto& c : ws.cells) {
    EXPECT_EQ(c.mixture.means.size(), 2u);
    EXPECT_LE(c.mixture.means[0], c.mixture.means[1]);
  }
  EXPECT_EQ(ws.cells[0].cell.arm, 1);
  EXPECT_EQ(ws.cells[3].cell.arm, 0);
}

TEST(Mappings, SixteenDistinctForFourStrata) {
  const Dataset d = four_strata_data(500, 2.0, 4);
  const MappingSpace space(warm_start_cells(d, StrataGrid(2), ComponentFamily::Normal));
  const auto maps = enumerate_mappings(space);
  ASSERT_EQ(maps.size(), 16u);
  std::set<std::vector<std::vector<int>>> distinct;
  for (const auto& m : maps) {
    distinct.insert(m.assignment);
    EXPECT_NEAR(m.initial.probs.sum(), 1.0, 1e-12);
    EXPECT_NO_THROW(m.initial.validate());
    for (std::size_t c = 0; c < m.assignment.size(); ++c) {
      auto sorted = m.assignment[c];
      std::sort(sorted.begin(), sorted.end());
      const Cell cell = space.warm_starts().cells[c].cell;
      EXPECT_EQ(sorted, space.warm_starts().grid.compatible(cell.arm, cell.level));
    }
  }
  EXPECT_EQ(distinct.size(), 16u);
}

TEST(Mappings, IndexZeroIsIdentity) {
  const Dataset d = four_strata_data(300, 2.0, 5);
  const MappingSpace space(warm_start_cells(d, StrataGrid(2), ComponentFamily::Normal));
  const StartingMapping m = space.at(0);
  const StrataGrid& g = space.warm_starts().grid;
  for (std::size_t c = 0; c < m.assignment.size(); ++c) {
    const Cell cell = space.warm_starts().cells[c].cell;
    EXPECT_EQ(m.assignment[c], g.compatible(cell.arm, cell.level));
  }
  // Last cell is the least significant digit.
  EXPECT_EQ(space.at(1).assignment[3], (std::vector<int>{g.compatible(0, 1)[1], g.compatible(0, 1)[0]}));
  EXPECT_EQ(space.at(1).assignment[0], m.assignment[0]);
  EXPECT_THROW(space.at(16), std::out_of_range);
}

TEST(Mappings, NineStrataCount) {
  SimConfig c;
  c.k_levels = 3;
  c.n_per_arm = 600;
  c.dispersion_sd = 2.5;
  auto rng = replicate_rng(6, 0);
  const Dataset d = generate(c, rng).first;
  const MappingSpace space(warm_start_cells(d, StrataGrid(3), ComponentFamily::Normal));
  EXPECT_EQ(space.size(), 216u * 216u);
  EXPECT_NEAR(space.at(46655).initial.probs.sum(), 1.0, 1e-12);
}

TEST(Rake, MatchesBothMargins) {
  const StrataGrid g(3);
  Eigen::VectorXd seed(9);
  seed << 0.2, 0.05, 0.1, 0.1, 0.15, 0.05, 0.1, 0.05, 0.2;
  const std::vector<double> z1{0.5, 0.3, 0.2}, z0{0.2, 0.3, 0.5};
  const Eigen::VectorXd t = rake_to_margins(g, seed, z1, z0);
  for (int a = 0; a < 3; ++a) {
    double row = 0.0, col = 0.0;
    for (int b = 0; b < 3; ++b) row += t(g.index(b, a)), col += t(g.index(a, b));
    EXPECT_NEAR(row, z1[static_cast<std::size_t>(a)], 1e-10);
    EXPECT_NEAR(col, z0[static_cast<std::size_t>(a)], 1e-10);
  }
}

TEST(StartSelection, TopAndSpreadProperties) {
  SimConfig c;
  c.k_levels = 3;
  c.n_per_arm = 400;
  c.dispersion_sd = 2.5;
  auto rng = replicate_rng(7, 0);
  const Dataset d = generate(c, rng).first;
  const MappingSpace space(warm_start_cells(d, StrataGrid(3), ComponentFamily::Normal));
  const auto ll = initial_log_likelihoods(space, d, 1);
  const auto best = static_cast<std::size_t>(std::max_element(ll.begin(), ll.end()) - ll.begin());

  const auto top30 = select_start_indices(space, d, StartStrategy::top(30), 1);
  const auto top60 = select_start_indices(space, d, StartStrategy::top(60), 1);
  ASSERT_EQ(top30.size(), 30u);
  EXPECT_TRUE(std::is_sorted(top30.begin(), top30.end()));
  EXPECT_TRUE(std::includes(top60.begin(), top60.end(), top30.begin(), top30.end()));
  EXPECT_TRUE(std::binary_search(top30.begin(), top30.end(), best));
  double worst_top = 0.0;
  for (std::size_t i : top30) worst_top = std::min(worst_top == 0.0 ? ll[i] : worst_top, ll[i]);
  for (std::size_t i = 0; i < ll.size(); ++i)
    if (!std::binary_search(top30.begin(), top30.end(), i)) EXPECT_LE(ll[i], worst_top);

  const auto spread = select_start_indices(space, d, StartStrategy::spread(30), 1);
  EXPECT_EQ(spread.size(), 30u);
  EXPECT_TRUE(std::binary_search(spread.begin(), spread.end(), best));
  EXPECT_EQ(std::set<std::size_t>(spread.begin(), spread.end()).size(), 30u);

  const auto all = select_start_indices(space, d, StartStrategy::top(space.size() + 5), 1);
  EXPECT_EQ(all.size(), space.size());
  EXPECT_EQ(nine_strata_starts(space, d, StartStrategy::top(5), 1).size(), 5u);
}
