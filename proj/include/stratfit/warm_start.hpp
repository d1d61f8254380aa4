#pragma once

// Starting values for the principal-strata EM.
//
// Each observed (arm, level) cell is a mixture of the k_levels strata
// compatible with it. A plain univariate normal mixture fitted per cell gives
// k_levels component means and mixing proportions, but not which component
// belongs to which stratum. A starting mapping picks, for every cell, a
// bijection from components to compatible strata; there are (k!)^(2k) of
// them (16 for the four-strata model, 216^2 for nine strata).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stratfit/dataset.hpp"
#include "stratfit/error.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/model.hpp"
#include "stratfit/normal.hpp"
#include "stratfit/parallel.hpp"

namespace stratfit {

struct UnivariateMixture {
  std::vector<double> means;  // ascending
  std::vector<double> sds;
  std::vector<double> proportions;
  int iterations = 0;
  bool degenerate = false;  // zero-variance input; all components collapsed
};

// Weighted k-component normal mixture by EM, initialized from the moments of
// k equal-weight quantile groups. Deterministic.
inline UnivariateMixture fit_univariate_mixture(const std::vector<double>& values,
                                                const std::vector<double>& weights, int k,
                                                int max_iterations = 1000, double tol = 1e-10) {
  const std::size_t n = values.size();
  if (n < static_cast<std::size_t>(k)) throw InputError("cell too small for warm start");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

  double total = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += weights[i];
    sum += weights[i] * values[i];
  }
  const double mean = sum / total;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += weights[i] * (values[i] - mean) * (values[i] - mean);
  const double sd = std::sqrt(ss / total);

  UnivariateMixture mix;
  mix.means.assign(static_cast<std::size_t>(k), mean);
  mix.sds.assign(static_cast<std::size_t>(k), sd);
  mix.proportions.assign(static_cast<std::size_t>(k), 1.0 / k);
  if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) {
    mix.sds.assign(static_cast<std::size_t>(k), 0.0);
    mix.degenerate = true;
    return mix;
  }

  // Quantile-split initialization.
  std::vector<double> gw(static_cast<std::size_t>(k), 0.0), gy(gw), gyy(gw);
  double cum = 0.0;
  for (std::size_t idx : order) {
    const double mid = cum + 0.5 * weights[idx];
    cum += weights[idx];
    const auto g = static_cast<std::size_t>(std::min<double>(k - 1, std::floor(k * mid / total)));
    gw[g] += weights[idx];
    gy[g] += weights[idx] * values[idx];
    gyy[g] += weights[idx] * values[idx] * values[idx];
  }
  const double sd_floor = 1e-3 * sd;
  for (std::size_t j = 0; j < gw.size(); ++j) {
    if (gw[j] > 0.0) {
      mix.means[j] = gy[j] / gw[j];
      mix.sds[j] = std::max(sd_floor, std::sqrt(std::max(0.0, gyy[j] / gw[j] - mix.means[j] * mix.means[j])));
      mix.proportions[j] = gw[j] / total;
    } else {
      mix.means[j] = mean + (static_cast<double>(j) - 0.5 * (k - 1)) * 0.5 * sd;
      mix.proportions[j] = 1e-3;
    }
  }
  {
    double ptot = std::accumulate(mix.proportions.begin(), mix.proportions.end(), 0.0);
    for (double& p : mix.proportions) p /= ptot;
  }

  std::vector<double> resp(static_cast<std::size_t>(k));
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iterations; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gy.begin(), gy.end(), 0.0);
    std::fill(gyy.begin(), gyy.end(), 0.0);
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < resp.size(); ++j) {
        const double r = (values[i] - mix.means[j]) / mix.sds[j];
        resp[j] = std::log(mix.proportions[j]) - std::log(mix.sds[j]) - 0.5 * r * r;
        mx = std::max(mx, resp[j]);
      }
      double s = 0.0;
      for (double& r : resp) s += (r = std::exp(r - mx));
      ll += weights[i] * (mx + std::log(s) - normal::kLogSqrt2Pi);
      for (std::size_t j = 0; j < resp.size(); ++j) {
        const double w = weights[i] * resp[j] / s;
        gw[j] += w;
        gy[j] += w * values[i];
        gyy[j] += w * values[i] * values[i];
      }
    }
    for (std::size_t j = 0; j < gw.size(); ++j) {
      if (!(gw[j] > 1e-12 * total)) continue;
      mix.proportions[j] = gw[j] / total;
      mix.means[j] = gy[j] / gw[j];
      mix.sds[j] = std::max(sd_floor, std::sqrt(std::max(0.0, gyy[j] / gw[j] - mix.means[j] * mix.means[j])));
    }
    mix.iterations = iter + 1;
    if (std::abs(ll - prev_ll) <= tol * std::abs(ll)) break;
    prev_ll = ll;
  }

  std::vector<std::size_t> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return mix.means[a] < mix.means[b]; });
  UnivariateMixture sorted = mix;
  for (std::size_t j = 0; j < perm.size(); ++j) {
    sorted.means[j] = mix.means[perm[j]];
    sorted.sds[j] = mix.sds[perm[j]];
    sorted.proportions[j] = mix.proportions[perm[j]];
  }
  return sorted;
}

struct CellWarmStart {
  Cell cell;
  UnivariateMixture mixture;
  double share = 0.0;  // cell weight / arm weight
};

struct WarmStarts {
  StrataGrid grid{2};
  ComponentFamily family = ComponentFamily::Normal;
  std::vector<CellWarmStart> cells;  // observed_cells order
};

// Per-cell k_levels-component normal mixtures. Under the tobit family only
// the positive outcomes enter the cell mixture.
inline WarmStarts warm_start_cells(const Dataset& data, const StrataGrid& grid, ComponentFamily family) {
  WarmStarts ws{grid, family, {}};
  const auto weights = cell_weights(data, grid);
  std::array<double, 2> arm_total{0.0, 0.0};
  for (const Cell& cell : observed_cells(grid))
    arm_total[cell.arm] += weights[static_cast<std::size_t>(cell_index(grid, cell.arm, cell.level))];

  for (const Cell& cell : observed_cells(grid)) {
    std::vector<double> ys, ws_;
    for (const Case& c : data.cases) {
      if (c.arm != cell.arm || c.z != cell.level || !(c.weight > 0.0)) continue;
      if (family == ComponentFamily::Tobit && c.y <= 0.0) continue;
      ys.push_back(c.y);
      ws_.push_back(c.weight);
    }
    if (ys.size() < static_cast<std::size_t>(grid.k_levels()))
      throw InputError("cell too small for warm start (t=" + std::to_string(cell.arm) +
                       ", z=" + std::to_string(cell.level) + ")");
    CellWarmStart cw;
    cw.cell = cell;
    cw.mixture = fit_univariate_mixture(ys, ws_, grid.k_levels());
    const double cw_weight = weights[static_cast<std::size_t>(cell_index(grid, cell.arm, cell.level))];
    cw.share = arm_total[cell.arm] > 0.0 ? cw_weight / arm_total[cell.arm] : 0.0;
    ws.cells.push_back(std::move(cw));
  }
  return ws;
}

struct StartingMapping {
  std::size_t index = 0;
  // Per cell (observed_cells order): assignment[c][j] is the stratum that
  // warm-start component j of cell c initializes.
  std::vector<std::vector<int>> assignment;
  ModelParams initial;
};

// Iterative proportional fitting of a strata table (row z1, column z0) to the
// given z1 and z0 margins.
inline Eigen::VectorXd rake_to_margins(const StrataGrid& grid, Eigen::VectorXd table,
                                       const std::vector<double>& z1_margin,
                                       const std::vector<double>& z0_margin, int sweeps = 50) {
  const int k = grid.k_levels();
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int z1 = 0; z1 < k; ++z1) {
      double row = 0.0;
      for (int z0 = 0; z0 < k; ++z0) row += table(grid.index(z0, z1));
      if (row > 0.0)
        for (int z0 = 0; z0 < k; ++z0) table(grid.index(z0, z1)) *= z1_margin[static_cast<std::size_t>(z1)] / row;
    }
    for (int z0 = 0; z0 < k; ++z0) {
      double col = 0.0;
      for (int z1 = 0; z1 < k; ++z1) col += table(grid.index(z0, z1));
      if (col > 0.0)
        for (int z1 = 0; z1 < k; ++z1) table(grid.index(z0, z1)) *= z0_margin[static_cast<std::size_t>(z0)] / col;
    }
  }
  return table / table.sum();
}

// Lazily materialized space of starting mappings. Mapping indices are mixed
// radix over cells (first cell most significant) with one digit per cell
// selecting a permutation in lexicographic order; index 0 maps components,
// sorted by ascending mean, to compatible strata in ascending index order.
class MappingSpace {
 public:
  MappingSpace(WarmStarts warm, MeanStructure structure = MeanStructure::Saturated)
      : warm_(std::move(warm)), structure_(structure) {
    const int k = warm_.grid.k_levels();
    std::vector<int> p(static_cast<std::size_t>(k));
    std::iota(p.begin(), p.end(), 0);
    do permutations_.push_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    size_ = 1;
    for (std::size_t c = 0; c < warm_.cells.size(); ++c) size_ *= permutations_.size();

    for (int arm = 0; arm < 2; ++arm) {
      double var = 0.0;
      for (const CellWarmStart& cw : warm_.cells) {
        if (cw.cell.arm != arm) continue;
        for (std::size_t j = 0; j < cw.mixture.sds.size(); ++j)
          var += cw.share * cw.mixture.proportions[j] * cw.mixture.sds[j] * cw.mixture.sds[j];
      }
      scales_(arm) = std::sqrt(var);
    }
    z1_margin_.assign(static_cast<std::size_t>(k), 0.0);
    z0_margin_.assign(static_cast<std::size_t>(k), 0.0);
    for (const CellWarmStart& cw : warm_.cells)
      (cw.cell.arm == 1 ? z1_margin_ : z0_margin_)[static_cast<std::size_t>(cw.cell.level)] = cw.share;
  }

  std::size_t size() const { return size_; }
  const WarmStarts& warm_starts() const { return warm_; }
  MeanStructure mean_structure() const { return structure_; }

  // Replaces degenerate (zero) pooled scales, e.g. with the arm SD.
  void set_scale_fallback(const Eigen::Vector2d& fallback) {
    for (int arm = 0; arm < 2; ++arm)
      if (!(scales_(arm) > 0.0)) scales_(arm) = fallback(arm);
  }

  StartingMapping at(std::size_t index) const {
    if (index >= size_) throw std::out_of_range("mapping index out of range");
    const StrataGrid& grid = warm_.grid;
    const std::size_t radix = permutations_.size();
    const std::size_t cells = warm_.cells.size();
    std::vector<std::size_t> digits(cells);
    std::size_t rest = index;
    for (std::size_t c = cells; c-- > 0;) {
      digits[c] = rest % radix;
      rest /= radix;
    }

    StartingMapping m;
    m.index = index;
    ModelParams sat = ModelParams::zeros(grid, warm_.family, MeanStructure::Saturated);
    std::array<Eigen::VectorXd, 2> implied{Eigen::VectorXd::Zero(grid.size()), Eigen::VectorXd::Zero(grid.size())};
    for (std::size_t c = 0; c < cells; ++c) {
      const CellWarmStart& cw = warm_.cells[c];
      const auto& compat = grid.compatible(cw.cell.arm, cw.cell.level);
      const auto& perm = permutations_[digits[c]];
      std::vector<int> assign(perm.size());
      for (std::size_t j = 0; j < perm.size(); ++j) {
        const int s = compat[static_cast<std::size_t>(perm[j])];
        assign[j] = s;
        sat.locations(s, cw.cell.arm) = cw.mixture.means[j];
        implied[cw.cell.arm](s) = cw.share * cw.mixture.proportions[j];
      }
      m.assignment.push_back(std::move(assign));
    }
    // Average the joint tables implied by the two arms, then rake to the
    // observed z1 (treatment) and z0 (control) margins.
    Eigen::VectorXd seed = 0.5 * (implied[0] + implied[1]);
    seed = seed.cwiseMax(1e-6);
    sat.probs = rake_to_margins(grid, seed / seed.sum(), z1_margin_, z0_margin_);
    sat.probs = sat.probs.cwiseMax(1e-8);
    sat.probs /= sat.probs.sum();
    sat.scales = scales_;

    if (structure_ == MeanStructure::Saturated) {
      m.initial = std::move(sat);
    } else {
      ModelParams lin = ModelParams::zeros(grid, warm_.family, structure_);
      lin.probs = sat.probs;
      lin.scales = sat.scales;
      Eigen::MatrixXd x(grid.size(), location_rows(grid, structure_));
      for (int s = 0; s < grid.size(); ++s) x.row(s) = design_row(grid, structure_, s).transpose();
      const auto qr = x.colPivHouseholderQr();
      for (int arm = 0; arm < 2; ++arm) lin.locations.col(arm) = qr.solve(sat.locations.col(arm));
      m.initial = std::move(lin);
    }
    return m;
  }

 private:
  WarmStarts warm_;
  MeanStructure structure_;
  std::vector<std::vector<int>> permutations_;
  std::size_t size_ = 0;
  Eigen::Vector2d scales_{1.0, 1.0};
  std::vector<double> z1_margin_, z0_margin_;
};

inline std::vector<StartingMapping> enumerate_mappings(const MappingSpace& space) {
  std::vector<StartingMapping> out;
  out.reserve(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) out.push_back(space.at(i));
  return out;
}

struct StartStrategy {
  enum class Kind { All, TopK, SpreadK };
  Kind kind = Kind::All;
  std::size_t k = 30;

  static StartStrategy all() { return {Kind::All, 0}; }
  static StartStrategy top(std::size_t k) { return {Kind::TopK, k}; }
  static StartStrategy spread(std::size_t k) { return {Kind::SpreadK, k}; }
};

// Log-likelihood at the initial parameters of every mapping; -inf where the
// mixture is degenerate.
inline std::vector<double> initial_log_likelihoods(const MappingSpace& space, const Dataset& data,
                                                   unsigned threads = default_threads()) {
  std::vector<double> ll(space.size());
  parallel_for(space.size(), threads, [&](std::size_t i) {
    try {
      ll[i] = log_likelihood(space.at(i).initial, data);
    } catch (const NumericalError&) {
      ll[i] = -std::numeric_limits<double>::infinity();
    }
  });
  return ll;
}

// Selects mapping indices by the strategy, ascending. TopK keeps the k best
// initial log-likelihoods; SpreadK starts from the best and adds the mapping
// farthest (in initial log-likelihood) from the current selection. Ties go to
// the lower index. k >= size returns every mapping.
inline std::vector<std::size_t> select_start_indices(const MappingSpace& space, const Dataset& data,
                                                     const StartStrategy& strategy,
                                                     unsigned threads = default_threads()) {
  const std::size_t n = space.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (strategy.kind == StartStrategy::Kind::All || strategy.k >= n) return all;

  const auto ll = initial_log_likelihoods(space, data, threads);
  std::vector<std::size_t> chosen;
  if (strategy.kind == StartStrategy::Kind::TopK) {
    std::stable_sort(all.begin(), all.end(), [&](std::size_t a, std::size_t b) { return ll[a] > ll[b]; });
    chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(strategy.k));
  } else {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (ll[i] > ll[best]) best = i;
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<bool> taken(n, false);
    std::size_t pick = best;
    while (chosen.size() < strategy.k) {
      chosen.push_back(pick);
      taken[pick] = true;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::isfinite(ll[i]) ? std::abs(ll[i] - ll[pick]) : -1.0;
        dist[i] = std::min(dist[i], d);
      }
      std::size_t next = n;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && (next == n || dist[i] > dist[next])) next = i;
      if (next == n) break;
      pick = next;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// Starting mappings for the nine-strata (or larger) model, chosen by initial
// log-likelihood without running EM.
inline std::vector<StartingMapping> nine_strata_starts(const MappingSpace& space, const Dataset& data,
                                                       const StartStrategy& strategy,
                                                       unsigned threads = default_threads()) {
  std::vector<StartingMapping> out;
  for (std::size_t i : select_start_indices(space, data, strategy, threads)) out.push_back(space.at(i));
  return out;
}

}  // namespace stratfit
