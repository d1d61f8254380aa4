#pragma once

// Goodness-of-fit summaries of a fitted model: posterior-membership
// histograms per observed cell, model-implied versus observed marginal
// means and institutionalization rates, and the per-start solution trace.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "stratfit/dataset.hpp"
#include "stratfit/distributions.hpp"
#include "stratfit/fit.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/model.hpp"

namespace stratfit {

inline constexpr int kHistogramBins = 20;

struct CellHistogram {
  Cell cell;
  int designated_stratum = 0;  // lowest-index compatible stratum
  std::vector<int> counts;     // kHistogramBins equal bins on [0, 1]
  int cases = 0;
};

inline int histogram_bin(double p) {
  const int b = static_cast<int>(std::floor(p * kHistogramBins));
  return std::clamp(b, 0, kHistogramBins - 1);
}

// Histogram, per observed cell, of every case's posterior probability of the
// cell's lowest-index compatible stratum.
inline std::vector<CellHistogram> posterior_histogram(const ModelParams& params, const PosteriorMatrix& posterior,
                                                      const Dataset& data) {
  std::vector<CellHistogram> out;
  for (const Cell& cell : observed_cells(params.grid)) {
    CellHistogram h;
    h.cell = cell;
    h.designated_stratum = params.grid.compatible(cell.arm, cell.level).front();
    h.counts.assign(kHistogramBins, 0);
    out.push_back(std::move(h));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Case& c = data.cases[i];
    CellHistogram& h = out[static_cast<std::size_t>(cell_index(params.grid, c.arm, c.z))];
    ++h.counts[static_cast<std::size_t>(histogram_bin(posterior(static_cast<Eigen::Index>(i), h.designated_stratum)))];
    ++h.cases;
  }
  return out;
}

inline std::vector<CellHistogram> posterior_histogram(const FitResult& fit, const Dataset& data) {
  return posterior_histogram(fit.params, fit.posterior, data);
}

struct MarginalRow {
  int arm = 0;
  std::string quantity;  // "mean_z=<level>" or "prop_institutionalized"
  double predicted = std::numeric_limits<double>::quiet_NaN();
  double observed = std::numeric_limits<double>::quiet_NaN();
  bool excluded = false;  // arm carries no positive weight
};

// Model-implied cell means (observed-outcome scale, so tobit components use
// the censored mean) and P(Z_t > 0), beside the weighted observed values.
inline std::vector<MarginalRow> marginal_fit_table(const ModelParams& params, const Dataset& data) {
  const StrataGrid& grid = params.grid;
  const int k = grid.k_levels();
  std::vector<MarginalRow> rows;
  for (int arm : {1, 0}) {
    std::vector<double> sw(static_cast<std::size_t>(k), 0.0), sy(sw);
    double arm_w = 0.0, inst_w = 0.0;
    for (const Case& c : data.cases) {
      if (c.arm != arm || !(c.weight > 0.0)) continue;
      sw[static_cast<std::size_t>(c.z)] += c.weight;
      sy[static_cast<std::size_t>(c.z)] += c.weight * c.y;
      arm_w += c.weight;
      if (c.z > 0) inst_w += c.weight;
    }
    const bool excluded = !(arm_w > 0.0);
    for (int z = 0; z < k; ++z) {
      MarginalRow row;
      row.arm = arm;
      row.quantity = "mean_z=" + std::to_string(z);
      row.excluded = excluded;
      double mass = 0.0, mean = 0.0;
      for (int s : grid.compatible(arm, z)) {
        mass += params.probs(s);
        mean += params.probs(s) * observed_mean({params.location(s, arm), params.scales(arm), params.family});
      }
      if (mass > 0.0) row.predicted = mean / mass;
      if (sw[static_cast<std::size_t>(z)] > 0.0) row.observed = sy[static_cast<std::size_t>(z)] / sw[static_cast<std::size_t>(z)];
      rows.push_back(row);
    }
    MarginalRow prop;
    prop.arm = arm;
    prop.quantity = "prop_institutionalized";
    prop.excluded = excluded;
    prop.predicted = 0.0;
    for (int s = 0; s < grid.size(); ++s)
      if (grid.observed_level(s, arm) > 0) prop.predicted += params.probs(s);
    if (!excluded) prop.observed = inst_w / arm_w;
    rows.push_back(prop);
  }
  return rows;
}

inline std::vector<MarginalRow> marginal_fit_table(const FitResult& fit, const Dataset& data) {
  return marginal_fit_table(fit.params, data);
}

struct TraceRow {
  std::size_t mapping_id = 0;
  double neg_loglik = 0.0;
  double pct_increase = 0.0;   // over the best start's negative log-likelihood
  Eigen::MatrixXd locations;   // strata x 2 (arm 0, arm 1)
  bool converged = false;
  bool failed = false;
};

inline std::vector<TraceRow> solution_trace_table(const FitResult& fit) {
  const double best = -fit.loglik;
  std::vector<TraceRow> rows;
  for (const TraceEntry& t : fit.trace) {
    TraceRow row;
    row.mapping_id = t.mapping_id;
    row.neg_loglik = -t.loglik;
    row.pct_increase = t.failed ? std::numeric_limits<double>::infinity()
                                : std::max(0.0, 100.0 * (row.neg_loglik - best) / std::abs(best));
    row.locations = t.params.location_table();
    row.converged = t.converged;
    row.failed = t.failed;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace stratfit
