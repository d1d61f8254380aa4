#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stratfit/error.hpp"
#include "stratfit/model.hpp"
#include "stratfit/strata_grid.hpp"

namespace stratfit {

struct Case {
  double y = 0.0;
  int arm = 0;    // 1 = treatment, 0 = control
  int z = 0;      // observed institutionalization level
  double weight = 1.0;
  std::int64_t cluster = 0;
};

struct Dataset {
  std::vector<Case> cases;

  std::size_t size() const { return cases.size(); }
};

// Observed (arm, level) cell.
struct Cell {
  int arm = 0;
  int level = 0;

  friend bool operator==(const Cell&, const Cell&) = default;
};

// Cells in the canonical order used for warm starts and mapping enumeration:
// treatment levels 0..z_max, then control levels 0..z_max.
inline std::vector<Cell> observed_cells(const StrataGrid& grid) {
  std::vector<Cell> cells;
  for (int arm : {1, 0})
    for (int z = 0; z < grid.k_levels(); ++z) cells.push_back({arm, z});
  return cells;
}

inline int cell_index(const StrataGrid& grid, int arm, int level) {
  return (arm == 1 ? 0 : grid.k_levels()) + level;
}

// Per-cell positive-weight totals in observed_cells order.
inline std::vector<double> cell_weights(const Dataset& data, const StrataGrid& grid) {
  std::vector<double> w(static_cast<std::size_t>(2 * grid.k_levels()), 0.0);
  for (const Case& c : data.cases)
    if (c.weight > 0.0 && c.z >= 0 && c.z < grid.k_levels() && (c.arm == 0 || c.arm == 1))
      w[static_cast<std::size_t>(cell_index(grid, c.arm, c.z))] += c.weight;
  return w;
}

inline std::vector<Cell> empty_cells(const Dataset& data, const StrataGrid& grid) {
  const auto w = cell_weights(data, grid);
  const auto cells = observed_cells(grid);
  std::vector<Cell> empty;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!(w[i] > 0.0)) empty.push_back(cells[i]);
  return empty;
}

// Checks every case against the grid and family. Throws InputError naming
// the offending case (0-based) or cell.
inline void validate_dataset(const Dataset& data, const StrataGrid& grid, ComponentFamily family,
                             bool require_all_cells = true) {
  for (std::size_t i = 0; i < data.cases.size(); ++i) {
    const Case& c = data.cases[i];
    const std::string where = "case " + std::to_string(i);
    if (c.arm != 0 && c.arm != 1) throw InputError(where + ": arm must be 0 or 1");
    if (c.z < 0 || c.z >= grid.k_levels())
      throw InputError(where + ": institutionalization level outside [0, " +
                       std::to_string(grid.k_levels()) + ")");
    if (!std::isfinite(c.weight) || c.weight < 0.0) throw InputError(where + ": weight must be >= 0");
    if (!std::isfinite(c.y)) throw InputError(where + ": outcome must be finite");
    if (family == ComponentFamily::Tobit && c.y < 0.0)
      throw InputError(where + ": negative outcome under censored family");
  }
  if (require_all_cells) {
    const auto empty = empty_cells(data, grid);
    if (!empty.empty())
      throw InputError("empty cell (t=" + std::to_string(empty.front().arm) +
                       ", z=" + std::to_string(empty.front().level) +
                       "): every observed cell needs a positively weighted case");
  }
}

// Maps outcomes within 1e-12 of zero to exactly zero for the tobit family.
inline void snap_censored_zeros(Dataset& data) {
  for (Case& c : data.cases)
    if (c.y >= 0.0 && c.y < 1e-12) c.y = 0.0;
}

// Kish effective sample size (sum w)^2 / sum w^2 over one arm.
inline double effective_sample_size(const Dataset& data, int arm) {
  double sw = 0.0;
  double sw2 = 0.0;
  for (const Case& c : data.cases) {
    if (c.arm != arm) continue;
    sw += c.weight;
    sw2 += c.weight * c.weight;
  }
  if (!(sw2 > 0.0)) throw InputError("empty arm");
  return sw * sw / sw2;
}

// Weighted mean and SD of the outcome within one arm.
inline std::pair<double, double> weighted_arm_moments(const Dataset& data, int arm) {
  double sw = 0.0, sy = 0.0;
  for (const Case& c : data.cases)
    if (c.arm == arm) {
      sw += c.weight;
      sy += c.weight * c.y;
    }
  if (!(sw > 0.0)) return {0.0, 0.0};
  const double mean = sy / sw;
  double ss = 0.0;
  for (const Case& c : data.cases)
    if (c.arm == arm) ss += c.weight * (c.y - mean) * (c.y - mean);
  return {mean, std::sqrt(ss / sw)};
}

}  // namespace stratfit
