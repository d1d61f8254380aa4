#pragma once

// Principal-strata parameter space: strata probabilities, per-(stratum, arm)
// component locations and per-arm scales, plus the flat unconstrained
// parameterization used by numerical differentiation.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "stratfit/error.hpp"
#include "stratfit/strata_grid.hpp"

namespace stratfit {

// Normal: N(location, scale^2). Tobit: latent N(location, scale^2) censored
// at zero, i.e. point mass Phi(-location/scale) at y = 0 and the normal
// density on y > 0.
enum class ComponentFamily { Normal, Tobit };

// Saturated: one free location per (stratum, arm).
// LinearInZ: location = mu + b1*z1 + b0*z0 + g*z1*z0 per arm.
enum class MeanStructure { Saturated, LinearInZ };

inline std::string_view to_string(ComponentFamily f) {
  return f == ComponentFamily::Normal ? "normal" : "tobit";
}

inline std::string_view to_string(MeanStructure m) {
  return m == MeanStructure::Saturated ? "saturated" : "linear";
}

inline int location_rows(const StrataGrid& grid, MeanStructure structure) {
  return structure == MeanStructure::Saturated ? grid.size() : 4;
}

// Row of the location design matrix for stratum s.
inline Eigen::VectorXd design_row(const StrataGrid& grid, MeanStructure structure, int s) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(location_rows(grid, structure));
  if (structure == MeanStructure::Saturated) {
    x(s) = 1.0;
  } else {
    const Stratum& st = grid.stratum(s);
    x << 1.0, st.z1, st.z0, static_cast<double>(st.z1 * st.z0);
  }
  return x;
}

struct ModelParams {
  StrataGrid grid{2};
  ComponentFamily family = ComponentFamily::Normal;
  MeanStructure mean_structure = MeanStructure::Saturated;
  Eigen::VectorXd probs;      // one per stratum
  Eigen::MatrixXd locations;  // location_rows x 2, column = arm
  Eigen::Vector2d scales{1.0, 1.0};

  static ModelParams zeros(const StrataGrid& grid, ComponentFamily family,
                           MeanStructure structure = MeanStructure::Saturated) {
    ModelParams p;
    p.grid = grid;
    p.family = family;
    p.mean_structure = structure;
    p.probs = Eigen::VectorXd::Constant(grid.size(), 1.0 / grid.size());
    p.locations = Eigen::MatrixXd::Zero(location_rows(grid, structure), 2);
    return p;
  }

  double location(int s, int arm) const {
    if (mean_structure == MeanStructure::Saturated) return locations(s, arm);
    return design_row(grid, mean_structure, s).dot(locations.col(arm));
  }

  // Per-(stratum, arm) location table, grid.size() x 2.
  Eigen::MatrixXd location_table() const {
    Eigen::MatrixXd table(grid.size(), 2);
    for (int s = 0; s < grid.size(); ++s)
      for (int arm = 0; arm < 2; ++arm) table(s, arm) = location(s, arm);
    return table;
  }

  void validate() const {
    if (probs.size() != grid.size()) throw InputError("probs size does not match strata grid");
    if (locations.rows() != location_rows(grid, mean_structure) || locations.cols() != 2)
      throw InputError("location table has the wrong shape for the mean structure");
    if ((probs.array() < 0.0).any() || !probs.allFinite())
      throw InputError("strata probabilities must be nonnegative");
    if (std::abs(probs.sum() - 1.0) > 1e-12) throw InputError("strata probabilities must sum to 1");
    if (!(scales.array() > 0.0).all() || !scales.allFinite())
      throw InputError("scales must be strictly positive");
    if (!locations.allFinite()) throw InputError("locations must be finite");
  }
};

// Length of the flat vector: (S - 1) log-ratios, all location coefficients
// (arm 0 column first), then the two log scales.
inline int packed_size(const ModelParams& shape) {
  return shape.grid.size() - 1 + 2 * static_cast<int>(shape.locations.rows()) + 2;
}

inline int packed_location_offset(const ModelParams& shape) { return shape.grid.size() - 1; }

inline int packed_scale_offset(const ModelParams& shape) {
  return packed_location_offset(shape) + 2 * static_cast<int>(shape.locations.rows());
}

inline Eigen::VectorXd pack(const ModelParams& params) {
  Eigen::VectorXd flat(packed_size(params));
  const int last = params.grid.size() - 1;
  const double log_ref = std::log(params.probs(last));
  for (int s = 0; s < last; ++s) flat(s) = std::log(params.probs(s)) - log_ref;
  const auto rows = params.locations.rows();
  int k = packed_location_offset(params);
  for (int arm = 0; arm < 2; ++arm)
    for (Eigen::Index r = 0; r < rows; ++r) flat(k++) = params.locations(r, arm);
  flat(k++) = std::log(params.scales(0));
  flat(k) = std::log(params.scales(1));
  return flat;
}

// Inverse of pack. `shape` supplies grid, family and mean structure; its
// numeric values are ignored.
inline ModelParams unpack(const Eigen::VectorXd& flat, const ModelParams& shape) {
  if (flat.size() != packed_size(shape)) throw InputError("flat parameter vector has the wrong length");
  ModelParams p = shape;
  const int last = shape.grid.size() - 1;
  double max_ratio = 0.0;
  for (int s = 0; s < last; ++s) max_ratio = std::max(max_ratio, flat(s));
  double total = 0.0;
  for (int s = 0; s < last; ++s) {
    p.probs(s) = std::exp(flat(s) - max_ratio);
    total += p.probs(s);
  }
  p.probs(last) = std::exp(-max_ratio);
  total += p.probs(last);
  p.probs /= total;
  const auto rows = shape.locations.rows();
  int k = packed_location_offset(shape);
  for (int arm = 0; arm < 2; ++arm)
    for (Eigen::Index r = 0; r < rows; ++r) p.locations(r, arm) = flat(k++);
  p.scales(0) = std::exp(flat(k++));
  p.scales(1) = std::exp(flat(k));
  return p;
}

// Saturated-structure copy of a LinearInZ parameter set.
inline ModelParams to_saturated(const ModelParams& params) {
  if (params.mean_structure == MeanStructure::Saturated) return params;
  ModelParams out = params;
  out.mean_structure = MeanStructure::Saturated;
  out.locations = params.location_table();
  return out;
}

}  // namespace stratfit
