#pragma once

// Monte Carlo parameter-recovery studies: generate data under a known
// principal-strata model, refit with the full starting-mapping machinery and
// score how well locations, probabilities and strata labels are recovered.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stratfit/dataset.hpp"
#include "stratfit/distributions.hpp"
#include "stratfit/error.hpp"
#include "stratfit/fit.hpp"
#include "stratfit/model.hpp"
#include "stratfit/parallel.hpp"

namespace stratfit {

enum class ProbScenario { Unequal, OneSmall, Uniform };

inline std::string_view to_string(ProbScenario p) {
  switch (p) {
    case ProbScenario::Unequal: return "unequal";
    case ProbScenario::OneSmall: return "onesmall";
    case ProbScenario::Uniform: return "uniform";
  }
  return "unequal";
}

struct SimConfig {
  int n_per_arm = 1000;
  double dispersion_sd = 1.6;  // adjacent-mean gap within a cell, in component SDs
  ProbScenario prob_scenario = ProbScenario::Unequal;
  ComponentFamily family = ComponentFamily::Normal;
  std::optional<Misspecification> shape;  // unset: exact family draws
  int k_levels = 2;
  double effect = 1.0;  // treatment minus control location in every stratum
  Eigen::Vector2d sds{1.0, 1.0};
  std::optional<ModelParams> true_params;
  int replicates = 100;
  std::uint64_t seed = 1;

  void validate() const {
    if (k_levels < 2) throw InputError("k_levels must be >= 2");
    if (n_per_arm < 2 * k_levels * k_levels) throw InputError("n_per_arm must be >= 2*k_levels^2");
    if (!(dispersion_sd >= 0.0)) throw InputError("dispersion_sd must be >= 0");
    if (replicates < 1) throw InputError("replicates must be >= 1");
    if (!(sds.array() > 0.0).all()) throw InputError("component SDs must be positive");
    if (const auto* ht = shape ? std::get_if<HeavyTail>(&*shape) : nullptr; ht && !(ht->df > 2.0))
      throw InputError("heavy-tail df must exceed 2");
    if (true_params) {
      true_params->validate();
      if (true_params->grid.k_levels() != k_levels) throw InputError("true_params grid does not match k_levels");
    }
  }
};

inline Eigen::VectorXd scenario_probs(ProbScenario scenario, const StrataGrid& grid) {
  const int n = grid.size();
  Eigen::VectorXd p(n);
  switch (scenario) {
    case ProbScenario::Uniform:
      p.setConstant(1.0 / n);
      break;
    case ProbScenario::Unequal:
      for (int s = 0; s < n; ++s) p(s) = n - s;
      p /= p.sum();
      break;
    case ProbScenario::OneSmall:
      if (n == 4) {
        p << 0.45, 0.30, 0.20, 0.05;
      } else {
        p.setConstant(0.95 / (n - 1));
        p(n - 1) = 0.05;
      }
      break;
  }
  return p;
}

// Generating parameters. Locations are
//   effect * t + dispersion * sd_t * (z0 - z1),
// so compatible strata within every observed cell sit dispersion SDs apart.
inline ModelParams true_params(const SimConfig& config) {
  if (config.true_params) return *config.true_params;
  const StrataGrid grid(config.k_levels);
  ModelParams p = ModelParams::zeros(grid, config.family);
  p.probs = scenario_probs(config.prob_scenario, grid);
  p.scales = config.sds;
  for (int s = 0; s < grid.size(); ++s) {
    const Stratum& st = grid.stratum(s);
    for (int arm = 0; arm < 2; ++arm)
      p.locations(s, arm) = config.effect * arm + config.dispersion_sd * config.sds(arm) * (st.z0 - st.z1);
  }
  return p;
}

inline std::mt19937_64 replicate_rng(std::uint64_t seed, std::uint64_t replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32)};
  return std::mt19937_64(seq);
}

// n_per_arm cases per arm (control first), strata drawn from the true
// probabilities, unit weights, singleton clusters.
template <class Rng>
std::pair<Dataset, ModelParams> generate(const SimConfig& config, Rng& rng) {
  config.validate();
  ModelParams truth = true_params(config);
  const StrataGrid& grid = truth.grid;
  std::vector<double> cumulative(static_cast<std::size_t>(grid.size()));
  std::partial_sum(truth.probs.data(), truth.probs.data() + grid.size(), cumulative.begin());
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Dataset data;
  data.cases.reserve(static_cast<std::size_t>(2 * config.n_per_arm));
  for (int arm = 0; arm < 2; ++arm) {
    for (int i = 0; i < config.n_per_arm; ++i) {
      const double u = unif(rng) * cumulative.back();
      int s = static_cast<int>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
      s = std::min(s, grid.size() - 1);
      const ComponentParams cp{truth.location(s, arm), truth.scales(arm), config.family};
      Case c;
      c.arm = arm;
      c.z = grid.observed_level(s, arm);
      c.y = config.shape ? sample_misspecified(cp, *config.shape, rng) : sample(cp, rng);
      c.weight = 1.0;
      c.cluster = static_cast<std::int64_t>(data.cases.size());
      data.cases.push_back(c);
    }
  }
  return {std::move(data), std::move(truth)};
}

struct LabelScore {
  bool correct = false;  // every fitted location within half a gap of its own truth
  bool swapped = false;  // not correct, but correct after relabeling within cells
};

// Label assignment check. A stratum's fitted location must fall within half
// the true adjacent gap (dispersion * SD) of its own true value, for every
// stratum and arm.
inline LabelScore score_labels(const ModelParams& fitted, const ModelParams& truth, double dispersion_sd) {
  const StrataGrid& grid = truth.grid;
  LabelScore score;
  bool all_identity = true;
  bool all_permutable = true;
  for (const Cell& cell : observed_cells(grid)) {
    const double half_gap = 0.5 * dispersion_sd * truth.scales(cell.arm);
    const auto& compat = grid.compatible(cell.arm, cell.level);
    auto matches = [&](const std::vector<int>& perm) {
      for (std::size_t j = 0; j < compat.size(); ++j) {
        const double est = fitted.location(compat[static_cast<std::size_t>(perm[j])], cell.arm);
        if (!(std::abs(est - truth.location(compat[j], cell.arm)) < half_gap)) return false;
      }
      return true;
    };
    std::vector<int> perm(compat.size());
    std::iota(perm.begin(), perm.end(), 0);
    const bool identity = matches(perm);
    bool any = identity;
    while (!any && std::next_permutation(perm.begin(), perm.end())) any = matches(perm);
    all_identity = all_identity && identity;
    all_permutable = all_permutable && any;
  }
  score.correct = all_identity;
  score.swapped = !all_identity && all_permutable;
  return score;
}

struct ReplicateResult {
  int replicate = 0;
  bool failed = false;
  std::string error;
  ModelParams fitted;
  double loglik = 0.0;
  std::size_t mapping_id = 0;
  int iterations = 0;
  bool converged = false;
  LabelScore labels;
  Eigen::MatrixXd location_error;  // (fitted - truth) / sd_t, strata x 2
  Eigen::VectorXd prob_error;      // fitted - truth
  // Other starts that reached a different labeling (some location more than
  // a quarter SD away from the winner's) within 1e-4 relative log-likelihood.
  int near_optimal_alternatives = 0;
};

struct RecoveryReport {
  SimConfig config;
  ModelParams truth;
  std::vector<ReplicateResult> replicates;
  Eigen::MatrixXd location_rmse;              // SD units
  Eigen::MatrixXd location_median_abs_error;  // SD units
  Eigen::MatrixXd location_mean;              // mean fitted location
  double fraction_label_correct = 0.0;        // failures count as incorrect
  double fraction_label_swapped = 0.0;
  double fraction_near_optimal_alternatives = 0.0;
  double mean_abs_prob_error = 0.0;
  int failures = 0;
  // Uniform strata probabilities, or competing near-optimal labelings in at
  // least 80% of replicates.
  bool under_identified = false;
};

inline int count_near_optimal_alternatives(const FitResult& fit, double rel_tol = 1e-4, double location_tol = 0.25) {
  const Eigen::MatrixXd winner = fit.params.location_table();
  Eigen::Vector2d scales = fit.params.scales;
  int count = 0;
  for (const TraceEntry& t : fit.trace) {
    if (t.failed || t.mapping_id == fit.mapping_id) continue;
    if (!(std::abs(t.loglik - fit.loglik) <= rel_tol * std::abs(fit.loglik))) continue;
    const Eigen::MatrixXd alt = t.params.location_table();
    bool differs = false;
    for (Eigen::Index s = 0; s < alt.rows(); ++s)
      for (int arm = 0; arm < 2; ++arm)
        differs = differs || std::abs(alt(s, arm) - winner(s, arm)) > location_tol * scales(arm);
    count += differs;
  }
  return count;
}

inline ReplicateResult run_replicate(const SimConfig& config, int replicate, const ModelSpec& spec,
                                     const FitConfig& fit_config) {
  auto rng = replicate_rng(config.seed, static_cast<std::uint64_t>(replicate));
  auto [data, truth] = generate(config, rng);
  ReplicateResult r;
  r.replicate = replicate;
  try {
    FitResult f = fit(data, spec, fit_config);
    r.fitted = f.params;
    r.loglik = f.loglik;
    r.mapping_id = f.mapping_id;
    r.iterations = f.iterations;
    r.converged = f.converged;
    r.labels = score_labels(f.params, truth, config.dispersion_sd);
    const Eigen::MatrixXd fitted_loc = f.params.location_table();
    const Eigen::MatrixXd true_loc = truth.location_table();
    r.location_error = fitted_loc - true_loc;
    for (int arm = 0; arm < 2; ++arm) r.location_error.col(arm) /= truth.scales(arm);
    r.prob_error = f.params.probs - truth.probs;
    r.near_optimal_alternatives = count_near_optimal_alternatives(f);
  } catch (const std::exception& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

inline void summarize(RecoveryReport& report) {
  const int strata = report.truth.grid.size();
  const auto n = static_cast<double>(report.replicates.size());
  report.location_rmse = Eigen::MatrixXd::Zero(strata, 2);
  report.location_mean = Eigen::MatrixXd::Zero(strata, 2);
  report.location_median_abs_error = Eigen::MatrixXd::Constant(strata, 2, std::numeric_limits<double>::quiet_NaN());
  report.failures = 0;
  int ok = 0, correct = 0, swapped = 0, alternatives = 0;
  double prob_err = 0.0;
  for (const auto& r : report.replicates) {
    if (r.failed) {
      ++report.failures;
      continue;
    }
    ++ok;
    correct += r.labels.correct;
    swapped += r.labels.swapped;
    alternatives += r.near_optimal_alternatives > 0;
    report.location_rmse += r.location_error.array().square().matrix();
    report.location_mean += r.fitted.location_table();
    prob_err += r.prob_error.cwiseAbs().mean();
  }
  if (ok > 0) {
    report.location_rmse = (report.location_rmse / ok).cwiseSqrt();
    report.location_mean /= ok;
    report.mean_abs_prob_error = prob_err / ok;
    for (int s = 0; s < strata; ++s)
      for (int arm = 0; arm < 2; ++arm) {
        std::vector<double> errs;
        for (const auto& r : report.replicates)
          if (!r.failed) errs.push_back(std::abs(r.location_error(s, arm)));
        std::sort(errs.begin(), errs.end());
        const std::size_t m = errs.size();
        report.location_median_abs_error(s, arm) = m % 2 ? errs[m / 2] : 0.5 * (errs[m / 2 - 1] + errs[m / 2]);
      }
  }
  report.fraction_label_correct = n > 0 ? correct / n : 0.0;
  report.fraction_label_swapped = n > 0 ? swapped / n : 0.0;
  report.fraction_near_optimal_alternatives = ok > 0 ? static_cast<double>(alternatives) / ok : 0.0;
  report.under_identified = report.config.prob_scenario == ProbScenario::Uniform ||
                            report.fraction_near_optimal_alternatives >= 0.8;
}

// Generating family comes from the config; `fit_family` overrides the family
// used for fitting (the misspecification study always fits normal).
inline RecoveryReport run_config(const SimConfig& config, const FitConfig& fit_config = {},
                                 std::optional<ComponentFamily> fit_family = std::nullopt,
                                 unsigned threads = default_threads()) {
  config.validate();
  RecoveryReport report;
  report.config = config;
  report.truth = true_params(config);
  ModelSpec spec{StrataGrid(config.k_levels), fit_family.value_or(config.family), MeanStructure::Saturated};
  FitConfig inner = fit_config;
  inner.threads = 1;
  report.replicates.resize(static_cast<std::size_t>(config.replicates));
  parallel_for(report.replicates.size(), threads, [&](std::size_t r) {
    report.replicates[r] = run_replicate(config, static_cast<int>(r), spec, inner);
  });
  summarize(report);
  return report;
}

inline std::vector<RecoveryReport> run_grid(const std::vector<SimConfig>& configs, const FitConfig& fit_config = {},
                                            unsigned threads = default_threads()) {
  std::vector<RecoveryReport> out;
  for (const auto& c : configs) out.push_back(run_config(c, fit_config, std::nullopt, threads));
  return out;
}

struct MisspecificationReport {
  RecoveryReport baseline;               // normal generation
  std::vector<RecoveryReport> shaped;    // one per shape, normal fit
  std::vector<double> label_degradation; // baseline minus shaped label-correct fraction
};

inline MisspecificationReport misspecification_study(SimConfig base, const std::vector<Misspecification>& shapes,
                                                     const FitConfig& fit_config = {},
                                                     unsigned threads = default_threads()) {
  if (base.family != ComponentFamily::Normal) throw InputError("misspecification study requires the normal family");
  base.shape.reset();
  MisspecificationReport out;
  out.baseline = run_config(base, fit_config, ComponentFamily::Normal, threads);
  for (const auto& shape : shapes) {
    SimConfig c = base;
    c.shape = shape;
    out.shaped.push_back(run_config(c, fit_config, ComponentFamily::Normal, threads));
    out.label_degradation.push_back(out.baseline.fraction_label_correct - out.shaped.back().fraction_label_correct);
  }
  return out;
}

}  // namespace stratfit
