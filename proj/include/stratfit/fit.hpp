#pragma once

// Multi-start EM for the principal-strata mixture: every selected starting
// mapping runs EM independently and the highest log-likelihood wins.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stratfit/dataset.hpp"
#include "stratfit/error.hpp"
#include "stratfit/likelihood.hpp"
#include "stratfit/m_step.hpp"
#include "stratfit/model.hpp"
#include "stratfit/parallel.hpp"
#include "stratfit/warm_start.hpp"

namespace stratfit {

struct ModelSpec {
  StrataGrid grid{2};
  ComponentFamily family = ComponentFamily::Normal;
  MeanStructure mean_structure = MeanStructure::Saturated;
};

struct FitConfig {
  double tol = 1e-9;  // relative log-likelihood change
  int max_iter = 2000;
  // Unset: every mapping for k_levels <= 2, TopK(30) above.
  std::optional<StartStrategy> starts;
  unsigned threads = 0;  // 0 = default_threads()
  bool keep_history = false;
};

inline constexpr double kTieTolerance = 1e-8;

struct EmRun {
  ModelParams params;
  double loglik = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  bool scale_floor_active = false;
  std::vector<double> history;  // log-likelihood after each iteration, if kept
};

// EM from one starting point. Stops when the relative log-likelihood change
// drops below config.tol or after config.max_iter M-steps.
inline EmRun run_em(const ModelParams& start, const Dataset& data, const FitConfig& config,
                    const MStepOptions& mstep_options) {
  EmRun run;
  run.params = start;
  Expectation ex = expectation(run.params, data);
  if (config.keep_history) run.history.push_back(ex.loglik);
  for (int iter = 1; iter <= config.max_iter; ++iter) {
    MStepResult ms = m_step(ex.posterior, data, run.params, mstep_options);
    Expectation next = expectation(ms.params, data);
    const double change = next.loglik - ex.loglik;
    run.params = std::move(ms.params);
    run.scale_floor_active = ms.scale_floor_active;
    ex = std::move(next);
    run.iterations = iter;
    if (config.keep_history) run.history.push_back(ex.loglik);
    if (std::abs(change) <= config.tol * std::abs(ex.loglik)) {
      run.converged = true;
      break;
    }
  }
  run.loglik = ex.loglik;
  return run;
}

struct TraceEntry {
  std::size_t mapping_id = 0;
  double loglik = -std::numeric_limits<double>::infinity();
  ModelParams params;
  int iterations = 0;
  bool converged = false;
  bool failed = false;
  bool scale_floor_active = false;
  std::string error;
  std::vector<double> history;
};

struct FitResult {
  ModelParams params;
  double loglik = 0.0;
  PosteriorMatrix posterior;
  std::size_t mapping_id = 0;
  int iterations = 0;
  bool converged = false;
  bool scale_floor_active = false;
  std::vector<TraceEntry> trace;  // one row per start, ascending mapping id
  // Other mappings whose final log-likelihood is within kTieTolerance of the
  // winner's.
  std::vector<std::size_t> tied_mappings;
  std::size_t mapping_space_size = 0;
};

class FitError : public NumericalError {
 public:
  FitError(const std::string& what, std::vector<TraceEntry> trace)
      : NumericalError(what), trace_(std::move(trace)) {}
  const std::vector<TraceEntry>& trace() const { return trace_; }

 private:
  std::vector<TraceEntry> trace_;
};

inline StartStrategy effective_strategy(const ModelSpec& spec, const FitConfig& config) {
  if (config.starts) return *config.starts;
  return spec.grid.k_levels() <= 2 ? StartStrategy::all() : StartStrategy::top(30);
}

// Winner: highest final log-likelihood; mappings within kTieTolerance of it
// resolve to the lowest mapping id. Returns the trace position.
inline std::size_t pick_winner(const std::vector<TraceEntry>& trace, std::vector<std::size_t>& tied) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& t : trace)
    if (!t.failed) best = std::max(best, t.loglik);
  std::size_t winner = trace.size();
  tied.clear();
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (trace[i].failed || !(trace[i].loglik >= best - kTieTolerance)) continue;
    if (winner == trace.size()) winner = i;
    else tied.push_back(trace[i].mapping_id);
  }
  return winner;
}

inline FitResult fit(const Dataset& data, const ModelSpec& spec, const FitConfig& config = {}) {
  validate_dataset(data, spec.grid, spec.family);
  if (spec.grid.k_levels() > 16) throw InputError("at most 16 institutionalization levels are supported");

  MappingSpace space(warm_start_cells(data, spec.grid, spec.family), spec.mean_structure);
  space.set_scale_fallback({std::max(1e-3, weighted_arm_moments(data, 0).second),
                            std::max(1e-3, weighted_arm_moments(data, 1).second)});
  const unsigned threads = config.threads ? config.threads : default_threads();
  const auto starts = select_start_indices(space, data, effective_strategy(spec, config), threads);

  MStepOptions mstep;
  mstep.scale_floor = default_scale_floors(data);

  std::vector<TraceEntry> trace(starts.size());
  parallel_for(starts.size(), threads, [&](std::size_t k) {
    TraceEntry& entry = trace[k];
    entry.mapping_id = starts[k];
    StartingMapping mapping = space.at(starts[k]);
    entry.params = mapping.initial;
    try {
      EmRun run = run_em(mapping.initial, data, config, mstep);
      entry.loglik = run.loglik;
      entry.params = std::move(run.params);
      entry.iterations = run.iterations;
      entry.converged = run.converged;
      entry.scale_floor_active = run.scale_floor_active;
      entry.history = std::move(run.history);
    } catch (const NumericalError& e) {
      entry.failed = true;
      entry.error = e.what();
    }
  });

  bool any_converged = false;
  for (const auto& t : trace) any_converged = any_converged || (t.converged && !t.failed);
  if (!any_converged) throw FitError("no starting mapping converged", std::move(trace));

  FitResult result;
  const std::size_t w = pick_winner(trace, result.tied_mappings);
  const TraceEntry& best = trace[w];
  result.params = best.params;
  Expectation ex = expectation(best.params, data);
  result.loglik = ex.loglik;
  result.posterior = std::move(ex.posterior);
  result.mapping_id = best.mapping_id;
  result.iterations = best.iterations;
  result.converged = best.converged;
  result.scale_floor_active = best.scale_floor_active;
  result.mapping_space_size = space.size();
  result.trace = std::move(trace);
  return result;
}

}  // namespace stratfit
