// stratfit command-line front end.
//
//   stratfit fit --data cases.csv --out DIR [--family tobit] [--dichotomize] ...
//   stratfit simulate --config grid.cfg --seed 1 --out DIR
//   stratfit diagnose --fit DIR/fit.json --data cases.csv --out DIR2
//
// Exit codes: 0 success, 2 input error, 3 numerical failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stratfit/stratfit.hpp"

namespace fs = std::filesystem;
using namespace stratfit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

std::ofstream open_output(const fs::path& dir, const std::string& name) {
  std::ofstream os(dir / name, std::ios::binary);
  if (!os) throw InputError("cannot write " + (dir / name).string());
  return os;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory " + dir.string());
}

// trace.csv, histogram.csv and marginal.csv: shared by fit and diagnose.
void write_diagnostics(const fs::path& out, const FitResult& f, const Dataset& data) {
  {
    auto os = open_output(out, "trace.csv");
    io::write_trace_csv(os, solution_trace_table(f), f.params.grid);
  }
  {
    auto os = open_output(out, "histogram.csv");
    io::write_histogram_csv(os, posterior_histogram(f, data), f.params.grid);
  }
  {
    auto os = open_output(out, "marginal.csv");
    io::write_marginal_csv(os, marginal_fit_table(f, data));
  }
}

nlohmann::json summary_json(const FitResult& f, const EffectTable& effects, const Dataset& data,
                            const std::string& starts, bool dichotomize) {
  nlohmann::json j;
  j["k_levels"] = f.params.grid.k_levels();
  j["family"] = std::string(to_string(f.params.family));
  j["mean_structure"] = std::string(to_string(f.params.mean_structure));
  j["dichotomize"] = dichotomize;
  j["cases"] = data.size();
  j["starts"] = starts;
  j["starts_used"] = f.trace.size();
  j["mapping_space_size"] = f.mapping_space_size;
  j["loglik"] = f.loglik;
  j["mapping_id"] = f.mapping_id;
  j["iterations"] = f.iterations;
  j["converged"] = f.converged;
  j["scale_floor_active"] = f.scale_floor_active;
  j["tied_mappings"] = f.tied_mappings;
  j["params"] = io::to_json(f.params);
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const auto& r : effects.rows) {
    if (!r.diagonal) continue;
    nlohmann::json e;
    e["z"] = r.coords.z0;
    e["effect"] = r.effect;
    e["observed_scale_effect"] = r.observed_scale_effect;
    e["se_naive"] = num(r.se_naive);
    e["se_cluster"] = num(r.se_cluster);
    j["diagonal_effects"].push_back(e);
  }
  j["se_naive_error"] = effects.naive_error;
  j["se_cluster_error"] = effects.cluster_error;
  return j;
}

struct FitArgs {
  std::string data;
  std::string out;
  std::string family = "normal";
  int levels = 2;
  bool dichotomize = false;
  std::string mean_structure = "saturated";
  double tol = 1e-9;
  int max_iter = 2000;
  std::string starts;
  unsigned threads = 0;
};

int cmd_fit(const FitArgs& a) {
  const ModelSpec spec{StrataGrid(a.levels), io::parse_family(a.family), io::parse_mean_structure(a.mean_structure)};
  FitConfig config;
  config.tol = a.tol;
  config.max_iter = a.max_iter;
  config.threads = a.threads;
  if (!a.starts.empty()) config.starts = io::parse_starts(a.starts);
  const std::string starts_label = io::to_string(effective_strategy(spec, config));

  Dataset data = io::read_dataset_csv(fs::path(a.data), {a.dichotomize});
  if (spec.family == ComponentFamily::Tobit) snap_censored_zeros(data);
  const fs::path out(a.out);
  ensure_dir(out);

  FitResult f;
  try {
    f = fit(data, spec, config);
  } catch (const FitError& e) {
    auto os = open_output(out, "trace.csv");
    std::vector<TraceRow> rows;
    for (const auto& t : e.trace())
      rows.push_back({t.mapping_id, -t.loglik, std::nan(""), t.params.location_table(), t.converged, t.failed});
    io::write_trace_csv(os, rows, spec.grid);
    throw;
  }
  const EffectTable effects = effect_table(f, data);
  {
    auto os = open_output(out, "params.csv");
    io::write_params_csv(os, f.params);
  }
  {
    auto os = open_output(out, "effects.csv");
    io::write_effects_csv(os, effects);
  }
  write_diagnostics(out, f, data);
  {
    auto os = open_output(out, "summary.json");
    os << summary_json(f, effects, data, starts_label, a.dichotomize).dump(2) << '\n';
  }
  io::save_fit(out / "fit.json", f, {a.dichotomize, starts_label});

  std::cout << "log-likelihood " << io::format_double(f.loglik) << " (mapping " << f.mapping_id << ", "
            << f.trace.size() << " starts, " << f.iterations << " iterations)\n";
  for (const auto& r : effects.rows)
    if (r.diagonal)
      std::cout << "effect z=" << r.coords.z0 << ": " << io::format_double(r.effect)
                << "  se " << io::format_double(r.se_naive) << "  cluster se " << io::format_double(r.se_cluster) << '\n';
  if (!effects.naive_error.empty()) std::cerr << "naive SEs unavailable: " << effects.naive_error << '\n';
  if (!effects.cluster_error.empty()) std::cerr << "cluster SEs unavailable: " << effects.cluster_error << '\n';
  if (!f.converged) {
    std::cerr << "best solution did not converge within " << a.max_iter << " iterations\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_diagnose(const std::string& fit_path, const std::string& data_path, const std::string& out_dir) {
  io::LoadedFit loaded = io::load_fit(fs::path(fit_path));
  FitResult& f = loaded.fit;
  Dataset data = io::read_dataset_csv(fs::path(data_path), {loaded.options.dichotomize});
  if (f.params.family == ComponentFamily::Tobit) snap_censored_zeros(data);
  validate_dataset(data, f.params.grid, f.params.family);
  Expectation ex = expectation(f.params, data);
  if (!(std::abs(ex.loglik - f.loglik) <= 1e-9 * std::max(1.0, std::abs(f.loglik))))
    throw InputError("fit file does not match the data (log-likelihood " + io::format_double(ex.loglik) +
                     " vs stored " + io::format_double(f.loglik) + ")");
  f.posterior = std::move(ex.posterior);
  const fs::path out(out_dir);
  ensure_dir(out);
  write_diagnostics(out, f, data);
  return kExitOk;
}

int cmd_simulate(const std::string& config_path, std::uint64_t seed, const std::string& out_dir, unsigned threads) {
  std::ifstream in(config_path);
  if (!in) throw InputError("cannot open config " + config_path);
  const auto jobs = io::parse_sim_config(in, seed);
  if (threads == 0) threads = default_threads();

  std::vector<RecoveryReport> reports;
  std::vector<std::string> roles;
  reports.reserve(jobs.size() * 8);
  for (const auto& job : jobs) {
    FitConfig fc;
    fc.starts = job.starts;
    if (job.misspecification) {
      auto study = misspecification_study(job.config, job.shapes, fc, threads);
      reports.push_back(std::move(study.baseline));
      roles.emplace_back("baseline");
      for (auto& r : study.shaped) {
        reports.push_back(std::move(r));
        roles.emplace_back("misspecified");
      }
    } else {
      reports.push_back(run_config(job.config, fc, std::nullopt, threads));
      roles.emplace_back("grid");
    }
    const auto& last = reports.back();
    std::cerr << "config " << reports.size() - 1 << ": label-correct " << io::format_double(last.fraction_label_correct)
              << ", failures " << last.failures << '\n';
  }

  std::vector<io::LabelledReport> labelled;
  for (std::size_t i = 0; i < reports.size(); ++i) labelled.push_back({static_cast<int>(i), &reports[i]});
  const fs::path out(out_dir);
  ensure_dir(out);
  {
    auto os = open_output(out, "replicates.csv");
    io::write_replicates_csv(os, labelled);
  }
  {
    auto os = open_output(out, "aggregate.csv");
    io::write_aggregate_csv(os, labelled);
  }
  {
    auto os = open_output(out, "grid_summary.csv");
    io::write_grid_summary_csv(os, labelled, roles);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Principal-strata mixture models for treatment effects under post-treatment institutionalization"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the principal-strata model to a y,t,z[,w][,cluster] CSV");
  fit_cmd->add_option("--data,data", fa.data, "Input CSV")->required();
  fit_cmd->add_option("--out", fa.out, "Output directory")->required();
  fit_cmd->add_option("--family", fa.family, "normal|tobit")->check(CLI::IsMember({"normal", "tobit"}));
  fit_cmd->add_option("--levels", fa.levels, "Institutionalization levels")->check(CLI::IsMember({2, 3}));
  fit_cmd->add_flag("--dichotomize", fa.dichotomize, "Map z > 0 to 1");
  fit_cmd->add_option("--mean-structure", fa.mean_structure, "saturated|linear")
      ->check(CLI::IsMember({"saturated", "linear"}));
  fit_cmd->add_option("--tol", fa.tol, "Relative log-likelihood tolerance")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--max-iter", fa.max_iter, "EM iteration cap per start")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--starts", fa.starts, "all|topk:N|spread:N");
  fit_cmd->add_option("--threads", fa.threads, "Worker threads (default: STRATFIT_THREADS or hardware)");

  std::string sim_config, sim_out;
  std::uint64_t sim_seed = 0;
  unsigned sim_threads = 0;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a parameter-recovery simulation grid");
  sim_cmd->add_option("--config", sim_config, "key=value config file")->required();
  sim_cmd->add_option("--seed", sim_seed, "Base seed")->required();
  sim_cmd->add_option("--out", sim_out, "Output directory")->required();
  sim_cmd->add_option("--threads", sim_threads, "Worker threads");

  std::string diag_fit, diag_data, diag_out;
  auto* diag_cmd = app.add_subcommand("diagnose", "Regenerate diagnostics from a saved fit");
  diag_cmd->add_option("--fit", diag_fit, "fit.json written by fit")->required();
  diag_cmd->add_option("--data", diag_data, "The CSV the fit was run on")->required();
  diag_cmd->add_option("--out", diag_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*fit_cmd) return cmd_fit(fa);
    if (*sim_cmd) return cmd_simulate(sim_config, sim_seed, sim_out, sim_threads);
    if (*diag_cmd) return cmd_diagnose(diag_fit, diag_data, diag_out);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}
