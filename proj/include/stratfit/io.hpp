#pragma once

// Text formats: the `y,t,z,w,cluster` input CSV, CSV report tables, the JSON
// fit file consumed by `diagnose`, and key=value simulation configs.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stratfit/dataset.hpp"
#include "stratfit/diagnostics.hpp"
#include "stratfit/error.hpp"
#include "stratfit/fit.hpp"
#include "stratfit/inference.hpp"
#include "stratfit/model.hpp"
#include "stratfit/simulation.hpp"

namespace stratfit::io {

// ---------------------------------------------------------------------------
// Scalars

// Shortest round-trip representation; NA for NaN, Inf/-Inf for infinities.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline ComponentFamily parse_family(std::string_view s) {
  if (s == "normal") return ComponentFamily::Normal;
  if (s == "tobit") return ComponentFamily::Tobit;
  throw InputError("unknown family '" + std::string(s) + "' (expected normal|tobit)");
}

inline MeanStructure parse_mean_structure(std::string_view s) {
  if (s == "saturated") return MeanStructure::Saturated;
  if (s == "linear") return MeanStructure::LinearInZ;
  throw InputError("unknown mean structure '" + std::string(s) + "' (expected saturated|linear)");
}

// "all", "topk:N" or "spread:N".
inline StartStrategy parse_starts(std::string_view s) {
  if (s == "all") return StartStrategy::all();
  const auto colon = s.find(':');
  const auto n = colon == std::string_view::npos ? std::nullopt : parse_int(s.substr(colon + 1));
  if (n && *n >= 1) {
    const auto kind = s.substr(0, colon);
    if (kind == "topk") return StartStrategy::top(static_cast<std::size_t>(*n));
    if (kind == "spread") return StartStrategy::spread(static_cast<std::size_t>(*n));
  }
  throw InputError("invalid starts '" + std::string(s) + "' (expected all|topk:N|spread:N)");
}

inline std::string to_string(const StartStrategy& s) {
  switch (s.kind) {
    case StartStrategy::Kind::All: return "all";
    case StartStrategy::Kind::TopK: return "topk:" + std::to_string(s.k);
    case StartStrategy::Kind::SpreadK: return "spread:" + std::to_string(s.k);
  }
  return "all";
}

// ---------------------------------------------------------------------------
// CSV

// Splits one CSV record. Double-quoted fields may contain commas and "" escapes;
// embedded newlines are not supported.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') field += '"', ++i;
      else if (ch == '"') quoted = false;
      else field += ch;
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, const std::vector<std::string>& header) : os_(os), columns_(header.size()) {
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_) throw std::logic_error("csv row width does not match header");
    for (std::size_t i = 0; i < fields.size(); ++i) os_ << (i ? "," : "") << csv_field(fields[i]);
    os_ << '\n';
  }

 private:
  std::ostream& os_;
  std::size_t columns_;
};

struct ReadOptions {
  bool dichotomize = false;  // z > 0 becomes 1
};

// Reads the `y,t,z[,w][,cluster]` schema (columns in any order, extra columns
// ignored). Cluster labels are arbitrary strings, numbered by first
// appearance; without a cluster column every row is its own cluster. Errors
// cite 1-based data row numbers.
inline Dataset read_dataset_csv(std::istream& in, const ReadOptions& options = {}) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("schema error: empty input, expected header y,t,z[,w][,cluster]");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::map<std::string, std::size_t> col;
  const auto header = split_csv_line(line);
  for (std::size_t i = 0; i < header.size(); ++i) col[std::string(trim(header[i]))] = i;
  for (const char* required : {"y", "t", "z"})
    if (!col.count(required))
      throw InputError(std::string("schema error: missing required column '") + required +
                       "' (expected header y,t,z[,w][,cluster])");
  const auto find = [&](const char* name) -> std::optional<std::size_t> {
    auto it = col.find(name);
    return it == col.end() ? std::nullopt : std::optional(it->second);
  };
  const std::size_t iy = col["y"], it = col["t"], iz = col["z"];
  const auto iw = find("w"), ic = find("cluster");

  Dataset data;
  std::unordered_map<std::string, std::int64_t> cluster_ids;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_csv_line(line);
    const auto fail = [&](const std::string& what) {
      throw InputError("row " + std::to_string(row) + ": " + what);
    };
    if (fields.size() < header.size()) fail("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
    Case c;
    const auto y = parse_double(fields[iy]);
    if (!y || !std::isfinite(*y)) fail("y is not a finite number: '" + fields[iy] + "'");
    c.y = *y;
    const auto t = parse_int(fields[it]);
    if (!t || (*t != 0 && *t != 1)) fail("t must be 0 or 1, found '" + fields[it] + "'");
    c.arm = static_cast<int>(*t);
    const auto z = parse_double(fields[iz]);
    if (!z || !std::isfinite(*z) || *z < 0.0) fail("z must be a non-negative number, found '" + fields[iz] + "'");
    if (options.dichotomize) {
      c.z = *z > 0.0 ? 1 : 0;
    } else {
      if (*z != std::floor(*z) || *z > 1e6) fail("z must be an integer level (use --dichotomize for counts), found '" + fields[iz] + "'");
      c.z = static_cast<int>(*z);
    }
    if (iw) {
      const auto w = parse_double(fields[*iw]);
      if (!w || !std::isfinite(*w) || *w < 0.0) fail("w must be a finite non-negative number, found '" + fields[*iw] + "'");
      c.weight = *w;
    }
    if (ic) {
      const std::string label(trim(fields[*ic]));
      if (label.empty()) fail("empty cluster label");
      c.cluster = cluster_ids.try_emplace(label, static_cast<std::int64_t>(cluster_ids.size())).first->second;
    } else {
      c.cluster = static_cast<std::int64_t>(row - 1);
    }
    data.cases.push_back(c);
  }
  if (data.cases.empty()) throw InputError("schema error: no data rows");
  return data;
}

inline Dataset read_dataset_csv(const std::filesystem::path& path, const ReadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return read_dataset_csv(in, options);
}

inline std::string stratum_label(const Stratum& s) {
  return std::to_string(s.z0) + ":" + std::to_string(s.z1);
}

// params.csv: one row per stratum and arm, then the two scales.
inline void write_params_csv(std::ostream& os, const ModelParams& p) {
  CsvWriter w(os, {"parameter", "stratum", "z0", "z1", "arm", "value"});
  for (int s = 0; s < p.grid.size(); ++s) {
    const Stratum& st = p.grid.stratum(s);
    w.row({"prob", std::to_string(s), std::to_string(st.z0), std::to_string(st.z1), "", format_double(p.probs(s))});
  }
  for (int arm = 0; arm < 2; ++arm)
    for (int s = 0; s < p.grid.size(); ++s) {
      const Stratum& st = p.grid.stratum(s);
      w.row({"location", std::to_string(s), std::to_string(st.z0), std::to_string(st.z1), std::to_string(arm),
             format_double(p.location(s, arm))});
    }
  if (p.mean_structure == MeanStructure::LinearInZ) {
    static const char* names[] = {"intercept", "z1", "z0", "z1z0"};
    for (int arm = 0; arm < 2; ++arm)
      for (int j = 0; j < 4; ++j)
        w.row({std::string("coef_") + names[j], "", "", "", std::to_string(arm), format_double(p.locations(j, arm))});
  }
  for (int arm = 0; arm < 2; ++arm)
    w.row({"scale", "", "", "", std::to_string(arm), format_double(p.scales(arm))});
}

inline void write_effects_csv(std::ostream& os, const EffectTable& table) {
  CsvWriter w(os, {"stratum", "z0", "z1", "diagonal", "effect", "observed_scale_effect", "se_naive", "se_cluster",
                   "significant_naive", "significant_cluster"});
  for (const auto& r : table.rows)
    w.row({std::to_string(r.stratum), std::to_string(r.coords.z0), std::to_string(r.coords.z1), r.diagonal ? "1" : "0",
           format_double(r.effect), format_double(r.observed_scale_effect), format_double(r.se_naive),
           format_double(r.se_cluster), std::isnan(r.se_naive) ? "NA" : (r.significant_naive() ? "1" : "0"),
           std::isnan(r.se_cluster) ? "NA" : (r.significant_cluster() ? "1" : "0")});
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows, const StrataGrid& grid) {
  std::vector<std::string> header{"mapping_id", "neg_loglik", "pct_increase", "converged", "failed"};
  for (int arm : {1, 0})
    for (int s = 0; s < grid.size(); ++s) header.push_back("mu" + std::to_string(arm) + "_" + stratum_label(grid.stratum(s)));
  CsvWriter w(os, header);
  for (const auto& r : rows) {
    std::vector<std::string> f{std::to_string(r.mapping_id), format_double(r.neg_loglik), format_double(r.pct_increase),
                               r.converged ? "1" : "0", r.failed ? "1" : "0"};
    for (int arm : {1, 0})
      for (int s = 0; s < grid.size(); ++s) f.push_back(format_double(r.locations(s, arm)));
    w.row(f);
  }
}

inline void write_histogram_csv(std::ostream& os, const std::vector<CellHistogram>& hists, const StrataGrid& grid) {
  CsvWriter w(os, {"arm", "z", "stratum", "z0", "z1", "bin", "bin_lower", "bin_upper", "count"});
  for (const auto& h : hists) {
    const Stratum& st = grid.stratum(h.designated_stratum);
    for (int b = 0; b < kHistogramBins; ++b)
      w.row({std::to_string(h.cell.arm), std::to_string(h.cell.level), std::to_string(h.designated_stratum),
             std::to_string(st.z0), std::to_string(st.z1), std::to_string(b),
             format_double(static_cast<double>(b) / kHistogramBins),
             format_double(static_cast<double>(b + 1) / kHistogramBins),
             std::to_string(h.counts[static_cast<std::size_t>(b)])});
  }
}

inline void write_marginal_csv(std::ostream& os, const std::vector<MarginalRow>& rows) {
  CsvWriter w(os, {"arm", "quantity", "predicted", "observed", "excluded"});
  for (const auto& r : rows)
    w.row({std::to_string(r.arm), r.quantity, format_double(r.predicted), format_double(r.observed), r.excluded ? "1" : "0"});
}

// ---------------------------------------------------------------------------
// JSON

using nlohmann::json;

inline json to_json(const ModelParams& p) {
  json j;
  j["k_levels"] = p.grid.k_levels();
  j["family"] = std::string(to_string(p.family));
  j["mean_structure"] = std::string(to_string(p.mean_structure));
  j["probs"] = std::vector<double>(p.probs.data(), p.probs.data() + p.probs.size());
  for (int arm = 0; arm < 2; ++arm) {
    const Eigen::VectorXd col = p.locations.col(arm);
    j["locations"].push_back(std::vector<double>(col.data(), col.data() + col.size()));
  }
  j["scales"] = {p.scales(0), p.scales(1)};
  return j;
}

inline ModelParams params_from_json(const json& j) {
  ModelParams p = ModelParams::zeros(StrataGrid(j.at("k_levels").get<int>()),
                                     parse_family(j.at("family").get<std::string>()),
                                     parse_mean_structure(j.at("mean_structure").get<std::string>()));
  const auto probs = j.at("probs").get<std::vector<double>>();
  if (probs.size() != static_cast<std::size_t>(p.probs.size())) throw InputError("fit file: wrong number of probabilities");
  p.probs = Eigen::Map<const Eigen::VectorXd>(probs.data(), static_cast<Eigen::Index>(probs.size()));
  const auto& locs = j.at("locations");
  if (locs.size() != 2) throw InputError("fit file: locations must have two arms");
  for (int arm = 0; arm < 2; ++arm) {
    const auto col = locs.at(static_cast<std::size_t>(arm)).get<std::vector<double>>();
    if (col.size() != static_cast<std::size_t>(p.locations.rows())) throw InputError("fit file: wrong number of locations");
    for (std::size_t r = 0; r < col.size(); ++r) p.locations(static_cast<Eigen::Index>(r), arm) = col[r];
  }
  const auto scales = j.at("scales").get<std::vector<double>>();
  if (scales.size() != 2) throw InputError("fit file: scales must have two entries");
  p.scales << scales[0], scales[1];
  p.validate();
  return p;
}

struct FitFileOptions {
  bool dichotomize = false;
  std::string starts = "all";
};

inline json fit_to_json(const FitResult& f, const FitFileOptions& options) {
  json j;
  j["format"] = "stratfit-fit";
  j["version"] = 1;
  j["dichotomize"] = options.dichotomize;
  j["starts"] = options.starts;
  j["params"] = to_json(f.params);
  j["loglik"] = f.loglik;
  j["mapping_id"] = f.mapping_id;
  j["iterations"] = f.iterations;
  j["converged"] = f.converged;
  j["scale_floor_active"] = f.scale_floor_active;
  j["tied_mappings"] = f.tied_mappings;
  j["mapping_space_size"] = f.mapping_space_size;
  j["trace"] = json::array();
  for (const auto& t : f.trace) {
    json e;
    e["mapping_id"] = t.mapping_id;
    e["loglik"] = t.failed ? json(nullptr) : json(t.loglik);
    e["params"] = to_json(t.params);
    e["iterations"] = t.iterations;
    e["converged"] = t.converged;
    e["failed"] = t.failed;
    e["scale_floor_active"] = t.scale_floor_active;
    e["error"] = t.error;
    j["trace"].push_back(e);
  }
  return j;
}

struct LoadedFit {
  FitResult fit;  // posterior left empty; recompute against the data
  FitFileOptions options;
};

// Throws InputError on any missing or malformed field.
inline LoadedFit fit_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "stratfit-fit") throw InputError("not a stratfit fit file");
    LoadedFit out;
    out.options.dichotomize = j.at("dichotomize").get<bool>();
    out.options.starts = j.at("starts").get<std::string>();
    FitResult& f = out.fit;
    f.params = params_from_json(j.at("params"));
    f.loglik = j.at("loglik").get<double>();
    f.mapping_id = j.at("mapping_id").get<std::size_t>();
    f.iterations = j.at("iterations").get<int>();
    f.converged = j.at("converged").get<bool>();
    f.scale_floor_active = j.at("scale_floor_active").get<bool>();
    f.tied_mappings = j.at("tied_mappings").get<std::vector<std::size_t>>();
    f.mapping_space_size = j.at("mapping_space_size").get<std::size_t>();
    const auto& trace = j.at("trace");
    if (!trace.is_array() || trace.empty()) throw InputError("fit file: empty trace");
    for (const auto& e : trace) {
      TraceEntry t;
      t.mapping_id = e.at("mapping_id").get<std::size_t>();
      t.failed = e.at("failed").get<bool>();
      t.loglik = t.failed ? -std::numeric_limits<double>::infinity() : e.at("loglik").get<double>();
      t.params = params_from_json(e.at("params"));
      t.iterations = e.at("iterations").get<int>();
      t.converged = e.at("converged").get<bool>();
      t.scale_floor_active = e.at("scale_floor_active").get<bool>();
      t.error = e.at("error").get<std::string>();
      if (!(t.params.grid == f.params.grid)) throw InputError("fit file: trace grid does not match the fit");
      f.trace.push_back(std::move(t));
    }
    return out;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed fit file: ") + e.what());
  }
}

inline void save_fit(const std::filesystem::path& path, const FitResult& f, const FitFileOptions& options) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << fit_to_json(f, options).dump(2) << '\n';
}

inline LoadedFit load_fit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open fit file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("malformed fit file: " + std::string(e.what()));
  }
  return fit_from_json(j);
}

// ---------------------------------------------------------------------------
// Simulation configs
//
// Lines are `key = value`; `#` starts a comment. A comma-separated value
// expands the grid: the job list is the cartesian product over every listed
// key. Keys: n_per_arm, dispersion_sd, prob_scenario (unequal|onesmall|
// uniform), family (normal|tobit), shape (normal|t:DF|skew:LEVEL), k_levels,
// effect, sd_control, sd_treated, replicates, seed, starts (all|topk:N|
// spread:N), study (grid|misspecification) and, for misspecification
// studies, shapes (comma list of t:DF|skew:LEVEL, not expanded).

struct SimJob {
  SimConfig config;
  std::optional<StartStrategy> starts;
  bool misspecification = false;
  std::vector<Misspecification> shapes;
};

inline std::optional<Misspecification> parse_shape(std::string_view s) {
  s = trim(s);
  if (s == "normal") return std::nullopt;
  const auto colon = s.find(':');
  const auto v = colon == std::string_view::npos ? std::nullopt : parse_double(s.substr(colon + 1));
  if (v) {
    if (s.substr(0, colon) == "t") {
      if (!(*v > 2.0)) throw InputError("shape t:DF needs DF > 2");
      return HeavyTail{*v};
    }
    if (s.substr(0, colon) == "skew") return Skewed{*v};
  }
  throw InputError("invalid shape '" + std::string(s) + "' (expected normal|t:DF|skew:LEVEL)");
}

inline std::string shape_label(const std::optional<Misspecification>& shape) {
  if (!shape) return "normal";
  if (const auto* h = std::get_if<HeavyTail>(&*shape)) return "t:" + format_double(h->df);
  return "skew:" + format_double(std::get<Skewed>(*shape).skewness);
}

inline ProbScenario parse_prob_scenario(std::string_view s) {
  if (s == "unequal") return ProbScenario::Unequal;
  if (s == "onesmall") return ProbScenario::OneSmall;
  if (s == "uniform") return ProbScenario::Uniform;
  throw InputError("unknown prob_scenario '" + std::string(s) + "' (expected unequal|onesmall|uniform)");
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (const auto& f : split_csv_line(s)) out.emplace_back(trim(f));
  return out;
}

// `seed` (if given) replaces every job's seed.
inline std::vector<SimJob> parse_sim_config(std::istream& in, std::optional<std::uint64_t> seed = std::nullopt) {
  static const std::vector<std::string> known{"n_per_arm", "dispersion_sd", "prob_scenario", "family", "shape",
                                              "k_levels", "effect", "sd_control", "sd_treated", "replicates",
                                              "seed", "starts", "study", "shapes"};
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view v = line;
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    v = trim(v);
    if (v.empty()) continue;
    const auto eq = v.find('=');
    if (eq == std::string_view::npos) throw InputError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key(trim(v.substr(0, eq)));
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InputError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    for (const auto& [k, _] : entries)
      if (k == key) throw InputError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    auto values = split_list(v.substr(eq + 1));
    for (const auto& x : values)
      if (x.empty()) throw InputError("config line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    entries.emplace_back(key, std::move(values));
  }

  SimJob proto;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (auto& [key, values] : entries) {
    if (key == "shapes") {
      for (const auto& s : values) {
        auto shape = parse_shape(s);
        if (!shape) throw InputError("config: shapes entries must be t:DF or skew:LEVEL");
        proto.shapes.push_back(*shape);
      }
    } else if (key == "study") {
      if (values.size() != 1 || (values[0] != "grid" && values[0] != "misspecification"))
        throw InputError("config: study must be grid or misspecification");
      proto.misspecification = values[0] == "misspecification";
    } else {
      axes.emplace_back(key, values);
    }
  }
  if (proto.misspecification && proto.shapes.empty()) throw InputError("config: misspecification study needs shapes");

  const auto apply = [](SimJob& job, const std::string& key, const std::string& value) {
    const auto bad = [&] { throw InputError("config: invalid value '" + value + "' for " + key); };
    const auto integer = [&] {
      const auto v = parse_int(value);
      if (!v) bad();
      return *v;
    };
    const auto real = [&] {
      const auto v = parse_double(value);
      if (!v || !std::isfinite(*v)) bad();
      return *v;
    };
    SimConfig& c = job.config;
    if (key == "n_per_arm") c.n_per_arm = static_cast<int>(integer());
    else if (key == "dispersion_sd") c.dispersion_sd = real();
    else if (key == "prob_scenario") c.prob_scenario = parse_prob_scenario(value);
    else if (key == "family") c.family = parse_family(value);
    else if (key == "shape") c.shape = parse_shape(value);
    else if (key == "k_levels") c.k_levels = static_cast<int>(integer());
    else if (key == "effect") c.effect = real();
    else if (key == "sd_control") c.sds(0) = real();
    else if (key == "sd_treated") c.sds(1) = real();
    else if (key == "replicates") c.replicates = static_cast<int>(integer());
    else if (key == "seed") {
      const auto v = integer();
      if (v < 0) bad();
      c.seed = static_cast<std::uint64_t>(v);
    } else if (key == "starts") job.starts = parse_starts(value);
  };

  std::vector<SimJob> jobs{proto};
  for (const auto& [key, values] : axes) {
    std::vector<SimJob> next;
    for (const auto& job : jobs)
      for (const auto& value : values) {
        SimJob j = job;
        apply(j, key, value);
        next.push_back(std::move(j));
      }
    jobs = std::move(next);
  }
  for (auto& job : jobs) {
    if (seed) job.config.seed = *seed;
    job.config.validate();
    if (job.misspecification && (job.config.family != ComponentFamily::Normal || job.config.shape))
      throw InputError("config: misspecification study requires family = normal and shape = normal");
  }
  return jobs;
}

// ---------------------------------------------------------------------------
// Simulation reports

inline std::vector<std::string> config_fields(const SimConfig& c) {
  return {std::to_string(c.n_per_arm), format_double(c.dispersion_sd), std::string(stratfit::to_string(c.prob_scenario)),
          std::string(stratfit::to_string(c.family)), shape_label(c.shape), std::to_string(c.k_levels),
          std::to_string(c.replicates), std::to_string(c.seed)};
}

inline const std::vector<std::string>& config_header() {
  static const std::vector<std::string> h{"n_per_arm", "dispersion_sd", "prob_scenario", "family",
                                          "shape",     "k_levels",      "replicates",    "seed"};
  return h;
}

struct LabelledReport {
  int config_id = 0;
  const RecoveryReport* report = nullptr;
};

inline void write_replicates_csv(std::ostream& os, const std::vector<LabelledReport>& reports) {
  std::vector<std::string> header{"config_id"};
  header.insert(header.end(), config_header().begin(), config_header().end());
  for (const char* h : {"replicate", "failed", "loglik", "mapping_id", "iterations", "converged", "label_correct",
                        "label_swapped", "near_optimal_alternatives", "mean_abs_prob_error", "max_abs_location_error",
                        "error"})
    header.emplace_back(h);
  CsvWriter w(os, header);
  for (const auto& [id, rep] : reports)
    for (const auto& r : rep->replicates) {
      std::vector<std::string> f{std::to_string(id)};
      const auto cf = config_fields(rep->config);
      f.insert(f.end(), cf.begin(), cf.end());
      const bool ok = !r.failed;
      f.insert(f.end(), {std::to_string(r.replicate), r.failed ? "1" : "0", ok ? format_double(r.loglik) : "NA",
                         ok ? std::to_string(r.mapping_id) : "NA", std::to_string(r.iterations),
                         r.converged ? "1" : "0", r.labels.correct ? "1" : "0", r.labels.swapped ? "1" : "0",
                         std::to_string(r.near_optimal_alternatives),
                         ok ? format_double(r.prob_error.cwiseAbs().mean()) : "NA",
                         ok ? format_double(r.location_error.cwiseAbs().maxCoeff()) : "NA", r.error});
      w.row(f);
    }
}

// Per-parameter aggregates: truth, mean estimate, RMSE and median absolute
// error (locations in SD units).
inline void write_aggregate_csv(std::ostream& os, const std::vector<LabelledReport>& reports) {
  CsvWriter w(os, {"config_id", "parameter", "stratum", "z0", "z1", "arm", "truth", "mean_estimate", "rmse",
                   "median_abs_error"});
  for (const auto& [id, rep] : reports) {
    const StrataGrid& g = rep->truth.grid;
    std::vector<std::vector<double>> prob_est(static_cast<std::size_t>(g.size()));
    for (const auto& r : rep->replicates)
      if (!r.failed)
        for (int s = 0; s < g.size(); ++s) prob_est[static_cast<std::size_t>(s)].push_back(r.fitted.probs(s));
    for (int s = 0; s < g.size(); ++s) {
      const Stratum& st = g.stratum(s);
      auto& est = prob_est[static_cast<std::size_t>(s)];
      const double truth = rep->truth.probs(s);
      double mean = 0.0, sq = 0.0;
      for (double e : est) mean += e, sq += (e - truth) * (e - truth);
      std::vector<double> abs_err;
      for (double e : est) abs_err.push_back(std::abs(e - truth));
      std::sort(abs_err.begin(), abs_err.end());
      const std::size_t m = abs_err.size();
      const double median = m == 0 ? std::nan("") : (m % 2 ? abs_err[m / 2] : 0.5 * (abs_err[m / 2 - 1] + abs_err[m / 2]));
      w.row({std::to_string(id), "prob", std::to_string(s), std::to_string(st.z0), std::to_string(st.z1), "",
             format_double(truth), format_double(m ? mean / m : std::nan("")),
             format_double(m ? std::sqrt(sq / m) : std::nan("")), format_double(median)});
    }
    for (int arm = 0; arm < 2; ++arm)
      for (int s = 0; s < g.size(); ++s) {
        const Stratum& st = g.stratum(s);
        w.row({std::to_string(id), "location", std::to_string(s), std::to_string(st.z0), std::to_string(st.z1),
               std::to_string(arm), format_double(rep->truth.location(s, arm)),
               format_double(rep->location_mean(s, arm)), format_double(rep->location_rmse(s, arm)),
               format_double(rep->location_median_abs_error(s, arm))});
      }
  }
}

inline void write_grid_summary_csv(std::ostream& os, const std::vector<LabelledReport>& reports,
                                   const std::vector<std::string>& roles) {
  std::vector<std::string> header{"config_id", "role"};
  header.insert(header.end(), config_header().begin(), config_header().end());
  for (const char* h : {"failures", "fraction_label_correct", "fraction_label_swapped",
                        "fraction_near_optimal_alternatives", "mean_abs_prob_error", "max_location_rmse",
                        "max_location_median_abs_error", "under_identified"})
    header.emplace_back(h);
  CsvWriter w(os, header);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& rep = *reports[i].report;
    std::vector<std::string> f{std::to_string(reports[i].config_id), roles[i]};
    const auto cf = config_fields(rep.config);
    f.insert(f.end(), cf.begin(), cf.end());
    f.insert(f.end(), {std::to_string(rep.failures), format_double(rep.fraction_label_correct),
                       format_double(rep.fraction_label_swapped), format_double(rep.fraction_near_optimal_alternatives),
                       format_double(rep.mean_abs_prob_error), format_double(rep.location_rmse.maxCoeff()),
                       format_double(rep.location_median_abs_error.maxCoeff()), rep.under_identified ? "1" : "0"});
    w.row(f);
  }
}

}  // namespace stratfit::io
