#include "fbsde/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "fbsde/counterexample.hpp"
#include "fbsde/rng.hpp"
#include "json.hpp"

namespace fbsde {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt17(*v) : std::string();
}

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void line_error(int line, const std::string& what) {
  throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

double parse_double(int line, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    line_error(line, "expected a number, got '" + v + "'");
  }
}

long long parse_int(int line, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    line_error(line, "expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(int line, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    line_error(line, "expected an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(int line, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  line_error(line, "expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

std::vector<double> parse_double_list(int line, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(line, item));
  return out;
}

std::vector<int> parse_int_list(int line, const std::string& v) {
  std::vector<int> out;
  for (const auto& item : split_list(v))
    out.push_back(static_cast<int>(parse_int(line, item)));
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs,
                 std::string (*fmt)(const T&)) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += fmt(xs[i]);
  }
  return out;
}

std::string fmt_double_item(const double& v) { return fmt17(v); }
std::string fmt_int_item(const int& v) { return std::to_string(v); }

std::string estimator_name(ZEstimator z) {
  switch (z) {
    case ZEstimator::standard: return "standard";
    case ZEstimator::variance_reduced: return "variance_reduced";
    case ZEstimator::second_order_candidate: return "second_order";
  }
  return "variance_reduced";
}

std::string scheme_label(double theta) {
  if (theta == 0.0) return "explicit";
  if (theta == 0.5) return "trapezoidal";
  if (theta == 1.0) return "implicit";
  return "theta";
}

}  // namespace

ForwardModel ForwardConfig::build() const {
  if (x0.empty()) throw ConfigError("forward model needs a start point x0");
  if (kind == "brownian") {
    Eigen::VectorXd start(x0.size());
    for (std::size_t j = 0; j < x0.size(); ++j) start[j] = x0[j];
    return ForwardModel::brownian(start);
  }
  if (kind == "geometric_brownian" || kind == "geometric_brownian_euler") {
    if (x0.size() != 1)
      throw ConfigError("geometric models are scalar; give a single x0");
    return kind == "geometric_brownian"
               ? ForwardModel::geometric_brownian(x0[0], mu, sigma)
               : ForwardModel::geometric_brownian_euler(x0[0], mu, sigma);
  }
  throw ConfigError("unknown forward model kind '" + kind + "'");
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string section;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string s = trim(raw);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') line_error(line, "unterminated section header");
      section = s.substr(1, s.size() - 2);
      if (section != "experiment" && section != "forward" &&
          section != "basis" && section != "paper_scale" &&
          section != "output")
        line_error(line, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      line_error(line, "expected key = value, got '" + s + "'");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (section.empty())
      line_error(line, "key '" + key + "' appears before any section");

    if (section == "experiment") {
      if (key == "name") cfg.name = value;
      else if (key == "model") cfg.model = value;
      else if (key == "theta_list") cfg.theta_list = parse_double_list(line, value);
      else if (key == "alpha_list") cfg.alpha_list = parse_double_list(line, value);
      else if (key == "N_list") cfg.grid_list = parse_int_list(line, value);
      else if (key == "horizon") cfg.horizon = parse_double(line, value);
      else if (key == "paths") cfg.paths = static_cast<int>(parse_int(line, value));
      else if (key == "seed") cfg.seed = parse_u64(line, value);
      else if (key == "replications")
        cfg.replications = static_cast<int>(parse_int(line, value));
      else if (key == "z_estimator") {
        if (value == "standard") cfg.z_estimator = ZEstimator::standard;
        else if (value == "variance_reduced")
          cfg.z_estimator = ZEstimator::variance_reduced;
        else if (value == "second_order")
          cfg.z_estimator = ZEstimator::second_order_candidate;
        else line_error(line, "unknown z_estimator '" + value + "'");
      } else if (key == "terminal_z") {
        if (value == "zero") cfg.terminal_z = TerminalZ::zero;
        else if (value == "gradient_formula")
          cfg.terminal_z = TerminalZ::gradient_formula;
        else line_error(line, "unknown terminal_z '" + value + "'");
      } else if (key == "oracle") {
        if (value == "none") cfg.oracle = OracleKind::none;
        else if (value == "fhn_closed_form")
          cfg.oracle = OracleKind::fhn_closed_form;
        else line_error(line, "unknown oracle '" + value + "'");
      } else if (key == "compute_e") cfg.compute_e = parse_bool(line, value);
      else if (key == "e_metric") {
        if (value == "max") cfg.e_metric = EMetric::max_over_steps;
        else if (value == "terminal") cfg.e_metric = EMetric::terminal;
        else line_error(line, "unknown e_metric '" + value + "'");
      } else if (key == "eval_ensemble") {
        if (value == "shared") cfg.eval_ensemble = EvalEnsemble::shared;
        else if (value == "independent")
          cfg.eval_ensemble = EvalEnsemble::independent;
        else line_error(line, "unknown eval_ensemble '" + value + "'");
      } else if (key == "c2_override")
        cfg.c2_override = parse_double(line, value);
      else line_error(line, "unknown key '" + key + "' in [experiment]");
    } else if (section == "forward") {
      if (key == "kind") cfg.forward.kind = value;
      else if (key == "x0") cfg.forward.x0 = parse_double_list(line, value);
      else if (key == "mu") cfg.forward.mu = parse_double(line, value);
      else if (key == "sigma") cfg.forward.sigma = parse_double(line, value);
      else line_error(line, "unknown key '" + key + "' in [forward]");
    } else if (section == "basis") {
      if (key == "kind") {
        if (value == "hermite") cfg.basis.kind = BasisKind::hermite;
        else if (value == "monomial") cfg.basis.kind = BasisKind::monomial;
        else line_error(line, "unknown basis kind '" + value + "'");
      } else if (key == "degree")
        cfg.basis.degree = static_cast<int>(parse_int(line, value));
      else if (key == "standardization") {
        if (value == "per_step_affine")
          cfg.basis.standardization = Standardization::per_step_affine;
        else if (value == "none")
          cfg.basis.standardization = Standardization::none;
        else line_error(line, "unknown standardization '" + value + "'");
      } else if (key == "ridge") cfg.ridge = parse_double(line, value);
      else line_error(line, "unknown key '" + key + "' in [basis]");
    } else if (section == "paper_scale") {
      if (key == "paths")
        cfg.paper_scale.paths = static_cast<int>(parse_int(line, value));
      else if (key == "degree")
        cfg.paper_scale.degree = static_cast<int>(parse_int(line, value));
      else line_error(line, "unknown key '" + key + "' in [paper_scale]");
    } else {  // output
      if (key == "dir") cfg.out_dir = value;
      else line_error(line, "unknown key '" + key + "' in [output]");
    }
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "[experiment]\n";
  out << "name = " << c.name << "\n";
  out << "model = " << c.model << "\n";
  out << "theta_list = " << join(c.theta_list, fmt_double_item) << "\n";
  out << "alpha_list = " << join(c.alpha_list, fmt_double_item) << "\n";
  out << "N_list = " << join(c.grid_list, fmt_int_item) << "\n";
  out << "horizon = " << fmt17(c.horizon) << "\n";
  out << "paths = " << c.paths << "\n";
  out << "seed = " << c.seed << "\n";
  out << "replications = " << c.replications << "\n";
  out << "z_estimator = " << estimator_name(c.z_estimator) << "\n";
  out << "terminal_z = "
      << (c.terminal_z == TerminalZ::zero ? "zero" : "gradient_formula")
      << "\n";
  out << "oracle = "
      << (c.oracle == OracleKind::none ? "none" : "fhn_closed_form") << "\n";
  out << "compute_e = " << (c.compute_e ? "true" : "false") << "\n";
  out << "e_metric = "
      << (c.e_metric == EMetric::max_over_steps ? "max" : "terminal") << "\n";
  out << "eval_ensemble = "
      << (c.eval_ensemble == EvalEnsemble::shared ? "shared" : "independent")
      << "\n";
  if (c.c2_override) out << "c2_override = " << fmt17(*c.c2_override) << "\n";
  out << "\n[forward]\n";
  out << "kind = " << c.forward.kind << "\n";
  out << "x0 = " << join(c.forward.x0, fmt_double_item) << "\n";
  out << "mu = " << fmt17(c.forward.mu) << "\n";
  out << "sigma = " << fmt17(c.forward.sigma) << "\n";
  out << "\n[basis]\n";
  out << "kind = "
      << (c.basis.kind == BasisKind::hermite ? "hermite" : "monomial") << "\n";
  out << "degree = " << c.basis.degree << "\n";
  out << "standardization = "
      << (c.basis.standardization == Standardization::per_step_affine
              ? "per_step_affine"
              : "none")
      << "\n";
  out << "ridge = " << fmt17(c.ridge) << "\n";
  out << "\n[paper_scale]\n";
  if (c.paper_scale.paths) out << "paths = " << *c.paper_scale.paths << "\n";
  if (c.paper_scale.degree) out << "degree = " << *c.paper_scale.degree << "\n";
  out << "\n[output]\n";
  out << "dir = " << c.out_dir << "\n";
  return out.str();
}

void validate_config(const ExperimentConfig& c) {
  if (c.name.empty() || c.name.find(',') != std::string::npos)
    throw ConfigError("experiment name must be non-empty and comma-free");
  if (c.grid_list.empty()) throw ConfigError("N_list must not be empty");
  for (int N : c.grid_list)
    if (N < 1) throw ConfigError("N_list entries must be positive");
  if (c.theta_list.empty() && c.alpha_list.empty())
    throw ConfigError("give at least one of theta_list or alpha_list");
  for (double th : c.theta_list)
    if (th < 0.0 || th > 1.0)
      throw ConfigError("theta values must lie in [0, 1]");
  for (double a : c.alpha_list)
    if (!(a > 0.0)) throw ConfigError("alpha values must be positive");
  if (!(c.horizon > 0.0)) throw ConfigError("horizon must be positive");
  if (c.paths < 2) throw ConfigError("paths must be at least 2");
  if (c.replications < 1) throw ConfigError("replications must be >= 1");
  if (c.ridge < 0.0) throw ConfigError("ridge must be nonnegative");

  const BackwardModel model = builtin_model(c.model);
  const ForwardModel fwd = c.forward.build();
  const int d = static_cast<int>(fwd.x0.size());

  if (c.oracle == OracleKind::fhn_closed_form && c.model != "fhn_a_minus_1")
    throw ConfigError(
        "the fhn_closed_form oracle matches only the fhn_a_minus_1 model");
  if (c.e_metric == EMetric::terminal && !c.compute_e)
    throw ConfigError("e_metric = terminal needs compute_e = true");
  if (c.terminal_z == TerminalZ::gradient_formula && !model.terminal_z)
    throw ConfigError("model '" + c.model +
                      "' has no terminal gradient for terminal_z = "
                      "gradient_formula");

  for (double th : c.theta_list) {
    if (th == 0.0) continue;
    const double bound = theta_step_bound(th, model.constants, d);
    for (int N : c.grid_list) {
      const double h = c.horizon / N;
      if (h > bound)
        throw ConfigError(
            "theta = " + fmt17(th) + ", N = " + std::to_string(N) +
            ": step h = " + fmt17(h) +
            " violates the admissible bound min{1, [4 theta (L_y + 3 d "
            "theta L_z^2)]^-1} = " +
            fmt17(bound));
    }
  }
  for (double a : c.alpha_list) {
    for (int N : c.grid_list) {
      // Throws StepRestrictionError with h* when the grid is too coarse;
      // e(N) refinements only halve h, so they stay admissible.
      compute_taming_thresholds(model.constants, d, c.horizon, c.horizon / N,
                                a, c.c2_override);
    }
  }
}

namespace {

struct SweepPoint {
  std::string label;
  std::optional<double> theta;
  std::optional<double> alpha;
};

// Root-mean-square distance between the (possibly truncated) terminal
// values on a coarse ensemble and its coupled refinement. The truncation
// levels are the per-step ones, so the two ensembles truncate differently.
double terminal_distance(const PathEnsemble& coarse, const PathEnsemble& fine,
                         const BackwardModel& model,
                         const ExperimentConfig& cfg,
                         const std::optional<double>& alpha) {
  const auto values = [&](const PathEnsemble& e) {
    std::optional<TamingThresholds> t;
    if (alpha)
      t = compute_taming_thresholds(model.constants, e.dim(), cfg.horizon,
                                    e.grid().step(), *alpha, cfg.c2_override);
    const Eigen::MatrixXd xN = e.states_at(e.grid().intervals);
    Eigen::VectorXd out(xN.rows());
    for (Eigen::Index m = 0; m < xN.rows(); ++m) {
      const double g = model.terminal(xN.row(m).transpose())[0];
      out[m] = t ? truncate(t->L_h, g) : g;
    }
    return out;
  };
  const Eigen::VectorXd a = values(coarse);
  const Eigen::VectorXd b = values(fine);
  return std::sqrt((a - b).squaredNorm() / a.size());
}

CellResult run_cell(const ExperimentConfig& cfg, const ForwardModel& fwd,
                    const BackwardModel& model, const SweepPoint& sweep,
                    int N, int rep, const YOracle& y_oracle,
                    const ZOracle& z_oracle) {
  CellResult cell;
  cell.experiment = cfg.name;
  cell.scheme = sweep.label;
  cell.theta = sweep.theta;
  cell.alpha = sweep.alpha;
  cell.N = N;
  const GridSpec grid{cfg.horizon, N};
  cell.h = grid.step();
  cell.replication = rep;
  cell.seed = cfg.seed + static_cast<std::uint64_t>(rep);

  const bool tamed = sweep.alpha.has_value();
  SchemeConfig sc;
  sc.theta = tamed ? 0.0 : *sweep.theta;
  sc.z_estimator = cfg.z_estimator;
  sc.terminal_z = cfg.terminal_z;
  sc.record_fits = cfg.eval_ensemble == EvalEnsemble::independent &&
                   cfg.oracle != OracleKind::none;

  const auto ens = simulate_forward(fwd, grid, cfg.paths, cell.seed);
  if (tamed)
    sc.taming =
        compute_taming_thresholds(model.constants, ens.dim(), cfg.horizon,
                                  grid.step(), *sweep.alpha, cfg.c2_override);

  const bool terminal_only =
      cfg.compute_e && cfg.e_metric == EMetric::terminal;
  if (terminal_only && cfg.oracle == OracleKind::none) {
    // Terminal values are fixed by the forward paths and the truncation
    // level alone, so nothing here needs the backward pass.
    cell.eN =
        terminal_distance(ens, coupled_refinement(ens), model, cfg, sweep.alpha);
    return cell;
  }

  const auto sol =
      tamed ? run_tamed_explicit(ens, model, sc, cfg.basis, cfg.ridge)
            : run_theta_scheme(ens, model, sc, cfg.basis, cfg.ridge);
  cell.diverged = sol.diverged;
  cell.newton_max_iter = sol.newton_max_iterations();
  cell.cond_max = sol.max_condition();

  if (cfg.oracle == OracleKind::fhn_closed_form && !sol.diverged) {
    TruthError err;
    if (cfg.eval_ensemble == EvalEnsemble::independent) {
      const auto eval_ens = simulate_forward(
          fwd, grid, cfg.paths, substream_seed(cell.seed, 17, 0));
      const auto eval_sol = replay_backward(sol, eval_ens, model, sc.newton);
      if (eval_sol.diverged) {
        cell.diverged = true;
      } else {
        err = error_vs_truth(eval_sol, eval_ens, y_oracle, z_oracle);
      }
    } else {
      err = error_vs_truth(sol, ens, y_oracle, z_oracle);
    }
    if (!cell.diverged) {
      cell.maxY_rms = err.max_y_rms;
      cell.z_err = err.z_sum;
    }
  }

  if (cfg.compute_e && !sol.diverged) {
    const auto fine_ens = coupled_refinement(ens);
    SchemeConfig fine_sc = sc;
    fine_sc.record_fits = false;
    if (tamed)
      fine_sc.taming = compute_taming_thresholds(
          model.constants, fine_ens.dim(), cfg.horizon, fine_ens.grid().step(),
          *sweep.alpha, cfg.c2_override);
    const auto fine =
        tamed ? run_tamed_explicit(fine_ens, model, fine_sc, cfg.basis,
                                   cfg.ridge)
              : run_theta_scheme(fine_ens, model, fine_sc, cfg.basis,
                                 cfg.ridge);
    if (fine.diverged) {
      cell.diverged = true;
    } else {
      if (terminal_only) {
        const Eigen::MatrixXd diff = sol.Y.back() - fine.Y.back();
        cell.eN = std::sqrt(diff.squaredNorm() / diff.rows());
      } else {
        cell.eN = self_convergence_e(sol, fine);
      }
      cell.newton_max_iter =
          std::max(cell.newton_max_iter, fine.newton_max_iterations());
      cell.cond_max = std::max(cell.cond_max, fine.max_condition());
    }
  }
  return cell;
}

void append_series(const ExperimentConfig& cfg,
                   const std::vector<CellResult>& cells,
                   const SweepPoint& sweep, const std::string& metric,
                   std::vector<SeriesSummary>& out) {
  SeriesSummary s;
  s.scheme = sweep.label;
  s.theta = sweep.theta;
  s.alpha = sweep.alpha;
  s.metric = metric;
  std::vector<std::pair<double, double>> points;
  for (int N : cfg.grid_list) {
    double sum = 0.0, sumsq = 0.0;
    int n = 0, diverged = 0;
    for (const auto& cell : cells) {
      if (cell.theta != sweep.theta || cell.alpha != sweep.alpha ||
          cell.N != N)
        continue;
      if (cell.diverged) {
        ++diverged;
        continue;
      }
      const auto& value = metric == "eN"      ? cell.eN
                          : metric == "z_err" ? cell.z_err
                                              : cell.maxY_rms;
      if (!value) continue;
      sum += *value;
      sumsq += *value * *value;
      ++n;
    }
    s.grids.push_back(N);
    s.diverged_cells.push_back(diverged);
    if (n > 0) {
      const double mean = sum / n;
      s.mean_err.push_back(mean);
      s.std_err.push_back(
          n > 1 ? std::sqrt(std::max(0.0, (sumsq - n * mean * mean) /
                                              (n - 1)))
                : 0.0);
      points.emplace_back(N, mean);
    } else {
      s.mean_err.push_back(std::numeric_limits<double>::quiet_NaN());
      s.std_err.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  try {
    s.rate = fit_rate(points);
  } catch (const InsufficientDataError&) {
    s.rate.reset();
  }
  out.push_back(std::move(s));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config,
                                bool paper_scale) {
  ExperimentConfig cfg = config;
  if (paper_scale) {
    if (cfg.paper_scale.paths) cfg.paths = *cfg.paper_scale.paths;
    if (cfg.paper_scale.degree) cfg.basis.degree = *cfg.paper_scale.degree;
  }
  validate_config(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  const BackwardModel model = builtin_model(cfg.model);
  const ForwardModel fwd = cfg.forward.build();

  YOracle y_oracle;
  ZOracle z_oracle;
  if (cfg.oracle == OracleKind::fhn_closed_form) {
    const double T = cfg.horizon;
    y_oracle = [T](double t, const Eigen::VectorXd& x) {
      return fhn_exact_solution(t, x[0], T, -1.0);
    };
    z_oracle = [T, fwd](double t, const Eigen::VectorXd& x) {
      return (fhn_exact_gradient(t, x[0], T, -1.0) * fwd.sigma_at(t, x).row(0))
          .eval();
    };
  }

  std::vector<SweepPoint> sweeps;
  for (double th : cfg.theta_list)
    sweeps.push_back({scheme_label(th), th, std::nullopt});
  for (double a : cfg.alpha_list) sweeps.push_back({"tamed", 0.0, a});

  ExperimentResult result;
  result.config = cfg;
  for (const auto& sweep : sweeps)
    for (int N : cfg.grid_list)
      for (int rep = 0; rep < cfg.replications; ++rep) {
        result.cells.push_back(
            run_cell(cfg, fwd, model, sweep, N, rep, y_oracle, z_oracle));
        result.any_diverged |= result.cells.back().diverged;
      }

  std::sort(result.cells.begin(), result.cells.end(),
            [](const CellResult& a, const CellResult& b) {
              const auto key = [](const CellResult& c) {
                return std::make_tuple(c.theta.value_or(kInf),
                                       c.alpha.value_or(-kInf), c.N,
                                       c.replication);
              };
              return key(a) < key(b);
            });

  for (const auto& sweep : sweeps) {
    if (cfg.oracle != OracleKind::none) {
      append_series(cfg, result.cells, sweep, "maxY_rms", result.series);
      append_series(cfg, result.cells, sweep, "z_err", result.series);
    }
    if (cfg.compute_e)
      append_series(cfg, result.cells, sweep, "eN", result.series);
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return result;
}

void write_results_csv(const std::vector<CellResult>& cells,
                       std::ostream& out) {
  out << "experiment,scheme,theta,alpha,N,h,replication,seed,maxY_rms,eN,"
         "z_err,diverged,newton_max_iter,cond_max\n";
  for (const auto& c : cells) {
    out << c.experiment << ',' << c.scheme << ',' << fmt_opt(c.theta) << ','
        << fmt_opt(c.alpha) << ',' << c.N << ',' << fmt17(c.h) << ','
        << c.replication << ',' << c.seed << ',' << fmt_opt(c.maxY_rms) << ','
        << fmt_opt(c.eN) << ',' << fmt_opt(c.z_err) << ','
        << (c.diverged ? 1 : 0) << ',' << c.newton_max_iter << ','
        << fmt17(c.cond_max) << '\n';
  }
}

namespace {

[[noreturn]] void row_error(int row, const std::string& what) {
  throw DataError("results row " + std::to_string(row) + ": " + what);
}

std::optional<double> parse_opt_cell(int row, const std::string& v) {
  if (v.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    row_error(row, "expected a number, got '" + v + "'");
  }
}

double parse_cell(int row, const std::string& v) {
  const auto x = parse_opt_cell(row, v);
  if (!x) row_error(row, "field must not be empty");
  return *x;
}

long long parse_int_cell(int row, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    row_error(row, "expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64_cell(int row, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    row_error(row, "expected an unsigned integer, got '" + v + "'");
  }
}

}  // namespace

std::vector<CellResult> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("results CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::string header =
      "experiment,scheme,theta,alpha,N,h,replication,seed,maxY_rms,eN,z_err,"
      "diverged,newton_max_iter,cond_max";
  if (line != header)
    throw DataError("results row 1: unexpected header '" + line + "'");

  std::vector<CellResult> cells;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string item;
    std::istringstream split(line);
    while (std::getline(split, item, ',')) f.push_back(item);
    if (line.back() == ',') f.push_back("");
    if (f.size() != 14)
      row_error(row, "expected 14 fields, got " + std::to_string(f.size()));
    CellResult c;
    c.experiment = f[0];
    c.scheme = f[1];
    c.theta = parse_opt_cell(row, f[2]);
    c.alpha = parse_opt_cell(row, f[3]);
    c.N = static_cast<int>(parse_int_cell(row, f[4]));
    c.h = parse_cell(row, f[5]);
    c.replication = static_cast<int>(parse_int_cell(row, f[6]));
    c.seed = parse_u64_cell(row, f[7]);
    c.maxY_rms = parse_opt_cell(row, f[8]);
    c.eN = parse_opt_cell(row, f[9]);
    c.z_err = parse_opt_cell(row, f[10]);
    if (f[11] == "0") c.diverged = false;
    else if (f[11] == "1") c.diverged = true;
    else row_error(row, "diverged must be 0 or 1, got '" + f[11] + "'");
    c.newton_max_iter = static_cast<int>(parse_int_cell(row, f[12]));
    c.cond_max = parse_cell(row, f[13]);
    cells.push_back(std::move(c));
  }
  return cells;
}

namespace {

nlohmann::ordered_json series_json(const SeriesSummary& s) {
  nlohmann::ordered_json j;
  j["scheme"] = s.scheme;
  if (s.theta) j["theta"] = *s.theta; else j["theta"] = nullptr;
  if (s.alpha) j["alpha"] = *s.alpha; else j["alpha"] = nullptr;
  j["metric"] = s.metric;
  auto points = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < s.grids.size(); ++i) {
    nlohmann::ordered_json p;
    p["N"] = s.grids[i];
    if (std::isfinite(s.mean_err[i])) {
      p["mean"] = s.mean_err[i];
      p["std"] = s.std_err[i];
    } else {
      p["mean"] = nullptr;
      p["std"] = nullptr;
    }
    p["diverged"] = s.diverged_cells[i];
    points.push_back(std::move(p));
  }
  j["points"] = std::move(points);
  if (s.rate) {
    j["rate"] = {{"slope", s.rate->slope},
                 {"intercept", s.rate->intercept},
                 {"half_width", s.rate->half_width},
                 {"used_points", s.rate->used_points},
                 {"excluded_points", s.rate->excluded_points}};
  } else {
    j["rate"] = nullptr;
  }
  return j;
}

}  // namespace

std::string summary_json(const ExperimentResult& result) {
  nlohmann::ordered_json j;
  j["experiment"] = result.config.name;
  j["any_diverged"] = result.any_diverged;
  j["cells"] = result.cells.size();
  auto series = nlohmann::ordered_json::array();
  for (const auto& s : result.series) series.push_back(series_json(s));
  j["series"] = std::move(series);
  j["config"] = serialize_config(result.config);
  return j.dump(2) + "\n";
}

std::string meta_json(const ExperimentResult& result, int workers,
                      bool paper_scale) {
  nlohmann::ordered_json j;
  j["experiment"] = result.config.name;
  j["wall_seconds"] = result.wall_seconds;
  j["workers"] = workers;
  j["paper_scale"] = paper_scale;
  return j.dump(2) + "\n";
}

void write_experiment_outputs(const ExperimentResult& result, int workers,
                              bool paper_scale) {
  namespace fs = std::filesystem;
  const fs::path dir(result.config.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "results.csv", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "results.csv").string());
    write_results_csv(result.cells, out);
  }
  {
    std::ofstream out(dir / "summary.json", std::ios::binary);
    out << summary_json(result);
  }
  {
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << meta_json(result, workers, paper_scale);
  }
}

std::string rates_table(const std::vector<CellResult>& cells,
                        const std::vector<int>& exclude_N) {
  if (cells.empty()) throw InsufficientDataError("no result rows to fit");

  using Key = std::tuple<std::string, double, double, std::string>;
  struct Group {
    std::string experiment, label;
    bool has_e = false;
    // per N: (sum, count) of the chosen metric over finite replications
    std::map<int, std::pair<double, int>> acc;
  };
  std::map<Key, Group> groups;
  const auto key_of = [](const CellResult& c) {
    std::string label = c.scheme;
    if (c.alpha) label += " alpha=" + fmt17(*c.alpha);
    else if (c.theta && c.scheme == "theta") label += "=" + fmt17(*c.theta);
    return Key{c.experiment, c.theta.value_or(kInf), c.alpha.value_or(-kInf),
               label};
  };
  // A group reports e(N) whenever any of its rows carries one; otherwise it
  // falls back to the truth error.
  for (const auto& c : cells) {
    auto& g = groups[key_of(c)];
    g.experiment = c.experiment;
    g.label = std::get<3>(key_of(c));
    g.has_e |= c.eN.has_value();
  }
  for (const auto& c : cells) {
    auto& g = groups[key_of(c)];
    auto& slot = g.acc.try_emplace(c.N, std::make_pair(0.0, 0)).first->second;
    if (c.diverged) continue;
    const std::optional<double>& value = g.has_e ? c.eN : c.maxY_rms;
    if (value) {
      slot.first += *value;
      slot.second += 1;
    }
  }

  std::ostringstream out;
  out << "experiment        series                    metric      slope   "
         "halfwidth  points\n";
  for (const auto& [key, g] : groups) {
    std::vector<std::pair<double, double>> points;
    bool any_value = false;
    for (const auto& [N, slot] : g.acc) {
      if (slot.second == 0) continue;
      any_value = true;
      if (std::find(exclude_N.begin(), exclude_N.end(), N) != exclude_N.end())
        continue;
      points.emplace_back(N, slot.first / slot.second);
    }
    if (!any_value) continue;  // rows without metrics contribute nothing
    const char* metric = g.has_e ? "eN" : "maxY_rms";
    char buf[160];
    try {
      const RateFit fit = fit_rate(points);
      std::snprintf(buf, sizeof buf, "%-17s %-25s %-9s %9.4f %10.4f %7d\n",
                    g.experiment.c_str(), g.label.c_str(), metric, fit.slope,
                    fit.half_width, fit.used_points);
    } catch (const InsufficientDataError&) {
      std::snprintf(buf, sizeof buf, "%-17s %-25s %-9s %9s %10s %7d\n",
                    g.experiment.c_str(), g.label.c_str(), metric, "--", "--",
                    static_cast<int>(points.size()));
    }
    out << buf;
  }
  return out.str();
}

CounterexampleReport counterexample_report(const std::vector<int>& grids,
                                           int paths, std::uint64_t seed) {
  CounterexampleReport rep;
  rep.grids = grids;
  rep.paths = paths;
  rep.seed = seed;
  const auto stat = counterexample_divergence_stat(grids, paths, seed);
  rep.log_mean_abs = stat.log_mean_abs;
  rep.strictly_increasing = stat.strictly_increasing;
  rep.det_bound_holds = true;
  for (int N : grids) {
    const auto seq = counterexample_iterate(N, 2.0 * std::sqrt(double(N)));
    double worst = kInf;
    for (int i = 0; i <= N; ++i) {
      const double required =
          std::ldexp(1.0, N - i) + 0.5 * std::log2(double(N));
      worst = std::min(worst, seq[i].log2_abs() - required);
    }
    rep.det_margin.push_back(worst);
    if (worst < -1e-9) rep.det_bound_holds = false;
  }
  return rep;
}

std::string counterexample_json(const CounterexampleReport& rep) {
  nlohmann::ordered_json j;
  j["grids"] = rep.grids;
  j["paths"] = rep.paths;
  j["seed"] = rep.seed;
  j["log_mean_abs_half_time"] = rep.log_mean_abs;
  j["strictly_increasing"] = rep.strictly_increasing;
  j["deterministic_margin_log2"] = rep.det_margin;
  j["deterministic_bound_holds"] = rep.det_bound_holds;
  return j.dump(2) + "\n";
}

void write_counterexample_outputs(const CounterexampleReport& rep,
                                  const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "counterexample.csv", std::ios::binary);
    out << "N,log_mean_abs_half_time,det_bound_margin_log2\n";
    for (std::size_t i = 0; i < rep.grids.size(); ++i)
      out << rep.grids[i] << ',' << fmt17(rep.log_mean_abs[i]) << ','
          << fmt17(rep.det_margin[i]) << '\n';
  }
  {
    std::ofstream out(dir / "counterexample.json", std::ios::binary);
    out << counterexample_json(rep);
  }
}

}  // namespace fbsde
