#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fbsde/analysis.hpp"

namespace fbsde {

enum class OracleKind { none, fhn_closed_form };

/// Which paths the truth-error metrics are computed on: the regression
/// ensemble itself (the usual choice) or an independently simulated one
/// evaluated through the recorded per-step fits.
enum class EvalEnsemble { shared, independent };

/// Scope of the grid-halving distance e(N): the usual max over all steps,
/// or the terminal step alone. The latter isolates the error on the
/// (possibly truncated) terminal condition; since terminal values do not
/// depend on the backward pass, such runs skip it when nothing else needs
/// it.
enum class EMetric { max_over_steps, terminal };

/// Forward-model section of a config file.
struct ForwardConfig {
  std::string kind = "brownian";  // brownian | geometric_brownian |
                                  // geometric_brownian_euler
  std::vector<double> x0{0.0};
  double mu = 0.0;     // geometric models only
  double sigma = 1.0;  // geometric models only

  ForwardModel build() const;
  bool operator==(const ForwardConfig&) const = default;
};

/// Heavier parameter set switched in by --paper-scale.
struct ScaleOverride {
  std::optional<int> paths;
  std::optional<int> degree;
  bool operator==(const ScaleOverride&) const = default;
};

/// A declarative experiment: which backward model, which scheme sweeps
/// (theta values and/or tamed truncation factors alpha), which grid ladder,
/// and which metrics. Parsed from a line-oriented `key = value` file with
/// [experiment], [forward], [basis], [paper_scale] and [output] sections.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string model = "fhn_a_minus_1";
  std::vector<double> theta_list;  // theta-scheme sweep
  std::vector<double> alpha_list;  // tamed-scheme sweep (multiplies L_h, K_h)
  std::vector<int> grid_list;      // ladder of interval counts N
  double horizon = 1.0;
  int paths = 50000;
  std::uint64_t seed = 1;
  int replications = 10;
  ZEstimator z_estimator = ZEstimator::variance_reduced;
  TerminalZ terminal_z = TerminalZ::zero;
  OracleKind oracle = OracleKind::none;
  bool compute_e = false;  // grid-halving self-convergence e(N)
  EMetric e_metric = EMetric::max_over_steps;
  EvalEnsemble eval_ensemble = EvalEnsemble::shared;
  std::optional<double> c2_override;  // taming growth constant by hand
  BasisSpec basis{BasisKind::hermite, 5};
  double ridge = 0.0;
  ForwardConfig forward;
  ScaleOverride paper_scale;
  std::string out_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;
};

/// Parses the config format; errors carry the offending line number.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_file(const std::string& path);

/// Canonical text form; parse(serialize(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

/// Up-front feasibility checks: grids, sweeps, model resolution, and the
/// step restrictions (theta bound and tamed h*) for every cell.
void validate_config(const ExperimentConfig& config);

/// One (sweep value, N, replication) outcome; optional fields print as
/// empty CSV cells.
struct CellResult {
  std::string experiment;
  std::string scheme;  // explicit | trapezoidal | implicit | theta | tamed
  std::optional<double> theta;
  std::optional<double> alpha;
  int N = 0;
  double h = 0.0;
  int replication = 0;
  std::uint64_t seed = 0;
  std::optional<double> maxY_rms;
  std::optional<double> eN;
  std::optional<double> z_err;
  bool diverged = false;
  int newton_max_iter = 0;
  double cond_max = 0.0;
};

/// Per-sweep-value ladder statistics plus the fitted log-log rate.
struct SeriesSummary {
  std::string scheme;
  std::optional<double> theta;
  std::optional<double> alpha;
  std::string metric;  // maxY_rms | eN
  std::vector<int> grids;
  std::vector<double> mean_err;       // per grid, over finite replications
  std::vector<double> std_err;        // sample std over replications
  std::vector<int> diverged_cells;    // per grid
  std::optional<RateFit> rate;
};

struct ExperimentResult {
  ExperimentConfig config;  // effective values (after paper-scale override)
  std::vector<CellResult> cells;
  std::vector<SeriesSummary> series;
  bool any_diverged = false;
  double wall_seconds = 0.0;
};

ExperimentResult run_experiment(const ExperimentConfig& config,
                                bool paper_scale = false);

/// Fixed-schema CSV:
/// experiment,scheme,theta,alpha,N,h,replication,seed,maxY_rms,eN,z_err,
/// diverged,newton_max_iter,cond_max — floats with 17 significant digits,
/// rows sorted by (theta, alpha, N, replication).
void write_results_csv(const std::vector<CellResult>& cells, std::ostream& out);
std::vector<CellResult> read_results_csv(std::istream& in);

/// Deterministic run summary (rates per series); wall clock lives in the
/// metadata JSON so reruns stay byte-identical.
std::string summary_json(const ExperimentResult& result);
std::string meta_json(const ExperimentResult& result, int workers,
                      bool paper_scale);

/// results.csv + summary.json + meta.json under result.config.out_dir.
void write_experiment_outputs(const ExperimentResult& result, int workers,
                              bool paper_scale);

/// Offline rate refit over stored rows: one line per (experiment, series,
/// metric), optionally dropping listed N values.
std::string rates_table(const std::vector<CellResult>& cells,
                        const std::vector<int>& exclude_N);

/// Divergence evidence for the untamed explicit scheme: the sampled
/// half-time log magnitude per N and the deterministic doubly-exponential
/// bound margins (min over i of log2|Y_i| - 2^{N-i} - log2 sqrt N at the
/// tail start value 2 sqrt N).
struct CounterexampleReport {
  std::vector<int> grids;
  int paths = 0;
  std::uint64_t seed = 0;
  std::vector<double> log_mean_abs;
  bool strictly_increasing = false;
  std::vector<double> det_margin;
  bool det_bound_holds = false;
};

CounterexampleReport counterexample_report(const std::vector<int>& grids,
                                           int paths, std::uint64_t seed);
std::string counterexample_json(const CounterexampleReport& report);
void write_counterexample_outputs(const CounterexampleReport& report,
                                  const std::string& out_dir);

}  // namespace fbsde
