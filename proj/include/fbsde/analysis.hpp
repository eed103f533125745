#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "fbsde/forward.hpp"
#include "fbsde/schemes.hpp"

namespace fbsde {

/// Reference fields for scalar problems: y(t, x) and the k x d gradient
/// row z(t, x).
using YOracle = std::function<double(double, const Eigen::VectorXd&)>;
using ZOracle = std::function<Eigen::RowVectorXd(double, const Eigen::VectorXd&)>;

struct TruthError {
  bool diverged = false;
  double max_y_rms = 0.0;              // max_i E[|Y_i - y(t_i,X_i)|^2]^{1/2}
  std::optional<double> z_sum;         // sum_i E|z(t_i,X_i) - Z_i|^2 h
};

/// Error against a known solution, evaluated on the solution's own
/// ensemble. Divergent solutions only carry the flag.
TruthError error_vs_truth(const BackwardSolution& sol, const PathEnsemble& ens,
                          const YOracle& y_oracle,
                          const ZOracle& z_oracle = nullptr);

/// Grid-halving self distance max_i E[|Y^N_i - Y^{2N}_{2i}|^2]^{1/2} on
/// coupled ensembles. nullopt if either run diverged; throws on grids that
/// are not an exact halving or mismatched path counts.
std::optional<double> self_convergence_e(const BackwardSolution& coarse,
                                         const BackwardSolution& fine);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;   // at log-abscissa 0
  double half_width = 0.0;  // 1.96 standard errors on the slope
  int used_points = 0;
  int excluded_points = 0;
};

/// Least-squares slope of log err against log N. Non-finite or nonpositive
/// errors are excluded (and counted); fewer than two usable points is an
/// InsufficientDataError.
RateFit fit_rate(const std::vector<std::pair<double, double>>& n_err);

/// Same regression against log h (slopes come out positive for errors that
/// shrink with the step).
RateFit fit_rate_vs_step(const std::vector<std::pair<double, double>>& h_err);

/// Sums the geometric tail turning a self-distance constant into a
/// distance-to-limit bound: c_e / (1 - 2^{slope_e}), slope_e < 0.
double rate_geometric_sum_bound(double slope_e, double c_e);

/// max_i E[|Y_{i+1} - Y_i|^2] over one backward solution.
double max_increment_ms(const BackwardSolution& sol);

/// Monte Carlo spread of the one-step Z_0 estimate on a smooth toy problem
/// (driver 0, logistic terminal, Brownian state): the standard estimator's
/// spread grows like h^{-1/2}, the variance-reduced one stays flat.
struct VariancePathologyRow {
  double h = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
};

std::vector<VariancePathologyRow> variance_pathology_report(
    const std::vector<double>& h_list, ZEstimator estimator, int paths,
    int reps, std::uint64_t seed, double x0 = 0.0);

}  // namespace fbsde
