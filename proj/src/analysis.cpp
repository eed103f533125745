#include "fbsde/analysis.hpp"

#include <cmath>

namespace fbsde {

TruthError error_vs_truth(const BackwardSolution& sol, const PathEnsemble& ens,
                          const YOracle& y_oracle, const ZOracle& z_oracle) {
  TruthError out;
  if (sol.diverged) {
    out.diverged = true;
    return out;
  }
  if (sol.value_dim != 1)
    throw DataError("error_vs_truth supports scalar-valued solutions");
  const int N = sol.grid.intervals;
  const int M = sol.paths();
  const double h = sol.grid.step();

  double worst = 0.0;
  double zsum = 0.0;
  for (int i = 0; i <= N; ++i) {
    const double t = sol.grid.time(i);
    const auto x = ens.states_at(i);
    double acc = 0.0;
    double zacc = 0.0;
    for (int m = 0; m < M; ++m) {
      const Eigen::VectorXd xm = x.row(m).transpose();
      const double dy = sol.Y[i](m, 0) - y_oracle(t, xm);
      acc += dy * dy;
      if (z_oracle && i < N)
        zacc += (sol.Z[i].row(m) - z_oracle(t, xm)).squaredNorm();
    }
    worst = std::max(worst, std::sqrt(acc / M));
    if (z_oracle && i < N) zsum += zacc / M * h;
  }
  out.max_y_rms = worst;
  if (z_oracle) out.z_sum = zsum;
  return out;
}

std::optional<double> self_convergence_e(const BackwardSolution& coarse,
                                         const BackwardSolution& fine) {
  if (fine.grid.intervals != 2 * coarse.grid.intervals ||
      fine.grid.horizon != coarse.grid.horizon)
    throw DataError("self-convergence needs the exact grid halving");
  if (coarse.paths() != fine.paths())
    throw DataError("self-convergence needs matching path counts");
  if (coarse.diverged || fine.diverged) return std::nullopt;

  const int N = coarse.grid.intervals;
  const int M = coarse.paths();
  double worst = 0.0;
  for (int i = 0; i <= N; ++i) {
    const double ms =
        (coarse.Y[i] - fine.Y[2 * i]).squaredNorm() / M;
    worst = std::max(worst, ms);
  }
  return std::sqrt(worst);
}

namespace {

RateFit loglog_fit(const std::vector<std::pair<double, double>>& pts) {
  std::vector<std::pair<double, double>> usable;
  int excluded = 0;
  for (const auto& [x, y] : pts) {
    if (x > 0.0 && y > 0.0 && std::isfinite(x) && std::isfinite(y))
      usable.emplace_back(std::log(x), std::log(y));
    else
      ++excluded;
  }
  if (usable.size() < 2)
    throw InsufficientDataError(
        "rate fit needs at least two finite positive points (" +
        std::to_string(usable.size()) + " usable, " +
        std::to_string(excluded) + " excluded)");

  const int n = static_cast<int>(usable.size());
  double sx = 0.0, sy = 0.0;
  for (const auto& [x, y] : usable) {
    sx += x;
    sy += y;
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [x, y] : usable) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
  }
  if (sxx == 0.0)
    throw InsufficientDataError("rate fit needs distinct abscissae");

  RateFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.used_points = n;
  fit.excluded_points = excluded;
  if (n > 2) {
    double rss = 0.0;
    for (const auto& [x, y] : usable) {
      const double r = y - (fit.intercept + fit.slope * x);
      rss += r * r;
    }
    fit.half_width = 1.96 * std::sqrt(rss / (n - 2) / sxx);
  }
  return fit;
}

}  // namespace

RateFit fit_rate(const std::vector<std::pair<double, double>>& n_err) {
  return loglog_fit(n_err);
}

RateFit fit_rate_vs_step(const std::vector<std::pair<double, double>>& h_err) {
  return loglog_fit(h_err);
}

double rate_geometric_sum_bound(double slope_e, double c_e) {
  if (!(slope_e < 0.0))
    throw ConfigError("geometric sum bound needs a negative slope");
  return c_e / (1.0 - std::pow(2.0, slope_e));
}

double max_increment_ms(const BackwardSolution& sol) {
  if (sol.diverged)
    throw DataError("max_increment_ms: solution diverged");
  const int N = sol.grid.intervals;
  const int M = sol.paths();
  double worst = 0.0;
  for (int i = 0; i < N; ++i)
    worst = std::max(worst, (sol.Y[i + 1] - sol.Y[i]).squaredNorm() / M);
  return worst;
}

std::vector<VariancePathologyRow> variance_pathology_report(
    const std::vector<double>& h_list, ZEstimator estimator, int paths,
    int reps, std::uint64_t seed, double x0) {
  if (reps < 2) throw ConfigError("variance report needs at least two reps");
  if (estimator == ZEstimator::second_order_candidate)
    throw ConfigError("variance report covers the standard and "
                      "variance-reduced estimators");

  std::vector<VariancePathologyRow> out;
  const BasisSpec basis{BasisKind::hermite, 1, Standardization::per_step_affine};

  for (double h : h_list) {
    std::vector<double> z0(reps);
    for (int r = 0; r < reps; ++r) {
      const auto ens =
          simulate_forward(ForwardModel::brownian1d(x0), GridSpec{h, 1}, paths,
                           seed + static_cast<std::uint64_t>(r));
      const auto x1 = ens.states_at(1);
      Eigen::MatrixXd A(paths, 1);
      for (int m = 0; m < paths; ++m)
        A(m, 0) = 1.0 / (1.0 + std::exp(-x1(m, 0)));

      RegressionCondExp condexp(basis);
      condexp.bind(0, ens.states_at(0));
      Eigen::MatrixXd Z;
      if (estimator == ZEstimator::standard) {
        Z = z_standard(0, ens, A, condexp);
      } else {
        const Eigen::MatrixXd EA = condexp.project(A);
        Z = z_variance_reduced(0, ens, A, EA, condexp);
      }
      z0[r] = Z(0, 0);
    }
    VariancePathologyRow row;
    row.h = h;
    double s = 0.0;
    for (double v : z0) s += v;
    row.mean = s / reps;
    double q = 0.0;
    for (double v : z0) q += (v - row.mean) * (v - row.mean);
    row.stddev = std::sqrt(q / (reps - 1));
    out.push_back(row);
  }
  return out;
}

}  // namespace fbsde
