#include "fbsde/counterexample.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "fbsde/errors.hpp"
#include "fbsde/rng.hpp"

namespace fbsde {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

LogValue LogValue::from_double(double v) {
  if (v == 0.0) return {-kInf, 0};
  return {std::log(std::abs(v)), v > 0.0 ? 1 : -1};
}

double LogValue::to_double() const {
  if (sign == 0) return 0.0;
  return sign * std::exp(log_abs);  // overflows to +-inf past ~709
}

double LogValue::log2_abs() const { return log_abs / std::numbers::ln2; }

LogValue explicit_cubic_map(const LogValue& y, double h) {
  if (y.sign == 0) return y;
  // psi(y) = y (1 - h y^2); q = h y^2 in logs.
  const double lq = std::log(h) + 2.0 * y.log_abs;
  if (lq <= 700.0) {
    const double q = std::exp(lq);
    const double w = 1.0 - q;
    if (w == 0.0) return {-kInf, 0};
    return {y.log_abs + std::log(std::abs(w)), w < 0.0 ? -y.sign : y.sign};
  }
  // q overflows a double: |1-q| = q - 1, log via log1p for full precision.
  return {y.log_abs + lq + std::log1p(-std::exp(-lq)), -y.sign};
}

std::vector<LogValue> counterexample_iterate(int N, double xi) {
  if (N < 1) throw ConfigError("counterexample needs N >= 1");
  const double h = 1.0 / N;
  std::vector<LogValue> out(N + 1);
  out[N] = LogValue::from_double(xi);
  for (int i = N - 1; i >= 0; --i)
    out[i] = explicit_cubic_map(out[i + 1], h);
  return out;
}

DivergenceStat counterexample_divergence_stat(const std::vector<int>& N_list,
                                              int samples,
                                              std::uint64_t seed) {
  if (samples < 1) throw ConfigError("divergence stat needs samples >= 1");
  DivergenceStat stat;
  stat.N = N_list;
  const double sd = std::sqrt(0.5);  // W at t = 1/2

  for (int N : N_list) {
    if (N < 2 || N % 2 != 0)
      throw ConfigError("divergence stat needs even N >= 2 (got " +
                        std::to_string(N) + ")");
    const double h = 1.0 / N;

    // log-sum-exp in two passes: track the running max, then accumulate.
    std::vector<double> logs(samples, -kInf);
#pragma omp parallel for schedule(static)
    for (int m = 0; m < samples; ++m) {
      PathRng rng(seed, 3, static_cast<std::uint64_t>(m));
      LogValue y = LogValue::from_double(sd * rng.normal());
      for (int it = 0; it < N / 2; ++it) y = explicit_cubic_map(y, h);
      logs[m] = y.sign == 0 ? -kInf : y.log_abs;
    }
    const double peak = *std::max_element(logs.begin(), logs.end());
    if (peak == -kInf) {
      stat.log_mean_abs.push_back(-kInf);
      continue;
    }
    double acc = 0.0;
    for (double l : logs) acc += std::exp(l - peak);
    stat.log_mean_abs.push_back(peak + std::log(acc) -
                                std::log(static_cast<double>(samples)));
  }

  stat.strictly_increasing = true;
  for (std::size_t i = 1; i < stat.log_mean_abs.size(); ++i)
    if (!(stat.log_mean_abs[i] > stat.log_mean_abs[i - 1]))
      stat.strictly_increasing = false;
  return stat;
}

}  // namespace fbsde
