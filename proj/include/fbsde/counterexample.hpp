#pragma once

#include <cstdint>
#include <vector>

namespace fbsde {

/// Signed log-magnitude number: value = sign * exp(log_abs). The explicit
/// cubic iteration squares magnitudes every step, which leaves double range
/// within a handful of steps; this representation never overflows.
struct LogValue {
  double log_abs = 0.0;  // -inf encodes zero
  int sign = 0;          // -1, 0, +1

  static LogValue from_double(double v);
  double to_double() const;  // saturates to +-inf
  double log2_abs() const;
};

/// One step of the naive explicit scheme for the driver -y^3 on a unit-step
/// fraction h: psi(y) = y - h y^3, evaluated in log space.
LogValue explicit_cubic_map(const LogValue& y, double h);

/// Backward iterates Y_i = psi^{N-i}(xi) of the explicit scheme on [0,1]
/// with h = 1/N and terminal value xi; index i runs 0..N.
std::vector<LogValue> counterexample_iterate(int N, double xi);

/// Monte Carlo estimate of E|Y_{1/2}| for terminal value W_{1/2} ~ N(0,1/2):
/// per even N, iterate N/2 explicit steps on `samples` draws and return the
/// log of the empirical mean magnitude (log-sum-exp, never overflows).
struct DivergenceStat {
  std::vector<int> N;
  std::vector<double> log_mean_abs;
  bool strictly_increasing = false;
};

DivergenceStat counterexample_divergence_stat(const std::vector<int>& N_list,
                                              int samples,
                                              std::uint64_t seed);

}  // namespace fbsde
