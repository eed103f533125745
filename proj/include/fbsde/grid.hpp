#pragma once

#include "fbsde/errors.hpp"

namespace fbsde {

/// Uniform time grid 0 = t_0 < t_1 < ... < t_N = T with step h = T/N.
struct GridSpec {
  double horizon = 1.0;  // T
  int intervals = 1;     // N

  double step() const { return horizon / intervals; }
  double time(int i) const { return i * step(); }

  static GridSpec make(double horizon, int intervals) {
    if (!(horizon > 0.0)) throw ConfigError("grid horizon must be positive");
    if (intervals < 1) throw ConfigError("grid needs at least one interval");
    return GridSpec{horizon, intervals};
  }

  bool operator==(const GridSpec&) const = default;
};

}  // namespace fbsde
