#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "fbsde/errors.hpp"

namespace fbsde {

/// Structural constants of a driver f(t,x,y,z):
///   L, L_x, L_z, L_t   constant / state / gradient / time coefficients
///   L_y                one-sided monotonicity constant in y, and the
///                      coefficient of |y|^m in the growth bound
///   growth_degree      m, the polynomial growth degree in y
///   L_y_loc            local Lipschitz constant against the envelope
///                      (1 + |y|^{m-1} + |y'|^{m-1}); kept separate from
///                      L_y so both property tests stay sharp
struct ModelConstants {
  double L = 0.0;
  double L_x = 0.0;
  double L_y = 0.0;
  double L_z = 0.0;
  double L_t = 0.0;
  int growth_degree = 1;
  double L_y_loc = 0.0;
};

enum class DriverKind { general, y_only_cubic };

/// f(y) = c3 y^3 + c2 y^2 + c1 y for the y_only_cubic fast path.
struct CubicCoeffs {
  double c3 = 0.0;
  double c2 = 0.0;
  double c1 = 0.0;
};

using Driver = std::function<Eigen::VectorXd(
    double, const Eigen::VectorXd&, const Eigen::VectorXd&,
    const Eigen::MatrixXd&)>;

/// Terminal condition plus driver for the backward equation, vector valued
/// with k = value_dim components. z is passed as a k x d matrix.
struct BackwardModel {
  int value_dim = 1;
  Driver driver;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> terminal;
  /// Optional k x d gradient-times-diffusion input for the gradient-formula
  /// terminal Z; null means only the zero terminal Z is available.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&,
                                const Eigen::MatrixXd&)> terminal_z;
  ModelConstants constants;
  DriverKind kind = DriverKind::general;
  CubicCoeffs cubic;

  double cubic_eval(double y) const {
    return ((cubic.c3 * y + cubic.c2) * y + cubic.c1) * y;
  }
  double cubic_slope(double y) const {
    return (3.0 * cubic.c3 * y + 2.0 * cubic.c2) * y + cubic.c1;
  }
};

/// Registered models:
///   fhn_a_minus_1  f(y) = -y^3 + y, g(x) = 1/(1+e^x); constants
///                  L_y = 1, L = 1/2, m = 3, L_y_loc = 3
///   cubic_pure     f(y) = -y^3, g(x) = x; constants L_y = 1, L = 0,
///                  m = 3, L_y_loc = 3
BackwardModel builtin_model(std::string_view name);

/// Closed-form solution of the reaction-diffusion problem behind
/// fhn_a_minus_1: u(t,x) = (1 + exp(x - (1/2 - a)(T - t)))^{-1}.
double fhn_exact_solution(double t, double x, double T, double a);
/// Spatial derivative of the same, -u(1-u); times sigma = 1 this is the
/// reference Z for the Brownian experiment.
double fhn_exact_gradient(double t, double x, double T, double a);

/// Projection onto the centred ball of radius `level` (clamp in 1-d).
/// level = +inf is the identity; negative level is an error.
double truncate(double level, double v);
Eigen::VectorXd truncate(double level, const Eigen::VectorXd& v);

/// Growth constants feeding the taming thresholds:
///   c1 = 2 (L_y + 12 d L_z^2 + 2 L_y^2)
///   c2 = max(L^2, L_x^2) / (4 d L_z^2), or 0 when L = L_x = L_z = 0.
/// L_z = 0 with L > 0 or L_x > 0 has no finite c2; callers must then pass
/// `c2_override` or get a ConfigError.
std::pair<double, double> taming_growth_constants(
    const ModelConstants& c, int dim,
    std::optional<double> c2_override = std::nullopt);

/// Truncation levels and admissible step for the tamed explicit scheme.
struct TamingThresholds {
  double c1 = 0.0;
  double c2 = 0.0;
  double h_star = 0.0;  // largest admissible h
  double L_h = 0.0;     // terminal-value truncation level
  double K_h = 0.0;     // state truncation level inside the driver (+inf if unused)
  double alpha = 1.0;
};

/// Computes thresholds for step h on horizon T:
///   L_h = alpha (1/sqrt 3) e^{-c1 T/2} h^{-1/(2(m-1))}
///   K_h = alpha (1/sqrt 3) (e^{-c1 T/2}/sqrt(c2 T)) h^{-1/(2(m-1))}
///   h*  = min( (3 e^{c1 T} c2 T)^{-(m-1)}, 1/(32 d L_z^2) )
/// with each piece +inf when its constants vanish. Requires m >= 2 and
/// h <= h* (StepRestrictionError carries h* otherwise).
TamingThresholds compute_taming_thresholds(
    const ModelConstants& c, int dim, double T, double h, double alpha = 1.0,
    std::optional<double> c2_override = std::nullopt);

/// Randomized check that a driver satisfies the bounds its registered
/// constants claim: one-sided monotonicity, polynomial growth, local
/// Lipschitz continuity in y.
struct ModelValidationReport {
  int samples = 0;
  int monotonicity_violations = 0;
  int growth_violations = 0;
  int lipschitz_violations = 0;
  double worst_monotonicity_margin = 0.0;  // max of lhs - rhs over samples
  double worst_growth_margin = 0.0;
  double worst_lipschitz_margin = 0.0;
  bool passed() const {
    return monotonicity_violations == 0 && growth_violations == 0 &&
           lipschitz_violations == 0;
  }
};

ModelValidationReport validate_model(const BackwardModel& model, int samples,
                                     std::uint64_t seed, double horizon = 1.0);

}  // namespace fbsde
