#include "fbsde/backward_model.hpp"

#include <cmath>
#include <limits>

#include "fbsde/rng.hpp"

namespace fbsde {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

BackwardModel make_cubic_model(CubicCoeffs cc) {
  BackwardModel m;
  m.value_dim = 1;
  m.kind = DriverKind::y_only_cubic;
  m.cubic = cc;
  m.driver = [cc](double, const Eigen::VectorXd&, const Eigen::VectorXd& y,
                  const Eigen::MatrixXd&) {
    Eigen::VectorXd out(1);
    out[0] = ((cc.c3 * y[0] + cc.c2) * y[0] + cc.c1) * y[0];
    return out;
  };
  return m;
}
}  // namespace

BackwardModel builtin_model(std::string_view name) {
  if (name == "fhn_a_minus_1") {
    BackwardModel m = make_cubic_model({-1.0, 0.0, 1.0});
    m.terminal = [](const Eigen::VectorXd& x) {
      Eigen::VectorXd out(1);
      out[0] = 1.0 / (1.0 + std::exp(x[0]));
      return out;
    };
    m.terminal_z = [](const Eigen::VectorXd& x, const Eigen::MatrixXd& sigma) {
      const double g = 1.0 / (1.0 + std::exp(x[0]));
      return (-g * (1.0 - g) * sigma.row(0)).eval();
    };
    // L = 1/2 covers max_y (|y - y^3| - |y|^3) = 0.272 at y = 1/sqrt(6).
    m.constants = ModelConstants{0.5, 0.0, 1.0, 0.0, 0.0, 3, 3.0};
    return m;
  }
  if (name == "cubic_pure") {
    BackwardModel m = make_cubic_model({-1.0, 0.0, 0.0});
    m.terminal = [](const Eigen::VectorXd& x) {
      Eigen::VectorXd out(1);
      out[0] = x[0];
      return out;
    };
    m.terminal_z = [](const Eigen::VectorXd&, const Eigen::MatrixXd& sigma) {
      return sigma.row(0).eval();
    };
    m.constants = ModelConstants{0.0, 0.0, 1.0, 0.0, 0.0, 3, 3.0};
    return m;
  }
  throw ConfigError("unknown builtin model '" + std::string(name) +
                    "' (have fhn_a_minus_1, cubic_pure)");
}

double fhn_exact_solution(double t, double x, double T, double a) {
  return 1.0 / (1.0 + std::exp(x - (0.5 - a) * (T - t)));
}

double fhn_exact_gradient(double t, double x, double T, double a) {
  const double u = fhn_exact_solution(t, x, T, a);
  return -u * (1.0 - u);
}

double truncate(double level, double v) {
  if (level < 0.0) throw ConfigError("truncation level must be nonnegative");
  if (std::abs(v) <= level) return v;
  return v < 0.0 ? -level : level;
}

Eigen::VectorXd truncate(double level, const Eigen::VectorXd& v) {
  if (level < 0.0) throw ConfigError("truncation level must be nonnegative");
  const double n = v.norm();
  if (n <= level) return v;
  return (level / n) * v;
}

std::pair<double, double> taming_growth_constants(
    const ModelConstants& c, int dim, std::optional<double> c2_override) {
  const double c1 =
      2.0 * (c.L_y + 12.0 * dim * c.L_z * c.L_z + 2.0 * c.L_y * c.L_y);
  double c2;
  if (c2_override) {
    c2 = *c2_override;
    if (c2 < 0.0) throw ConfigError("c2 override must be nonnegative");
  } else if (c.L_z > 0.0) {
    c2 = std::max(c.L * c.L, c.L_x * c.L_x) / (4.0 * dim * c.L_z * c.L_z);
  } else if (c.L == 0.0 && c.L_x == 0.0) {
    c2 = 0.0;
  } else {
    throw ConfigError(
        "c2 is singular: L_z = 0 with L > 0 or L_x > 0; pass an explicit "
        "c2 override");
  }
  return {c1, c2};
}

TamingThresholds compute_taming_thresholds(const ModelConstants& c, int dim,
                                           double T, double h, double alpha,
                                           std::optional<double> c2_override) {
  if (c.growth_degree < 2)
    throw ConfigError("taming applies to superlinear drivers (m >= 2 needed)");
  if (!(T > 0.0) || !(h > 0.0))
    throw ConfigError("taming thresholds need positive T and h");
  if (!(alpha > 0.0)) throw ConfigError("taming scale alpha must be positive");

  TamingThresholds th;
  th.alpha = alpha;
  std::tie(th.c1, th.c2) = taming_growth_constants(c, dim, c2_override);
  const int m = c.growth_degree;

  const double from_growth =
      th.c2 > 0.0
          ? std::pow(3.0 * std::exp(th.c1 * T) * th.c2 * T, -(m - 1))
          : kInf;
  const double from_gradient =
      c.L_z > 0.0 ? 1.0 / (32.0 * dim * c.L_z * c.L_z) : kInf;
  th.h_star = std::min(from_growth, from_gradient);
  if (h > th.h_star)
    throw StepRestrictionError(
        "step " + std::to_string(h) + " exceeds the tamed-scheme bound h* = " +
            std::to_string(th.h_star),
        th.h_star);

  const double base = (1.0 / std::sqrt(3.0)) * std::exp(-0.5 * th.c1 * T) *
                      std::pow(h, -1.0 / (2.0 * (m - 1)));
  th.L_h = alpha * base;
  th.K_h = th.c2 > 0.0 ? alpha * base / std::sqrt(th.c2 * T) : kInf;
  return th;
}

ModelValidationReport validate_model(const BackwardModel& model, int samples,
                                     std::uint64_t seed, double horizon) {
  const auto& c = model.constants;
  const int k = model.value_dim;
  ModelValidationReport rep;
  rep.samples = samples;
  PathRng rng(seed, 2, 0);

  for (int s = 0; s < samples; ++s) {
    const double t = horizon * rng.uniform();
    Eigen::VectorXd x(1);
    x[0] = 3.0 * rng.normal();
    // Mix of scales so the growth bound is exercised well away from the
    // origin, where a wrong constant would hide.
    const double scale = s % 3 == 0 ? 0.5 : (s % 3 == 1 ? 2.0 : 10.0);
    Eigen::VectorXd y(k), y2(k);
    for (int j = 0; j < k; ++j) {
      y[j] = scale * rng.normal();
      y2[j] = scale * rng.normal();
    }
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(k, 1);
    if (c.L_z > 0.0)
      for (int j = 0; j < k; ++j) z(j, 0) = 2.0 * rng.normal();

    const Eigen::VectorXd fy = model.driver(t, x, y, z);
    const Eigen::VectorXd fy2 = model.driver(t, x, y2, z);
    const auto slack = [](double rhs) { return 1e-12 * (1.0 + std::abs(rhs)); };

    const double mono_lhs = (y2 - y).dot(fy2 - fy);
    const double mono_rhs = c.L_y * (y2 - y).squaredNorm();
    rep.worst_monotonicity_margin =
        std::max(rep.worst_monotonicity_margin, mono_lhs - mono_rhs);
    if (mono_lhs > mono_rhs + slack(mono_rhs)) ++rep.monotonicity_violations;

    const double growth_lhs = fy.norm();
    const double growth_rhs = c.L + c.L_x * x.norm() +
                              c.L_y * std::pow(y.norm(), c.growth_degree) +
                              c.L_z * z.norm();
    rep.worst_growth_margin =
        std::max(rep.worst_growth_margin, growth_lhs - growth_rhs);
    if (growth_lhs > growth_rhs + slack(growth_rhs)) ++rep.growth_violations;

    const double lip_lhs = (fy2 - fy).norm();
    const double env = 1.0 + std::pow(y.norm(), c.growth_degree - 1) +
                       std::pow(y2.norm(), c.growth_degree - 1);
    const double lip_rhs = c.L_y_loc * env * (y2 - y).norm();
    rep.worst_lipschitz_margin =
        std::max(rep.worst_lipschitz_margin, lip_lhs - lip_rhs);
    if (lip_lhs > lip_rhs + slack(lip_rhs)) ++rep.lipschitz_violations;
  }
  return rep;
}

}  // namespace fbsde
