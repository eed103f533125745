#include "fbsde/schemes.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>

namespace fbsde {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::RowVectorXd flatten_z(const Eigen::MatrixXd& zkd) {
  Eigen::RowVectorXd row(zkd.rows() * zkd.cols());
  for (int a = 0; a < zkd.rows(); ++a)
    for (int b = 0; b < zkd.cols(); ++b) row[a * zkd.cols() + b] = zkd(a, b);
  return row;
}

Eigen::MatrixXd unflatten_z(const Eigen::Ref<const Eigen::RowVectorXd>& row,
                            int k, int d) {
  Eigen::MatrixXd z(k, d);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < d; ++b) z(a, b) = row[a * d + b];
  return z;
}

}  // namespace

double theta_step_bound(double theta, const ModelConstants& c, int dim) {
  if (theta <= 0.0) return kInf;
  const double denom =
      4.0 * theta * (c.L_y + 3.0 * dim * theta * c.L_z * c.L_z);
  if (denom <= 0.0) return 1.0;
  return std::min(1.0, 1.0 / denom);
}

int BackwardSolution::newton_max_iterations() const {
  int worst = 0;
  for (const auto& s : steps) worst = std::max(worst, s.newton_iterations);
  return worst;
}

double BackwardSolution::newton_max_residual() const {
  double worst = 0.0;
  for (const auto& s : steps) worst = std::max(worst, s.newton_residual);
  return worst;
}

double BackwardSolution::max_condition() const {
  double worst = 0.0;
  for (const auto& s : steps) worst = std::max(worst, s.condition);
  return worst;
}

double solve_implicit_cubic(double theta, double h, const CubicCoeffs& cc,
                            double a) {
  const double th = theta * h;
  const double A3 = -th * cc.c3;
  const double A2 = -th * cc.c2;
  const double A1 = 1.0 - th * cc.c1;

  double y;
  if (A3 == 0.0) {
    if (A2 == 0.0) {
      y = a / A1;
    } else {
      // A2 y^2 + A1 y - a = 0; take the root on the increasing branch
      // (F' = 2 A2 y + A1 > 0), which is the one the contraction reaches.
      const double disc = A1 * A1 + 4.0 * A2 * a;
      if (disc < 0.0)
        throw SolverError("implicit quadratic has no real root");
      const double r = std::sqrt(disc);
      // Citardauq pairing for A2 y^2 + A1 y + (-a) = 0; A1 > 0 under the
      // admissibility condition, so q is bounded away from zero.
      const double q = -0.5 * (A1 + std::copysign(r, A1));
      const double y1 = q / A2;
      const double y2 = -a / q;
      y = (2.0 * A2 * y1 + A1 > 0.0) ? y1 : y2;
    }
  } else {
    // Depressed cubic s^3 + pp s + qq with y = s - A2/(3 A3).
    const double shift = A2 / (3.0 * A3);
    const double pp = A1 / A3 - 3.0 * shift * shift;
    const double qq =
        2.0 * shift * shift * shift - shift * A1 / A3 - a / A3;
    const double half_q = 0.5 * qq;
    const double disc = half_q * half_q + (pp / 3.0) * (pp / 3.0) * (pp / 3.0);
    double s;
    if (disc >= 0.0) {
      const double r = std::sqrt(disc);
      // Same-sign combination avoids cancellation; the other cube root is
      // recovered from u v = -p/3.
      const double w3 = -half_q - std::copysign(r, half_q);
      if (w3 == 0.0) {
        s = std::cbrt(-2.0 * half_q);
      } else {
        const double w = std::cbrt(w3);
        s = w - pp / (3.0 * w);
      }
    } else {
      // Three real roots; under strong monotonicity this branch is dead,
      // but pick the root with the smallest residual anyway.
      const double mr = 2.0 * std::sqrt(-pp / 3.0);
      const double arg =
          std::clamp(3.0 * qq / (pp * mr), -1.0, 1.0);
      const double phi = std::acos(arg) / 3.0;
      s = mr * std::cos(phi);
      double best = kInf;
      for (int kroot = 0; kroot < 3; ++kroot) {
        const double cand =
            mr * std::cos(phi - 2.0 * M_PI * kroot / 3.0);
        const double yc = cand - shift;
        const double res =
            std::abs(((A3 * yc + A2) * yc + A1) * yc - a);
        if (res < best) {
          best = res;
          s = cand;
        }
      }
    }
    y = s - shift;
  }

  // Two polish iterations push the closed form to machine precision.
  for (int it = 0; it < 2; ++it) {
    const double res = ((A3 * y + A2) * y + A1) * y - a;
    const double slope = (3.0 * A3 * y + 2.0 * A2) * y + A1;
    if (slope > 0.0) y -= res / slope;
  }
  return y;
}

namespace {

double bisect_monotone(double theta, double h, const BackwardModel& model,
                       double t, const Eigen::VectorXd& x,
                       const Eigen::MatrixXd& z, double a, double tol) {
  const double th = theta * h;
  Eigen::VectorXd yv(1);
  auto F = [&](double y) {
    yv[0] = y;
    return y - th * model.driver(t, x, yv, z)[0] - a;
  };
  double lo = a, hi = a, step = 1.0;
  for (int it = 0; F(lo) > 0.0; ++it) {
    if (it > 200) throw SolverError("bisection bracket search failed (low)");
    lo -= step;
    step *= 2.0;
  }
  step = 1.0;
  for (int it = 0; F(hi) < 0.0; ++it) {
    if (it > 200) throw SolverError("bisection bracket search failed (high)");
    hi += step;
    step *= 2.0;
  }
  for (int it = 0; it < 300; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = F(mid);
    if (std::abs(r) <= tol || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * (std::abs(mid) + 1.0))
      return mid;
    (r > 0.0 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

Eigen::VectorXd solve_implicit_newton(double theta, double h,
                                      const BackwardModel& model, double t,
                                      const Eigen::VectorXd& x,
                                      const Eigen::MatrixXd& z,
                                      const Eigen::VectorXd& a,
                                      const NewtonParams& params,
                                      ImplicitSolveStats* stats) {
  const double th = theta * h;
  const int k = static_cast<int>(a.size());
  if (th == 0.0) {
    if (stats) *stats = {};
    return a;
  }

  auto residual = [&](const Eigen::VectorXd& y) {
    return (y - th * model.driver(t, x, y, z) - a).eval();
  };

  Eigen::VectorXd y = a;
  Eigen::VectorXd r = residual(y);
  double rn = r.lpNorm<Eigen::Infinity>();
  int it = 0;
  bool stalled = false;

  while (rn > params.tol && it < params.max_iter && !stalled) {
    Eigen::MatrixXd J(k, k);
    if (model.kind == DriverKind::y_only_cubic && k == 1) {
      J(0, 0) = 1.0 - th * model.cubic_slope(y[0]);
    } else {
      const double base = 1e-7;
      Eigen::VectorXd yp = y;
      for (int j = 0; j < k; ++j) {
        const double dj = base * (1.0 + std::abs(y[j]));
        yp[j] = y[j] + dj;
        J.col(j) = (residual(yp) - r) / dj;
        yp[j] = y[j];
      }
    }
    Eigen::VectorXd dy =
        k == 1 ? Eigen::VectorXd::Constant(1, -r[0] / J(0, 0))
               : J.partialPivLu().solve(-r).eval();
    if (!dy.allFinite()) {
      stalled = true;
      break;
    }
    double lambda = 1.0;
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      const Eigen::VectorXd y2 = y + lambda * dy;
      const Eigen::VectorXd r2 = residual(y2);
      const double rn2 = r2.lpNorm<Eigen::Infinity>();
      if (rn2 < rn) {
        y = y2;
        r = r2;
        rn = rn2;
        improved = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!improved) stalled = true;
    ++it;
  }

  bool used_fallback = false;
  if (rn > params.tol) {
    if (k == 1 && params.fallback == NewtonParams::Fallback::bisection_bracket) {
      y[0] = bisect_monotone(theta, h, model, t, x, z, a[0], params.tol);
      r = residual(y);
      rn = r.lpNorm<Eigen::Infinity>();
      used_fallback = true;
    } else {
      throw SolverError("implicit Newton solve did not converge (residual " +
                        std::to_string(rn) + ")");
    }
  }
  if (stats) *stats = {it, rn, used_fallback};
  return y;
}

Eigen::VectorXd solve_implicit_y(double theta, double h,
                                 const BackwardModel& model, double t,
                                 const Eigen::VectorXd& x,
                                 const Eigen::MatrixXd& z,
                                 const Eigen::VectorXd& a,
                                 const NewtonParams& params,
                                 ImplicitSolveStats* stats) {
  if (theta < 0.0 || theta > 1.0)
    throw ConfigError("theta must lie in [0, 1]");
  if (theta * model.constants.L_y * h >= 1.0)
    throw ConfigError(
        "implicit solve needs theta L_y h < 1 for strong monotonicity");
  if (theta == 0.0 || h == 0.0) {
    if (stats) *stats = {};
    return a;
  }
  if (model.kind == DriverKind::y_only_cubic && model.value_dim == 1) {
    Eigen::VectorXd y(1);
    y[0] = solve_implicit_cubic(theta, h, model.cubic, a[0]);
    if (stats) {
      const double th = theta * h;
      *stats = {0,
                std::abs(y[0] - th * model.cubic_eval(y[0]) - a[0]),
                false};
    }
    return y;
  }
  return solve_implicit_newton(theta, h, model, t, x, z, a, params, stats);
}

Eigen::MatrixXd z_standard(int i, const PathEnsemble& ens,
                           const Eigen::MatrixXd& A_next,
                           CondExpProvider& condexp) {
  const double h = ens.grid().step();
  const int k = static_cast<int>(A_next.cols());
  const int d = ens.dim();
  const auto dw = ens.increments_at(i);
  Eigen::MatrixXd target(A_next.rows(), k * d);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < d; ++b)
      target.col(a * d + b) = A_next.col(a).cwiseProduct(dw.col(b)) / h;
  return condexp.project(target);
}

Eigen::MatrixXd z_variance_reduced(int i, const PathEnsemble& ens,
                                   const Eigen::MatrixXd& A_next,
                                   const Eigen::MatrixXd& cond_A,
                                   CondExpProvider& condexp) {
  const double h = ens.grid().step();
  const int k = static_cast<int>(A_next.cols());
  const int d = ens.dim();
  const auto dw = ens.increments_at(i);
  const Eigen::MatrixXd centred = A_next - cond_A;
  Eigen::MatrixXd target(A_next.rows(), k * d);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < d; ++b)
      target.col(a * d + b) = centred.col(a).cwiseProduct(dw.col(b)) / h;
  return condexp.project(target);
}

Eigen::MatrixXd z_second_order_candidate(int i, const PathEnsemble& ens,
                                         const Eigen::MatrixXd& A_next,
                                         const Eigen::MatrixXd& Z_next,
                                         CondExpProvider& condexp) {
  const double h = ens.grid().step();
  const int k = static_cast<int>(A_next.cols());
  const int d = ens.dim();
  const auto dw = ens.increments_at(i);
  Eigen::MatrixXd target(A_next.rows(), k * d);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < d; ++b)
      target.col(a * d + b) = A_next.col(a).cwiseProduct(dw.col(b));
  return (2.0 / h) * condexp.project(target) - condexp.project(Z_next);
}

namespace {

// Driver values at step i+1 for all paths; the tamed scheme truncates the
// state argument at level K_h first.
Eigen::MatrixXd driver_values(const PathEnsemble& ens,
                              const BackwardModel& model, int next_step,
                              const Eigen::MatrixXd& Y_next,
                              const Eigen::MatrixXd& Z_next,
                              double truncation_level, double* truncated_frac) {
  const int M = ens.paths();
  const int k = model.value_dim;
  const int d = ens.dim();
  const double t = ens.grid().time(next_step);

  int truncated = 0;
  const bool truncating = std::isfinite(truncation_level);
  if (truncating) {
    const auto x = ens.states_at(next_step);
    for (int m = 0; m < M; ++m)
      if (x.row(m).norm() > truncation_level) ++truncated;
  }
  if (truncated_frac)
    *truncated_frac = static_cast<double>(truncated) / M;

  if (model.kind == DriverKind::y_only_cubic) {
    const auto& cc = model.cubic;
    return (((cc.c3 * Y_next.array() + cc.c2) * Y_next.array() + cc.c1) *
            Y_next.array())
        .matrix();
  }

  Eigen::MatrixXd F(M, k);
  const auto x = ens.states_at(next_step);
  std::exception_ptr failure;
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    try {
      Eigen::VectorXd xm = x.row(m).transpose();
      if (truncating) xm = truncate(truncation_level, xm);
      const Eigen::MatrixXd zm = unflatten_z(Z_next.row(m), k, d);
      F.row(m) = model.driver(t, xm, Y_next.row(m).transpose(), zm).transpose();
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return F;
}

}  // namespace

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> theta_backward_step(
    int i, const PathEnsemble& ens, const BackwardModel& model,
    const SchemeConfig& config, CondExpProvider& condexp,
    const Eigen::MatrixXd& Y_next, const Eigen::MatrixXd& Z_next,
    StepDiagnostics* diag) {
  const int M = ens.paths();
  const int k = model.value_dim;
  const int d = ens.dim();
  const double h = ens.grid().step();
  const double theta = config.theta;

  StepDiagnostics local;
  Eigen::MatrixXd A;
  if (theta < 1.0) {
    const double level =
        config.taming ? config.taming->K_h : kInf;
    Eigen::MatrixXd F = driver_values(ens, model, i + 1, Y_next, Z_next, level,
                                      &local.truncated_state_fraction);
    A = Y_next + (1.0 - theta) * h * F;
  } else {
    A = Y_next;
  }
  if (!A.allFinite())
    throw BlowUpError("backward target blew up at step " + std::to_string(i),
                      i);

  condexp.bind(i, ens.states_at(i));
  const Eigen::MatrixXd EA = condexp.project(A);
  if (!EA.allFinite())
    throw BlowUpError("conditional expectation blew up at step " +
                          std::to_string(i),
                      i);

  Eigen::MatrixXd Z;
  switch (config.z_estimator) {
    case ZEstimator::standard:
      Z = z_standard(i, ens, A, condexp);
      break;
    case ZEstimator::variance_reduced:
      Z = z_variance_reduced(i, ens, A, EA, condexp);
      break;
    case ZEstimator::second_order_candidate:
      Z = z_second_order_candidate(i, ens, A, Z_next, condexp);
      break;
  }
  if (!Z.allFinite())
    throw BlowUpError("gradient estimate blew up at step " + std::to_string(i),
                      i);

  Eigen::MatrixXd Y;
  if (theta == 0.0) {
    Y = EA;
  } else {
    Y.resize(M, k);
    const double t_i = ens.grid().time(i);
    const auto x = ens.states_at(i);
    int worst_it = 0;
    double worst_res = 0.0;
    std::exception_ptr failure;
#pragma omp parallel for schedule(static) reduction(max : worst_it, worst_res)
    for (int m = 0; m < M; ++m) {
      try {
        ImplicitSolveStats st;
        const Eigen::MatrixXd zm = unflatten_z(Z.row(m), k, d);
        const Eigen::VectorXd ym =
            solve_implicit_y(theta, h, model, t_i, x.row(m).transpose(), zm,
                             EA.row(m).transpose(), config.newton, &st);
        if (config.check_cardano_newton_agreement &&
            model.kind == DriverKind::y_only_cubic && k == 1) {
          const Eigen::VectorXd yn = solve_implicit_newton(
              theta, h, model, t_i, x.row(m).transpose(), zm,
              EA.row(m).transpose(), config.newton);
          if (std::abs(yn[0] - ym[0]) > 1e-10)
            throw SolverError(
                "closed-form and Newton implicit solves disagree");
        }
        Y.row(m) = ym.transpose();
        worst_it = std::max(worst_it, st.iterations);
        worst_res = std::max(worst_res, st.residual);
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
    local.newton_iterations = worst_it;
    local.newton_residual = worst_res;
  }
  if (!Y.allFinite())
    throw BlowUpError("backward value blew up at step " + std::to_string(i),
                      i);

  if (config.taming) {
    const int m_deg = model.constants.growth_degree;
    const double bound = std::pow(h, -1.0 / (2.0 * (m_deg - 1)));
    for (int m = 0; m < M; ++m)
      if (Y.row(m).norm() > bound) ++local.pathwise_bound_violations;
  }

  local.condition = condexp.condition();
  if (diag) *diag = local;
  return {std::move(Y), std::move(Z)};
}

namespace {

void validate_scheme(const PathEnsemble& ens, const BackwardModel& model,
                     const SchemeConfig& config) {
  if (config.theta < 0.0 || config.theta > 1.0)
    throw ConfigError("theta must lie in [0, 1]");
  if (config.taming && config.theta != 0.0)
    throw ConfigError("taming is only defined for the explicit scheme");
  if (config.z_estimator == ZEstimator::second_order_candidate) {
    if (config.theta != 0.5)
      throw ConfigError("the second-order Z candidate requires theta = 1/2");
    if (config.terminal_z != TerminalZ::gradient_formula)
      throw ConfigError(
          "the second-order Z candidate requires the gradient-formula "
          "terminal Z");
  }
  if (config.terminal_z == TerminalZ::gradient_formula && !model.terminal_z)
    throw ConfigError(
        "gradient-formula terminal Z requested but the model has no "
        "terminal gradient");
  const double h = ens.grid().step();
  if (config.theta > 0.0) {
    const double bound =
        theta_step_bound(config.theta, model.constants, ens.dim());
    if (h > bound)
      throw StepRestrictionError(
          "step " + std::to_string(h) +
              " violates the theta-scheme bound " + std::to_string(bound),
          bound);
  }
  if (config.taming && h > config.taming->h_star)
    throw StepRestrictionError(
        "step " + std::to_string(h) + " exceeds the tamed bound h* = " +
            std::to_string(config.taming->h_star),
        config.taming->h_star);
}

}  // namespace

BackwardSolution run_theta_scheme(const PathEnsemble& ens,
                                  const BackwardModel& model,
                                  const SchemeConfig& config,
                                  CondExpProvider& condexp) {
  validate_scheme(ens, model, config);
  const int N = ens.grid().intervals;
  const int M = ens.paths();
  const int k = model.value_dim;
  const int d = ens.dim();

  BackwardSolution sol;
  sol.grid = ens.grid();
  sol.theta = config.theta;
  sol.value_dim = k;
  sol.noise_dim = d;
  sol.taming = config.taming;
  sol.terminal_z = config.terminal_z;
  sol.Y.assign(N + 1, Eigen::MatrixXd::Zero(M, k));
  sol.Z.assign(N + 1, Eigen::MatrixXd::Zero(M, k * d));
  sol.steps.resize(N);
  if (config.record_fits) {
    const StepProjector* proj = condexp.projector();
    if (!proj)
      throw ConfigError("record_fits requires the regression backend");
    sol.fit_basis = proj->basis();
    sol.fits.resize(N);
  }

  try {
    const auto xN = ens.states_at(N);
    const double level = config.taming ? config.taming->L_h : kInf;
    int truncated = 0;
    for (int m = 0; m < M; ++m) {
      Eigen::VectorXd g = model.terminal(xN.row(m).transpose());
      if (config.taming && g.norm() > level) {
        g = truncate(level, g);
        ++truncated;
      }
      sol.Y[N].row(m) = g.transpose();
    }
    sol.terminal_truncated_fraction = static_cast<double>(truncated) / M;
    if (!sol.Y[N].allFinite())
      throw BlowUpError("terminal values are not finite", N);

    if (config.terminal_z == TerminalZ::gradient_formula) {
      const double T = ens.grid().horizon;
      for (int m = 0; m < M; ++m) {
        const Eigen::VectorXd xm = xN.row(m).transpose();
        sol.Z[N].row(m) =
            flatten_z(model.terminal_z(xm, ens.model().sigma_at(T, xm)));
      }
    }

    for (int i = N - 1; i >= 0; --i) {
      auto [Y, Z] = theta_backward_step(i, ens, model, config, condexp,
                                        sol.Y[i + 1], sol.Z[i + 1],
                                        &sol.steps[i]);
      sol.Y[i] = std::move(Y);
      sol.Z[i] = std::move(Z);
      if (config.record_fits) {
        // The provider is still bound to step i. E[A] is recovered from the
        // update equation (exact for theta = 0, within the Newton tolerance
        // otherwise), and both targets lie in the fitted span, so the
        // re-solved coefficients reproduce the fit.
        const StepProjector& proj = *condexp.projector();
        StepFit fit;
        fit.shift = proj.shift();
        fit.scale = proj.scale();
        Eigen::MatrixXd rhs = sol.Y[i];
        if (config.theta > 0.0) {
          const Eigen::MatrixXd F = driver_values(
              ens, model, i, sol.Y[i], sol.Z[i], kInf, nullptr);
          rhs.noalias() -= (config.theta * ens.grid().step()) * F;
        }
        fit.y_rhs_coeffs = proj.coefficients(rhs);
        fit.z_coeffs = proj.coefficients(sol.Z[i]);
        sol.fits[i] = std::move(fit);
      }
    }
  } catch (const BlowUpError& e) {
    sol.diverged = true;
    sol.diverged_step = e.step();
  }
  return sol;
}

BackwardSolution replay_backward(const BackwardSolution& recorded,
                                 const PathEnsemble& fresh,
                                 const BackwardModel& model,
                                 const NewtonParams& params) {
  const int N = recorded.grid.intervals;
  if (recorded.diverged) throw DataError("cannot replay a diverged run");
  if (!recorded.fit_basis || static_cast<int>(recorded.fits.size()) != N)
    throw ConfigError("replay needs a run recorded with record_fits");
  if (!(fresh.grid() == recorded.grid))
    throw DataError("replay ensemble grid does not match the recorded run");
  if (fresh.dim() != recorded.noise_dim)
    throw DataError("replay ensemble dimension does not match the recorded run");

  const int M = fresh.paths();
  const int k = recorded.value_dim;
  const int d = fresh.dim();
  const double h = fresh.grid().step();
  const double theta = recorded.theta;

  BackwardSolution sol;
  sol.grid = recorded.grid;
  sol.theta = theta;
  sol.value_dim = k;
  sol.noise_dim = d;
  sol.taming = recorded.taming;
  sol.terminal_z = recorded.terminal_z;
  sol.Y.assign(N + 1, Eigen::MatrixXd::Zero(M, k));
  sol.Z.assign(N + 1, Eigen::MatrixXd::Zero(M, k * d));
  sol.steps.resize(N);

  try {
    const auto xN = fresh.states_at(N);
    const double level = recorded.taming ? recorded.taming->L_h : kInf;
    int truncated = 0;
    for (int m = 0; m < M; ++m) {
      Eigen::VectorXd g = model.terminal(xN.row(m).transpose());
      if (recorded.taming && g.norm() > level) {
        g = truncate(level, g);
        ++truncated;
      }
      sol.Y[N].row(m) = g.transpose();
    }
    sol.terminal_truncated_fraction = static_cast<double>(truncated) / M;
    if (!sol.Y[N].allFinite())
      throw BlowUpError("terminal values are not finite", N);
    if (recorded.terminal_z == TerminalZ::gradient_formula) {
      if (!model.terminal_z)
        throw ConfigError(
            "gradient-formula terminal Z requested but the model has no "
            "terminal gradient");
      const double T = fresh.grid().horizon;
      for (int m = 0; m < M; ++m) {
        const Eigen::VectorXd xm = xN.row(m).transpose();
        sol.Z[N].row(m) =
            flatten_z(model.terminal_z(xm, fresh.model().sigma_at(T, xm)));
      }
    }

    for (int i = N - 1; i >= 0; --i) {
      const StepFit& fit = recorded.fits[i];
      const Eigen::MatrixXd phi = build_basis_matrix(
          *recorded.fit_basis, fit.shift, fit.scale, fresh.states_at(i));
      sol.Z[i].noalias() = phi * fit.z_coeffs;
      Eigen::MatrixXd rhs = phi * fit.y_rhs_coeffs;
      if (!rhs.allFinite() || !sol.Z[i].allFinite())
        throw BlowUpError(
            "replayed regression blew up at step " + std::to_string(i), i);
      if (theta == 0.0) {
        sol.Y[i] = std::move(rhs);
      } else {
        const double t = fresh.grid().time(i);
        const auto x = fresh.states_at(i);
        int worst_it = 0;
        double worst_res = 0.0;
        std::exception_ptr failure;
#pragma omp parallel for schedule(static) reduction(max : worst_it) \
    reduction(max : worst_res)
        for (int m = 0; m < M; ++m) {
          try {
            ImplicitSolveStats st;
            sol.Y[i].row(m) =
                solve_implicit_y(theta, h, model, t, x.row(m).transpose(),
                                 unflatten_z(sol.Z[i].row(m), k, d),
                                 rhs.row(m).transpose(), params, &st)
                    .transpose();
            worst_it = std::max(worst_it, st.iterations);
            worst_res = std::max(worst_res, st.residual);
          } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
          }
        }
        if (failure) std::rethrow_exception(failure);
        sol.steps[i].newton_iterations = worst_it;
        sol.steps[i].newton_residual = worst_res;
      }
      if (!sol.Y[i].allFinite())
        throw BlowUpError(
            "replayed value blew up at step " + std::to_string(i), i);
    }
  } catch (const BlowUpError& e) {
    sol.diverged = true;
    sol.diverged_step = e.step();
  }
  return sol;
}

BackwardSolution run_theta_scheme(const PathEnsemble& ens,
                                  const BackwardModel& model,
                                  const SchemeConfig& config,
                                  const BasisSpec& basis, double ridge) {
  RegressionCondExp condexp(basis, ridge);
  return run_theta_scheme(ens, model, config, condexp);
}

BackwardSolution run_tamed_explicit(const PathEnsemble& ens,
                                    const BackwardModel& model,
                                    const SchemeConfig& config,
                                    const BasisSpec& basis, double ridge) {
  if (!config.taming)
    throw ConfigError("run_tamed_explicit needs taming thresholds in the config");
  if (config.theta != 0.0)
    throw ConfigError("the tamed scheme is explicit; set theta = 0");
  return run_theta_scheme(ens, model, config, basis, ridge);
}

}  // namespace fbsde
