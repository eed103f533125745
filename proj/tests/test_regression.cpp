#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "fbsde/forward.hpp"
#include "fbsde/regression.hpp"

using namespace fbsde;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> vals) {
  Eigen::MatrixXd m(static_cast<int>(vals.size()), 1);
  int i = 0;
  for (double v : vals) m(i++, 0) = v;
  return m;
}

// Integrates g(x + z) against the N(0, var) density with Simpson's rule;
// the reference for the conditional-expectation tests, deliberately not
// sharing any code with the regression path.
double gauss_smooth(const std::function<double(double)>& g, double x,
                    double var) {
  const double sd = std::sqrt(var);
  const int n = 2000;  // even
  const double lo = -8.5 * sd, hi = 8.5 * sd;
  const double step = (hi - lo) / n;
  auto f = [&](double z) {
    return g(x + z) * std::exp(-0.5 * z * z / var) /
           std::sqrt(2.0 * M_PI * var);
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(lo + i * step) * (i % 2 ? 4.0 : 2.0);
  return acc * step / 3.0;
}

}  // namespace

TEST_CASE("basis sizes count total-degree monomials") {
  CHECK(BasisSpec{BasisKind::hermite, 5}.size(1) == 6);
  CHECK(BasisSpec{BasisKind::hermite, 0}.size(1) == 1);
  CHECK(BasisSpec{BasisKind::monomial, 3}.size(2) == 10);  // C(5, 2)
  CHECK(BasisSpec{BasisKind::monomial, 2}.size(3) == 10);  // C(5, 3)
  CHECK(BasisSpec{BasisKind::hermite, 7}.size(1) == 8);
}

TEST_CASE("multi-indices are ordered by total degree") {
  const auto idx = total_degree_multi_indices(2, 2);
  REQUIRE(idx.size() == 6);
  CHECK(idx[0] == std::vector<int>{0, 0});
  CHECK(idx[1] == std::vector<int>{1, 0});
  CHECK(idx[2] == std::vector<int>{0, 1});
  CHECK(idx[3] == std::vector<int>{2, 0});
  CHECK(idx[4] == std::vector<int>{1, 1});
  CHECK(idx[5] == std::vector<int>{0, 2});

  const auto one = total_degree_multi_indices(1, 4);
  REQUIRE(one.size() == 5);
  for (int n = 0; n <= 4; ++n) CHECK(one[n] == std::vector<int>{n});
}

TEST_CASE("Hermite columns follow the probabilists' recurrence") {
  const Eigen::VectorXd shift = Eigen::VectorXd::Zero(1);
  const Eigen::VectorXd scale = Eigen::VectorXd::Ones(1);
  const Eigen::MatrixXd x = column({0.5, -1.3, 2.0, 0.0});
  const BasisSpec spec{BasisKind::hermite, 5, Standardization::none};
  const Eigen::MatrixXd phi = build_basis_matrix(spec, shift, scale, x);
  REQUIRE(phi.cols() == 6);
  for (int m = 0; m < x.rows(); ++m) {
    const double u = x(m, 0);
    CHECK(phi(m, 0) == 1.0);
    CHECK(phi(m, 1) == u);
    CHECK(phi(m, 2) == doctest::Approx(u * u - 1.0));
    CHECK(phi(m, 3) == doctest::Approx(u * u * u - 3.0 * u));
    CHECK(phi(m, 4) ==
          doctest::Approx(u * u * u * u - 6.0 * u * u + 3.0));
    CHECK(phi(m, 5) == doctest::Approx(std::pow(u, 5) - 10.0 * std::pow(u, 3) +
                                       15.0 * u));
  }

  const BasisSpec mono{BasisKind::monomial, 3, Standardization::none};
  const Eigen::MatrixXd pm = build_basis_matrix(mono, shift, scale, x);
  for (int m = 0; m < x.rows(); ++m)
    for (int n = 0; n <= 3; ++n)
      CHECK(pm(m, n) == doctest::Approx(std::pow(x(m, 0), n)));
}

TEST_CASE("affine fit of a parabola lands on the fitted mean") {
  // LS line through (-1,1), (0,0), (1,1) is flat at 2/3.
  const Eigen::MatrixXd x = column({-1.0, 0.0, 1.0});
  const Eigen::MatrixXd y = column({1.0, 0.0, 1.0});
  const BasisSpec spec{BasisKind::monomial, 1, Standardization::per_step_affine};
  const auto op = RegressionOperator::fit(spec, x, y);
  for (int m = 0; m < 3; ++m)
    CHECK(op.fitted()(m, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-13));
  CHECK(op.diagnostics().residual_rms ==
        doctest::Approx(std::sqrt(2.0 / 3.0 * (1.0 / 3.0))).epsilon(1e-10));
}

TEST_CASE("constants are reproduced exactly") {
  const auto ens = simulate_forward(ForwardModel::brownian1d(0.0),
                                    GridSpec{1.0, 1}, 200, 31);
  const Eigen::MatrixXd x = ens.states_at(1);
  const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(200, 1, 3.75);
  for (auto kind : {BasisKind::hermite, BasisKind::monomial}) {
    const auto fitted =
        condexp(BasisSpec{kind, 4, Standardization::per_step_affine}, x, y);
    for (int m = 0; m < 200; ++m)
      CHECK(fitted(m, 0) == doctest::Approx(3.75).epsilon(1e-12));
  }
}

TEST_CASE("targets inside the basis span are interpolated") {
  const auto ens = simulate_forward(ForwardModel::brownian1d(0.5),
                                    GridSpec{1.0, 1}, 400, 8);
  const Eigen::MatrixXd x = ens.states_at(1);
  Eigen::MatrixXd y(400, 1);
  for (int m = 0; m < 400; ++m) {
    const double v = x(m, 0);
    y(m, 0) = 2.0 - v + 0.25 * v * v * v;
  }
  const BasisSpec spec{BasisKind::hermite, 3, Standardization::per_step_affine};
  const auto op = RegressionOperator::fit(spec, x, y);
  CHECK(op.diagnostics().residual_rms < 1e-11);

  const Eigen::MatrixXd fresh = column({-2.0, 0.1, 3.7});
  const Eigen::MatrixXd out = op.eval(fresh);
  for (int m = 0; m < 3; ++m) {
    const double v = fresh(m, 0);
    CHECK(out(m, 0) ==
          doctest::Approx(2.0 - v + 0.25 * v * v * v).epsilon(1e-10));
  }
}

TEST_CASE("eval on the fitting sample reproduces fitted() bitwise") {
  const auto ens = simulate_forward(ForwardModel::geometric_brownian(2.0, 0.5, 0.5),
                                    GridSpec{1.0, 1}, 300, 13);
  const Eigen::MatrixXd x = ens.states_at(1);
  Eigen::MatrixXd y(300, 2);
  for (int m = 0; m < 300; ++m) {
    y(m, 0) = std::sin(x(m, 0));
    y(m, 1) = x(m, 0) * x(m, 0);
  }
  const BasisSpec spec{BasisKind::hermite, 4, Standardization::per_step_affine};
  const auto op = RegressionOperator::fit(spec, x, y);
  const Eigen::MatrixXd replay = op.eval(x);
  for (int m = 0; m < 300; ++m)
    for (int j = 0; j < 2; ++j) CHECK(replay(m, j) == op.fitted()(m, j));
}

TEST_CASE("projection is idempotent and preserves the sample mean") {
  const auto ens = simulate_forward(ForwardModel::brownian1d(0.0),
                                    GridSpec{1.0, 1}, 500, 21);
  const Eigen::MatrixXd x = ens.states_at(1);
  Eigen::MatrixXd y(500, 1);
  for (int m = 0; m < 500; ++m) y(m, 0) = std::cos(2.0 * x(m, 0));

  StepProjector proj(BasisSpec{BasisKind::hermite, 5});
  proj.bind(x);
  const Eigen::MatrixXd once = proj.project(y);
  const Eigen::MatrixXd twice = proj.project(once);
  CHECK((twice - once).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK(once.mean() == doctest::Approx(y.mean()).epsilon(1e-12));
}

TEST_CASE("input validation in the projector") {
  StepProjector proj(BasisSpec{BasisKind::hermite, 5});
  CHECK_THROWS_AS(proj.project(Eigen::MatrixXd::Ones(4, 1)), DataError);

  SUBCASE("underdetermined sample") {
    CHECK_THROWS_AS(proj.bind(column({0.0, 1.0, 2.0})), DataError);
  }
  SUBCASE("non-finite states") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(20, 1);
    x(7, 0) = std::nan("");
    CHECK_THROWS_AS(proj.bind(x), DataError);
  }
  SUBCASE("non-finite targets, mismatched rows") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(20, 1);
    proj.bind(x);
    Eigen::MatrixXd y = Eigen::MatrixXd::Ones(20, 1);
    y(3, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(proj.project(y), DataError);
    CHECK_THROWS_AS(proj.project(Eigen::MatrixXd::Ones(19, 1)), DataError);
  }
  SUBCASE("bad construction parameters") {
    CHECK_THROWS_AS(StepProjector(BasisSpec{BasisKind::hermite, -1}),
                    ConfigError);
    CHECK_THROWS_AS(StepProjector(BasisSpec{BasisKind::hermite, 2}, -0.5),
                    ConfigError);
  }
}

TEST_CASE("a point-mass sample projects onto the sample mean") {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Constant(50, 1, 1.5);
  const Eigen::MatrixXd y = column({2.0}).replicate(50, 1) +
                            Eigen::MatrixXd::Random(50, 1);

  StepProjector proj(BasisSpec{BasisKind::hermite, 5});
  proj.bind(x);
  CHECK(proj.rank() == 1);
  CHECK(proj.condition() == 1.0);
  CHECK_FALSE(proj.ill_conditioned());
  const Eigen::MatrixXd fitted = proj.project(y);
  for (int m = 0; m < 50; ++m)
    CHECK(fitted(m, 0) == doctest::Approx(y.mean()).epsilon(1e-12));

  // The recorded operator extrapolates by the same constant.
  const auto op = RegressionOperator::fit(BasisSpec{BasisKind::hermite, 5}, x, y);
  const Eigen::MatrixXd out = op.eval(column({-4.0, 0.0, 9.0}));
  for (int m = 0; m < 3; ++m)
    CHECK(out(m, 0) == doctest::Approx(y.mean()).epsilon(1e-12));
}

TEST_CASE("a two-level sample under a cubic basis is flagged as degenerate") {
  // Only two distinct abscissae, four basis functions: rank 2 exactly.
  const int M = 40;
  Eigen::MatrixXd x(M, 1);
  Eigen::MatrixXd y(M, 1);
  for (int m = 0; m < M; ++m) {
    x(m, 0) = m % 2 ? 1.0 : 0.0;
    y(m, 0) = (m % 2 ? 3.0 : -1.0) + 0.01 * std::sin(m);
  }

  StepProjector bare(BasisSpec{BasisKind::hermite, 3});
  bare.bind(x);
  CHECK(bare.rank() == 2);
  CHECK(bare.ill_conditioned());
  // Least squares on two atoms is the per-atom mean.
  double m0 = 0.0, m1 = 0.0;
  for (int m = 0; m < M; m += 2) m0 += y(m, 0) * 2.0 / M;
  for (int m = 1; m < M; m += 2) m1 += y(m, 0) * 2.0 / M;
  const Eigen::MatrixXd fitted = bare.project(y);
  for (int m = 0; m < M; ++m)
    CHECK(fitted(m, 0) == doctest::Approx(m % 2 ? m1 : m0).epsilon(1e-9));

  StepProjector ridged(BasisSpec{BasisKind::hermite, 3}, 1e-6);
  ridged.bind(x);
  CHECK_FALSE(ridged.ill_conditioned());
  CHECK(std::isfinite(ridged.condition()));
}

TEST_CASE("two-dimensional fits interpolate inside the span") {
  const int M = 200;
  Eigen::MatrixXd x(M, 2);
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd;
  for (int m = 0; m < M; ++m) {
    x(m, 0) = nd(gen);
    x(m, 1) = 0.5 * nd(gen) + 1.0;
  }
  Eigen::MatrixXd y(M, 1);
  for (int m = 0; m < M; ++m)
    y(m, 0) = 2.0 + x(m, 0) - 3.0 * x(m, 1) + 0.5 * x(m, 0) * x(m, 1);

  const BasisSpec spec{BasisKind::monomial, 2, Standardization::per_step_affine};
  const auto op = RegressionOperator::fit(spec, x, y);
  CHECK(op.diagnostics().residual_rms < 1e-11);

  Eigen::MatrixXd fresh(2, 2);
  fresh << 0.3, -1.2, 2.0, 0.7;
  const Eigen::MatrixXd out = op.eval(fresh);
  for (int m = 0; m < 2; ++m) {
    const double a = fresh(m, 0), b = fresh(m, 1);
    CHECK(out(m, 0) ==
          doctest::Approx(2.0 + a - 3.0 * b + 0.5 * a * b).epsilon(1e-10));
  }
  CHECK_THROWS_AS(op.eval(column({1.0})), DataError);
}

TEST_CASE("regression recovers a Gaussian smoothing of the terminal value") {
  // Two Brownian steps: condition g(X_2) on X_1 and compare against the
  // quadrature reference E[g(x + dW)], tabulated once and interpolated.
  const int M = 50000;
  const auto ens = simulate_forward(ForwardModel::brownian1d(0.0),
                                    GridSpec{1.0, 2}, M, 2718);
  const double h = ens.grid().step();
  const auto x1 = ens.states_at(1);
  const auto x2 = ens.states_at(2);
  auto g = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  Eigen::MatrixXd target(M, 1);
  for (int m = 0; m < M; ++m) target(m, 0) = g(x2(m, 0));

  const double lo = -6.0, table_step = 0.01;
  std::vector<double> table(1201);
  for (std::size_t i = 0; i < table.size(); ++i)
    table[i] = gauss_smooth(g, lo + i * table_step, h);
  auto oracle = [&](double x) {
    const double u = std::clamp((x - lo) / table_step, 0.0, 1199.999);
    const int i = static_cast<int>(u);
    const double w = u - i;
    return (1.0 - w) * table[i] + w * table[i + 1];
  };

  std::vector<double> rms;
  for (int degree : {1, 3, 7}) {
    const auto fitted = condexp(
        BasisSpec{BasisKind::hermite, degree, Standardization::per_step_affine},
        x1, target);
    double acc = 0.0;
    for (int m = 0; m < M; ++m) {
      const double d = fitted(m, 0) - oracle(x1(m, 0));
      acc += d * d;
    }
    rms.push_back(std::sqrt(acc / M));
  }
  INFO("rms by degree 1/3/7: ", rms[0], " ", rms[1], " ", rms[2]);
  CHECK(rms[0] > rms[1]);
  CHECK(rms[1] > rms[2]);
  CHECK(rms[2] < 5e-3);
}

TEST_CASE("ridge shrinks coefficients toward zero") {
  const auto ens = simulate_forward(ForwardModel::brownian1d(0.0),
                                    GridSpec{1.0, 1}, 300, 99);
  const Eigen::MatrixXd x = ens.states_at(1);
  Eigen::MatrixXd y(300, 1);
  for (int m = 0; m < 300; ++m) y(m, 0) = std::sin(3.0 * x(m, 0));

  const BasisSpec spec{BasisKind::hermite, 5, Standardization::per_step_affine};
  const auto plain = RegressionOperator::fit(spec, x, y, 0.0);
  const auto heavy = RegressionOperator::fit(spec, x, y, 1e6);
  CHECK(heavy.coefficients().norm() < 0.01 * plain.coefficients().norm());
  const auto light = RegressionOperator::fit(spec, x, y, 1e-10);
  CHECK((light.coefficients() - plain.coefficients()).norm() <
        1e-6 * plain.coefficients().norm());
}
