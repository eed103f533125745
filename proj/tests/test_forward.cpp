#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "fbsde/forward.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace fbsde;

TEST_CASE("grid step times intervals recovers the horizon") {
  const auto g = GridSpec::make(1.0, 7);
  CHECK(g.step() * 7 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g.time(0) == 0.0);
  CHECK(g.time(7) == doctest::Approx(1.0));
  CHECK_THROWS_AS(GridSpec::make(0.0, 4), ConfigError);
  CHECK_THROWS_AS(GridSpec::make(1.0, 0), ConfigError);
}

TEST_CASE("exact Brownian states are prefix sums of the increments") {
  const auto ens = simulate_forward(ForwardModel::brownian1d(1.5),
                                    GridSpec{1.0, 16}, 64, 42);
  for (int m = 0; m < ens.paths(); ++m) {
    double acc = 1.5;
    CHECK(ens.state(m, 0) == 1.5);
    for (int i = 0; i < 16; ++i) {
      acc += ens.increment(m, i);
      CHECK(ens.state(m, i + 1) == acc);  // bitwise: same summation order
    }
  }
}

TEST_CASE("zero drift and diffusion freeze every path at x0") {
  ForwardModel still;
  still.dim = 1;
  still.x0 = Eigen::VectorXd::Constant(1, 0.75);
  still.drift = [](double, const Eigen::VectorXd&) {
    return Eigen::VectorXd::Zero(1).eval();
  };
  still.diffusion = [](double, const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Zero(1, 1).eval();
  };
  const auto ens = simulate_forward(still, GridSpec{2.0, 10}, 32, 7);
  for (int m = 0; m < 32; ++m)
    for (int i = 0; i <= 10; ++i) CHECK(ens.state(m, i) == 0.75);
}

TEST_CASE("increment moments match N(0, h) within five standard errors") {
  const int M = 40000, N = 4;
  const auto ens =
      simulate_forward(ForwardModel::brownian1d(0.0), GridSpec{1.0, N}, M, 99);
  const double h = ens.grid().step();
  for (int i = 0; i < N; ++i) {
    double s = 0.0, q = 0.0;
    for (int m = 0; m < M; ++m) {
      const double v = ens.increment(m, i);
      s += v;
      q += v * v;
    }
    const double mean = s / M;
    const double var = q / M - mean * mean;
    CHECK(std::abs(mean) < 5.0 * std::sqrt(h / M));
    CHECK(std::abs(var - h) < 5.0 * h * std::sqrt(2.0 / M));
  }
}

TEST_CASE("exact geometric Brownian mean hits x0 exp(mu T)") {
  const int M = 100000;
  const auto ens = simulate_forward(
      ForwardModel::geometric_brownian(2.0, 0.5, 0.5), GridSpec{1.0, 8}, M, 4);
  double s = 0.0, q = 0.0;
  for (int m = 0; m < M; ++m) {
    const double v = ens.state(m, 8);
    s += v;
    q += v * v;
  }
  const double mean = s / M;
  const double sd = std::sqrt(q / M - mean * mean);
  const double target = 2.0 * std::exp(0.5);
  CHECK(std::abs(mean - target) < 5.0 * sd / std::sqrt(double(M)));
}

TEST_CASE("same seed reproduces the ensemble bit for bit") {
  const auto a = simulate_forward(ForwardModel::geometric_brownian(2.0, 0.5, 0.5),
                                  GridSpec{1.0, 12}, 500, 1234);
  const auto b = simulate_forward(ForwardModel::geometric_brownian(2.0, 0.5, 0.5),
                                  GridSpec{1.0, 12}, 500, 1234);
  for (int m = 0; m < 500; ++m)
    for (int i = 0; i <= 12; ++i) CHECK(a.state(m, i) == b.state(m, i));

#ifdef _OPENMP
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto c = simulate_forward(ForwardModel::geometric_brownian(2.0, 0.5, 0.5),
                                  GridSpec{1.0, 12}, 500, 1234);
  omp_set_num_threads(saved);
  for (int m = 0; m < 500; ++m)
    for (int i = 0; i <= 12; ++i) CHECK(a.state(m, i) == c.state(m, i));
#endif
}

TEST_CASE("memory cap refuses oversized ensembles") {
  CHECK_THROWS_AS(simulate_forward(ForwardModel::brownian1d(0.0),
                                   GridSpec{1.0, 100}, 1000, 1, 1 << 10),
                  CapacityError);
}

TEST_CASE("non-finite coefficients name the failing path and step") {
  ForwardModel bad;
  bad.dim = 1;
  bad.x0 = Eigen::VectorXd::Constant(1, 1.0);
  bad.drift = [](double, const Eigen::VectorXd& x) {
    return Eigen::VectorXd::Constant(1, std::sqrt(x[0] - 10.0)).eval();
  };
  bad.diffusion = [](double, const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Identity(1, 1).eval();
  };
  CHECK_THROWS_AS(simulate_forward(bad, GridSpec{1.0, 4}, 8, 3),
                  SimulationError);
  try {
    simulate_forward(bad, GridSpec{1.0, 4}, 8, 3);
  } catch (const SimulationError& e) {
    CHECK(std::string(e.what()).find("path") != std::string::npos);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("Euler on geometric Brownian converges strongly at order 1/2") {
  const int M = 100000;
  std::vector<std::pair<double, double>> pts;
  for (int N : {16, 32, 64, 128}) {
    const auto exact = simulate_forward(
        ForwardModel::geometric_brownian(2.0, 0.5, 0.5), GridSpec{1.0, N}, M, 5);
    const auto euler =
        simulate_forward(ForwardModel::geometric_brownian_euler(2.0, 0.5, 0.5),
                         GridSpec{1.0, N}, M, 5);
    // Same seed, same increment stream: the two ensembles are coupled.
    CHECK(exact.increment(17, 3) == euler.increment(17, 3));
    double acc = 0.0;
    for (int m = 0; m < M; ++m) {
      const double dv = exact.state(m, N) - euler.state(m, N);
      acc += dv * dv;
    }
    pts.emplace_back(N, std::sqrt(acc / M));
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto& [n, e] : pts) {
    const double x = std::log(n), y = std::log(e);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const int n = static_cast<int>(pts.size());
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CHECK(slope == doctest::Approx(-0.5).epsilon(0.3));
}

TEST_CASE("refinement halves the grid and preserves the noise") {
  const auto coarse = simulate_forward(ForwardModel::brownian1d(1.5),
                                       GridSpec{1.0, 10}, 5000, 77);
  const auto fine = coupled_refinement(coarse);
  CHECK(fine.grid().intervals == 20);
  CHECK(fine.grid().horizon == 1.0);
  CHECK(fine.paths() == coarse.paths());

  SUBCASE("pair sums reproduce the coarse increments to the last ulp") {
    // A noisy split can only sum back bitwise while the halves stay
    // comparable to dw (Sterbenz); when the bridge noise dominates a tiny
    // increment the sum is off by one rounding at the halves' scale.
    int exact = 0, total = 0;
    for (int m = 0; m < coarse.paths(); ++m)
      for (int i = 0; i < 10; ++i) {
        const double f1 = fine.increment(m, 2 * i);
        const double f2 = fine.increment(m, 2 * i + 1);
        const double dw = coarse.increment(m, i);
        const double scale =
            std::max({std::abs(f1), std::abs(f2), std::abs(dw)});
        CHECK(std::abs(f1 + f2 - dw) <=
              2.0 * std::numeric_limits<double>::epsilon() * scale);
        ++total;
        if (f1 + f2 == dw) ++exact;
      }
    CHECK(exact > total / 4);
  }

  SUBCASE("terminal states agree up to accumulated roundoff") {
    for (int m = 0; m < coarse.paths(); ++m)
      CHECK(fine.state(m, 20) ==
            doctest::Approx(coarse.state(m, 10)).epsilon(1e-12));
  }

  SUBCASE("bridge midpoints have the conditional bridge law") {
    const double h = coarse.grid().step();
    double s = 0.0, q = 0.0;
    const int n = coarse.paths() * 10;
    for (int m = 0; m < coarse.paths(); ++m)
      for (int i = 0; i < 10; ++i) {
        const double centred =
            fine.increment(m, 2 * i) - 0.5 * coarse.increment(m, i);
        s += centred;
        q += centred * centred;
      }
    const double mean = s / n;
    const double var = q / n - mean * mean;
    CHECK(std::abs(mean) < 5.0 * std::sqrt(h / 4.0 / n));
    CHECK(std::abs(var - h / 4.0) < 5.0 * (h / 4.0) * std::sqrt(2.0 / n));
  }

  SUBCASE("second moments stay stable under refinement") {
    double worst_c = 0.0, worst_f = 0.0;
    for (int i = 0; i <= 10; ++i) {
      worst_c = std::max(worst_c,
                         coarse.states_at(i).array().square().mean());
      worst_f = std::max(worst_f,
                         fine.states_at(2 * i).array().square().mean());
    }
    CHECK(worst_f == doctest::Approx(worst_c).epsilon(0.05));
  }
}

TEST_CASE("ensemble snapshots round-trip") {
  const auto ens = simulate_forward(
      ForwardModel::geometric_brownian(2.0, 0.5, 0.5), GridSpec{1.0, 5}, 20, 9);
  std::stringstream buf;
  dump_ensemble(ens, buf);
  const auto back = load_ensemble(buf);
  CHECK(back.grid() == ens.grid());
  CHECK(back.paths() == ens.paths());
  CHECK(back.seed() == ens.seed());
  for (int m = 0; m < 20; ++m)
    for (int i = 0; i <= 5; ++i) {
      CHECK(back.state(m, i) == ens.state(m, i));
      if (i < 5) CHECK(back.increment(m, i) == ens.increment(m, i));
    }

  std::stringstream bad("not-a-snapshot\n");
  CHECK_THROWS_AS(load_ensemble(bad), DataError);
}
