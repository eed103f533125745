#include "fbsde/forward.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "fbsde/rng.hpp"

namespace fbsde {

ForwardModel ForwardModel::brownian(Eigen::VectorXd start) {
  ForwardModel m;
  m.dim = static_cast<int>(start.size());
  m.x0 = std::move(start);
  m.exact = ExactKind::brownian;
  const int d = m.dim;
  m.drift = [d](double, const Eigen::VectorXd&) {
    return Eigen::VectorXd::Zero(d).eval();
  };
  m.diffusion = [d](double, const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Identity(d, d).eval();
  };
  return m;
}

ForwardModel ForwardModel::brownian1d(double start) {
  Eigen::VectorXd x(1);
  x << start;
  return brownian(std::move(x));
}

ForwardModel ForwardModel::geometric_brownian(double start, double mu,
                                              double sigma) {
  ForwardModel m = geometric_brownian_euler(start, mu, sigma);
  m.exact = ExactKind::geometric_brownian;
  return m;
}

ForwardModel ForwardModel::geometric_brownian_euler(double start, double mu,
                                                    double sigma) {
  ForwardModel m;
  m.dim = 1;
  m.x0 = Eigen::VectorXd::Constant(1, start);
  m.gbm_mu = mu;
  m.gbm_sigma = sigma;
  m.drift = [mu](double, const Eigen::VectorXd& x) { return (mu * x).eval(); };
  m.diffusion = [sigma](double, const Eigen::VectorXd& x) {
    return (sigma * x).eval().asDiagonal().toDenseMatrix();
  };
  m.exact = ExactKind::none;
  return m;
}

Eigen::MatrixXd ForwardModel::sigma_at(double t, const Eigen::VectorXd& x) const {
  switch (exact) {
    case ExactKind::brownian:
      return Eigen::MatrixXd::Identity(dim, dim);
    case ExactKind::geometric_brownian:
      return (gbm_sigma * x).asDiagonal().toDenseMatrix();
    case ExactKind::none:
      return diffusion(t, x);
  }
  return Eigen::MatrixXd::Identity(dim, dim);
}

namespace {

void check_capacity(const GridSpec& grid, int paths, int dim,
                    std::size_t cap) {
  const std::size_t values =
      static_cast<std::size_t>(paths) * dim * (2 * grid.intervals + 1);
  if (values * sizeof(double) > cap) {
    throw CapacityError("ensemble of " + std::to_string(paths) + " paths x " +
                        std::to_string(grid.intervals) + " steps x " +
                        std::to_string(dim) + " coords needs " +
                        std::to_string(values * sizeof(double)) +
                        " bytes, above the cap of " + std::to_string(cap));
  }
}

[[noreturn]] void bad_value(const char* what, int path, int step) {
  throw SimulationError(std::string(what) + " produced a non-finite value at path " +
                        std::to_string(path) + ", step " + std::to_string(step));
}

}  // namespace

void PathEnsemble::integrate_states() {
  const int N = grid_.intervals;
  const int M = paths_;
  const int d = model_.dim;
  const double h = grid_.step();
  states_.assign(static_cast<std::size_t>(N + 1) * M * d, 0.0);

  const double gbm_drift =
      (model_.gbm_mu - 0.5 * model_.gbm_sigma * model_.gbm_sigma) * h;

  std::exception_ptr failure;
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    try {
      Eigen::VectorXd x = model_.x0;
      Eigen::VectorXd dw(d);
      for (int j = 0; j < d; ++j) states_[offset(0, m, j)] = x[j];
      for (int i = 0; i < N; ++i) {
        for (int j = 0; j < d; ++j) dw[j] = increments_[offset(i, m, j)];
        switch (model_.exact) {
          case ExactKind::brownian:
            x += dw;
            break;
          case ExactKind::geometric_brownian:
            for (int j = 0; j < d; ++j)
              x[j] *= std::exp(gbm_drift + model_.gbm_sigma * dw[j]);
            break;
          case ExactKind::none: {
            const double t = grid_.time(i);
            x += model_.drift(t, x) * h + model_.diffusion(t, x) * dw;
            break;
          }
        }
        for (int j = 0; j < d; ++j) {
          if (!std::isfinite(x[j])) bad_value("state recursion", m, i + 1);
          states_[offset(i + 1, m, j)] = x[j];
        }
      }
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

PathEnsemble simulate_forward(const ForwardModel& model, const GridSpec& grid,
                              int paths, std::uint64_t seed,
                              std::size_t memory_cap) {
  if (paths < 1) throw ConfigError("simulate_forward needs at least one path");
  if (model.dim < 1 || model.x0.size() != model.dim)
    throw ConfigError("forward model x0 does not match its dimension");
  check_capacity(grid, paths, model.dim, memory_cap);

  PathEnsemble ens;
  ens.grid_ = grid;
  ens.paths_ = paths;
  ens.seed_ = seed;
  ens.model_ = model;
  const int N = grid.intervals;
  const int d = model.dim;
  ens.increments_.assign(static_cast<std::size_t>(N) * paths * d, 0.0);
  const double root_h = std::sqrt(grid.step());

#pragma omp parallel for schedule(static)
  for (int m = 0; m < paths; ++m) {
    PathRng rng(seed, 0, static_cast<std::uint64_t>(m));
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j)
        ens.increments_[ens.offset(i, m, j)] = root_h * rng.normal();
  }
  ens.integrate_states();
  return ens;
}

PathEnsemble coupled_refinement(const PathEnsemble& coarse) {
  const int N = coarse.grid_.intervals;
  const int M = coarse.paths_;
  const int d = coarse.model_.dim;

  PathEnsemble fine;
  fine.grid_ = GridSpec{coarse.grid_.horizon, 2 * N};
  fine.paths_ = M;
  fine.seed_ = coarse.seed_;
  fine.model_ = coarse.model_;
  fine.increments_.assign(static_cast<std::size_t>(2 * N) * M * d, 0.0);

  // Midpoint of a Brownian bridge over one coarse step: mean dW/2,
  // variance h/4 per coordinate.
  const double bridge_sd = 0.5 * std::sqrt(coarse.grid_.step());

#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    PathRng rng(coarse.seed_, 1, static_cast<std::uint64_t>(m));
    for (int i = 0; i < N; ++i) {
      for (int j = 0; j < d; ++j) {
        const double dw = coarse.increments_[coarse.offset(i, m, j)];
        const double eta = bridge_sd * rng.normal();
        const double f1 = 0.5 * dw + eta;
        // Sterbenz: exact (so the pair sums back to dw bitwise) whenever the
        // bridge noise does not dominate the coarse increment; otherwise off
        // by at most one rounding of dw - f1.
        const double f2 = dw - f1;
        fine.increments_[fine.offset(2 * i, m, j)] = f1;
        fine.increments_[fine.offset(2 * i + 1, m, j)] = f2;
      }
    }
  }
  fine.integrate_states();
  return fine;
}

namespace {
std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void dump_ensemble(const PathEnsemble& ens, std::ostream& out) {
  const auto& g = ens.grid();
  out << "fbsde-ensemble-v1,T=" << fmt17(g.horizon) << ",N=" << g.intervals
      << ",M=" << ens.paths() << ",d=" << ens.dim() << ",seed=" << ens.seed()
      << ",exact=" << static_cast<int>(ens.model().exact)
      << ",mu=" << fmt17(ens.model().gbm_mu)
      << ",sigma=" << fmt17(ens.model().gbm_sigma) << ",x0=";
  for (int j = 0; j < ens.dim(); ++j)
    out << (j ? ";" : "") << fmt17(ens.model().x0[j]);
  out << "\npath,step,coordinate,increment,state\n";
  for (int m = 0; m < ens.paths(); ++m)
    for (int i = 0; i <= g.intervals; ++i)
      for (int j = 0; j < ens.dim(); ++j) {
        const double inc = i < g.intervals ? ens.increment(m, i, j) : 0.0;
        out << m << ',' << i << ',' << j << ',' << fmt17(inc) << ','
            << fmt17(ens.state(m, i, j)) << '\n';
      }
}

PathEnsemble load_ensemble(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("fbsde-ensemble-v1,", 0) != 0)
    throw DataError("ensemble snapshot: missing fbsde-ensemble-v1 header");

  double T = 0, mu = 0, sigma = 0;
  int N = 0, M = 0, d = 0, exact = 0;
  std::uint64_t seed = 0;
  std::vector<double> x0;
  std::stringstream hs(header.substr(header.find(',') + 1));
  std::string field;
  while (std::getline(hs, field, ',')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq);
    const std::string val = field.substr(eq + 1);
    if (key == "T") T = std::stod(val);
    else if (key == "N") N = std::stoi(val);
    else if (key == "M") M = std::stoi(val);
    else if (key == "d") d = std::stoi(val);
    else if (key == "seed") seed = std::stoull(val);
    else if (key == "exact") exact = std::stoi(val);
    else if (key == "mu") mu = std::stod(val);
    else if (key == "sigma") sigma = std::stod(val);
    else if (key == "x0") {
      std::stringstream xs(val);
      std::string part;
      while (std::getline(xs, part, ';')) x0.push_back(std::stod(part));
    }
  }
  if (N < 1 || M < 1 || d < 1 || static_cast<int>(x0.size()) != d)
    throw DataError("ensemble snapshot: inconsistent header fields");

  std::string cols;
  std::getline(in, cols);
  if (cols != "path,step,coordinate,increment,state")
    throw DataError("ensemble snapshot: unexpected column line");

  PathEnsemble ens;
  ens.grid_ = GridSpec{T, N};
  ens.paths_ = M;
  ens.seed_ = seed;
  Eigen::VectorXd start = Eigen::Map<Eigen::VectorXd>(x0.data(), d);
  switch (static_cast<ExactKind>(exact)) {
    case ExactKind::brownian:
      ens.model_ = ForwardModel::brownian(start);
      break;
    case ExactKind::geometric_brownian:
      ens.model_ = ForwardModel::geometric_brownian(start[0], mu, sigma);
      break;
    case ExactKind::none:
      ens.model_ = ForwardModel::geometric_brownian_euler(start[0], mu, sigma);
      break;
  }
  ens.model_.x0 = start;
  ens.model_.dim = d;
  ens.increments_.assign(static_cast<std::size_t>(N) * M * d, 0.0);
  ens.states_.assign(static_cast<std::size_t>(N + 1) * M * d, 0.0);

  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int m, i, j;
    double inc, st;
    if (std::sscanf(line.c_str(), "%d,%d,%d,%lf,%lf", &m, &i, &j, &inc, &st) != 5)
      throw DataError("ensemble snapshot: bad row '" + line + "'");
    if (m < 0 || m >= M || i < 0 || i > N || j < 0 || j >= d)
      throw DataError("ensemble snapshot: row out of range '" + line + "'");
    if (i < N) ens.increments_[ens.offset(i, m, j)] = inc;
    ens.states_[ens.offset(i, m, j)] = st;
    ++rows;
  }
  if (rows != static_cast<std::size_t>(M) * (N + 1) * d)
    throw DataError("ensemble snapshot: wrong row count");
  return ens;
}

}  // namespace fbsde
