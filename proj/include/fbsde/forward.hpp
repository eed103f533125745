#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "fbsde/grid.hpp"

namespace fbsde {

enum class ExactKind { none, brownian, geometric_brownian };

/// Diffusion dX = b(t,X) dt + sigma(t,X) dW on R^d.
///
/// `exact` selects a closed-form transition instead of Euler-Maruyama:
///   brownian             X_{i+1} = X_i + dW               (b = 0, sigma = I)
///   geometric_brownian   componentwise exact lognormal step with scalar
///                        coefficients gbm_mu, gbm_sigma
struct ForwardModel {
  int dim = 1;
  Eigen::VectorXd x0;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> drift;
  std::function<Eigen::MatrixXd(double, const Eigen::VectorXd&)> diffusion;
  ExactKind exact = ExactKind::none;
  double gbm_mu = 0.0;
  double gbm_sigma = 0.0;

  static ForwardModel brownian(Eigen::VectorXd start);
  static ForwardModel brownian1d(double start);
  /// dX = mu X dt + sigma X dW with the exact lognormal transition.
  static ForwardModel geometric_brownian(double start, double mu, double sigma);
  /// Same coefficients but integrated with Euler-Maruyama (for strong-error
  /// studies against the exact transition on shared increments).
  static ForwardModel geometric_brownian_euler(double start, double mu,
                                               double sigma);

  /// sigma(t,x) honouring the exact kinds (identity / diagonal sigma*x).
  Eigen::MatrixXd sigma_at(double t, const Eigen::VectorXd& x) const;
};

inline constexpr std::size_t kDefaultEnsembleCap = std::size_t{4} << 30;

/// M paths of increments and states on a uniform grid, plus the model that
/// produced them. Storage is step-major so per-step slices map directly to
/// M x d matrices without copying.
class PathEnsemble {
 public:
  PathEnsemble() = default;

  const GridSpec& grid() const { return grid_; }
  int paths() const { return paths_; }
  int dim() const { return model_.dim; }
  std::uint64_t seed() const { return seed_; }
  const ForwardModel& model() const { return model_; }

  /// Increment dW over [t_step, t_{step+1}], step in [0, N).
  double increment(int path, int step, int coord = 0) const {
    return increments_[offset(step, path, coord)];
  }
  double state(int path, int step, int coord = 0) const {
    return states_[offset(step, path, coord)];
  }

  using Slice = Eigen::Map<const Eigen::MatrixXd>;
  /// M x d matrix of states at t_step, step in [0, N].
  Slice states_at(int step) const {
    return Slice(states_.data() + block(step), paths_, model_.dim);
  }
  /// M x d matrix of increments over [t_step, t_{step+1}], step in [0, N).
  Slice increments_at(int step) const {
    return Slice(increments_.data() + block(step), paths_, model_.dim);
  }

  friend PathEnsemble simulate_forward(const ForwardModel&, const GridSpec&,
                                       int, std::uint64_t, std::size_t);
  friend PathEnsemble coupled_refinement(const PathEnsemble&);
  friend PathEnsemble load_ensemble(std::istream&);

 private:
  std::size_t block(int step) const {
    return static_cast<std::size_t>(step) * paths_ * model_.dim;
  }
  std::size_t offset(int step, int path, int coord) const {
    return block(step) + static_cast<std::size_t>(coord) * paths_ + path;
  }
  void integrate_states();

  GridSpec grid_;
  int paths_ = 0;
  std::uint64_t seed_ = 0;
  ForwardModel model_;
  std::vector<double> increments_;  // N blocks of M x d
  std::vector<double> states_;      // N+1 blocks of M x d
};

/// Draws per-path increment substreams (stream 0) and integrates the state
/// recursion. Throws CapacityError above `memory_cap` bytes of path storage
/// and SimulationError on non-finite values.
PathEnsemble simulate_forward(const ForwardModel& model, const GridSpec& grid,
                              int paths, std::uint64_t seed,
                              std::size_t memory_cap = kDefaultEnsembleCap);

/// Halves the step via a Brownian bridge: each coarse increment splits into
/// two fine ones whose floating-point sum reproduces it to within one
/// rounding (exactly, when the bridge draw does not dominate the increment),
/// then states are re-integrated on the fine grid. Bridge draws come from
/// stream 1, so the result is reproducible from (seed, coarse grid) alone.
PathEnsemble coupled_refinement(const PathEnsemble& coarse);

/// Versioned CSV snapshot (header line, then path,step,coordinate,increment,
/// state rows). Intended for debugging and golden tests, not bulk storage.
void dump_ensemble(const PathEnsemble& ens, std::ostream& out);
PathEnsemble load_ensemble(std::istream& in);

}  // namespace fbsde
