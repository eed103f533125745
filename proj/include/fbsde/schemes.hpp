#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <vector>

#include "fbsde/backward_model.hpp"
#include "fbsde/forward.hpp"
#include "fbsde/regression.hpp"

namespace fbsde {

enum class ZEstimator { standard, variance_reduced, second_order_candidate };
enum class TerminalZ { zero, gradient_formula };

struct NewtonParams {
  double tol = 1e-12;       // max-norm residual target
  int max_iter = 50;
  enum class Fallback { bisection_bracket, fail };
  Fallback fallback = Fallback::bisection_bracket;
};

/// Backward-scheme configuration. theta interpolates the driver weighting:
/// 0 explicit, 1/2 trapezoidal, 1 implicit. `taming` switches the theta = 0
/// scheme to its tamed variant (truncated terminal value and driver state).
struct SchemeConfig {
  double theta = 1.0;
  ZEstimator z_estimator = ZEstimator::variance_reduced;
  std::optional<TamingThresholds> taming;
  NewtonParams newton;
  TerminalZ terminal_z = TerminalZ::zero;
  /// Debug cross-check: solve cubic drivers by both the closed form and
  /// Newton and fail if they disagree beyond 1e-10.
  bool check_cardano_newton_agreement = false;
  /// Keep the per-step fitted regression functions in the solution so it
  /// can be re-evaluated on paths that played no part in the fit. Only the
  /// regression backend supports this.
  bool record_fits = false;
};

/// Largest step the theta scheme accepts for theta > 0:
/// min(1, [4 theta (L_y + 3 d theta L_z^2)]^{-1}); +inf for theta = 0.
double theta_step_bound(double theta, const ModelConstants& c, int dim);

struct StepDiagnostics {
  int newton_iterations = 0;       // worst path this step
  double newton_residual = 0.0;    // worst residual this step
  double condition = 0.0;          // regression condition estimate
  double truncated_state_fraction = 0.0;  // tamed driver-state truncations
  int pathwise_bound_violations = 0;      // tamed |Y_i| bound failures
};

/// One step's fitted conditional-expectation functions: coefficients in the
/// standardized basis recorded at fit time. y_rhs is the projection the Y
/// update solves against (E[A] in the update equation), z the gradient
/// estimate.
struct StepFit {
  Eigen::VectorXd shift;
  Eigen::VectorXd scale;
  Eigen::MatrixXd y_rhs_coeffs;
  Eigen::MatrixXd z_coeffs;
};

/// Discrete backward solution: Y[i] is M x k, Z[i] is M x (k*d) with entry
/// (a,b) of the k x d gradient block stored in column a*d + b.
struct BackwardSolution {
  GridSpec grid;
  double theta = 0.0;
  int value_dim = 1;
  int noise_dim = 1;
  std::vector<Eigen::MatrixXd> Y;
  std::vector<Eigen::MatrixXd> Z;
  bool diverged = false;
  int diverged_step = -1;
  std::vector<StepDiagnostics> steps;  // index i in [0, N)
  double terminal_truncated_fraction = 0.0;
  std::optional<TamingThresholds> taming;
  TerminalZ terminal_z = TerminalZ::zero;
  std::optional<BasisSpec> fit_basis;  // set when fits were recorded
  std::vector<StepFit> fits;           // size N when recorded

  int paths() const { return Y.empty() ? 0 : static_cast<int>(Y.back().rows()); }
  int newton_max_iterations() const;
  double newton_max_residual() const;
  double max_condition() const;
};

struct ImplicitSolveStats {
  int iterations = 0;
  double residual = 0.0;
  bool used_fallback = false;
};

/// Solves y - theta h f(t, x, y, z) = a. Strong monotonicity needs
/// theta L_y h < 1; callers get a ConfigError otherwise. Cubic drivers go
/// through the closed-form single real root, everything else through
/// damped Newton with an optional bracketing-bisection fallback (1-d only).
Eigen::VectorXd solve_implicit_y(double theta, double h,
                                 const BackwardModel& model, double t,
                                 const Eigen::VectorXd& x,
                                 const Eigen::MatrixXd& z,
                                 const Eigen::VectorXd& a,
                                 const NewtonParams& params,
                                 ImplicitSolveStats* stats = nullptr);

/// Closed-form (Cardano) root of y - theta h (c3 y^3 + c2 y^2 + c1 y) = a.
double solve_implicit_cubic(double theta, double h, const CubicCoeffs& cc,
                            double a);

/// Newton path regardless of driver kind, for cross-checks.
Eigen::VectorXd solve_implicit_newton(double theta, double h,
                                      const BackwardModel& model, double t,
                                      const Eigen::VectorXd& x,
                                      const Eigen::MatrixXd& z,
                                      const Eigen::VectorXd& a,
                                      const NewtonParams& params,
                                      ImplicitSolveStats* stats = nullptr);

/// Conditional-expectation backend for one backward pass. bind() is called
/// once per time step with the M x d states, project() any number of times
/// for that step's targets.
class CondExpProvider {
 public:
  virtual ~CondExpProvider() = default;
  virtual void bind(int step, const Eigen::Ref<const Eigen::MatrixXd>& x) = 0;
  virtual Eigen::MatrixXd project(
      const Eigen::Ref<const Eigen::MatrixXd>& targets) = 0;
  virtual double condition() const { return 0.0; }
  /// Fitted-function introspection for fit recording; null when the backend
  /// cannot express its projections as reusable functions.
  virtual const StepProjector* projector() const { return nullptr; }
};

/// Least-squares regression backend (the default).
class RegressionCondExp final : public CondExpProvider {
 public:
  explicit RegressionCondExp(BasisSpec basis, double ridge = 0.0)
      : proj_(basis, ridge) {}
  void bind(int, const Eigen::Ref<const Eigen::MatrixXd>& x) override {
    proj_.bind(x);
  }
  Eigen::MatrixXd project(
      const Eigen::Ref<const Eigen::MatrixXd>& targets) override {
    return proj_.project(targets);
  }
  double condition() const override { return proj_.condition(); }
  const StepProjector* projector() const override { return &proj_; }

 private:
  StepProjector proj_;
};

/// Gradient estimators for one step; the provider must already be bound to
/// step i. A_next is Y_{i+1} + (1-theta) h f(t_{i+1}, ...), cond_A its
/// projection.
Eigen::MatrixXd z_standard(int i, const PathEnsemble& ens,
                           const Eigen::MatrixXd& A_next,
                           CondExpProvider& condexp);
Eigen::MatrixXd z_variance_reduced(int i, const PathEnsemble& ens,
                                   const Eigen::MatrixXd& A_next,
                                   const Eigen::MatrixXd& cond_A,
                                   CondExpProvider& condexp);
Eigen::MatrixXd z_second_order_candidate(int i, const PathEnsemble& ens,
                                         const Eigen::MatrixXd& A_next,
                                         const Eigen::MatrixXd& Z_next,
                                         CondExpProvider& condexp);

/// One backward step: computes Z_i from step-(i+1) data, then Y_i (explicit
/// average or implicit solve). Throws BlowUpError on non-finite values.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> theta_backward_step(
    int i, const PathEnsemble& ens, const BackwardModel& model,
    const SchemeConfig& config, CondExpProvider& condexp,
    const Eigen::MatrixXd& Y_next, const Eigen::MatrixXd& Z_next,
    StepDiagnostics* diag = nullptr);

/// Full backward pass from the terminal condition. Blow-ups are recorded as
/// a divergence outcome in the returned solution, not thrown. Refuses steps
/// above theta_step_bound and taming combined with theta != 0.
BackwardSolution run_theta_scheme(const PathEnsemble& ens,
                                  const BackwardModel& model,
                                  const SchemeConfig& config,
                                  CondExpProvider& condexp);
BackwardSolution run_theta_scheme(const PathEnsemble& ens,
                                  const BackwardModel& model,
                                  const SchemeConfig& config,
                                  const BasisSpec& basis, double ridge = 0.0);

/// Tamed explicit scheme: theta = 0 with truncated terminal value (level
/// L_h) and truncated driver state (level K_h). config.taming must be set;
/// thresholds are validated against the ensemble's step.
BackwardSolution run_tamed_explicit(const PathEnsemble& ens,
                                    const BackwardModel& model,
                                    const SchemeConfig& config,
                                    const BasisSpec& basis, double ridge = 0.0);

/// Evaluates a recorded run on a fresh ensemble: same terminal rule, then
/// per step the stored regression functions supply E[A] and Z while the Y
/// update (explicit copy or implicit solve) runs pathwise as usual. The
/// recorded run must have completed with fits (`record_fits`) on a grid
/// matching the fresh ensemble's.
BackwardSolution replay_backward(const BackwardSolution& recorded,
                                 const PathEnsemble& fresh,
                                 const BackwardModel& model,
                                 const NewtonParams& params = {});

}  // namespace fbsde
