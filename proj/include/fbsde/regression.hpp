#pragma once

#include <Eigen/Dense>
#include <vector>

#include "fbsde/errors.hpp"

namespace fbsde {

enum class BasisKind { hermite, monomial };
enum class Standardization { none, per_step_affine };

/// Polynomial regression basis of total degree <= `degree` on R^d.
/// hermite uses probabilists' Hermite polynomials He_n; per_step_affine
/// recentres and rescales every coordinate to sample mean 0, variance 1
/// before evaluating the basis.
struct BasisSpec {
  BasisKind kind = BasisKind::hermite;
  int degree = 5;
  Standardization standardization = Standardization::per_step_affine;

  /// Number of basis functions: degree+1 in 1-d, C(degree+dim, dim) above.
  int size(int dim) const;

  bool operator==(const BasisSpec&) const = default;
};

/// All multi-indices alpha with |alpha| <= degree, ordered by total degree
/// then lexicographically. Row i of the result is one alpha.
std::vector<std::vector<int>> total_degree_multi_indices(int dim, int degree);

/// Basis matrix for points `x` under an explicit affine standardization
/// u_j = (x_j - shift_j) / scale_j.
Eigen::MatrixXd build_basis_matrix(const BasisSpec& basis,
                                   const Eigen::VectorXd& shift,
                                   const Eigen::VectorXd& scale,
                                   const Eigen::Ref<const Eigen::MatrixXd>& x);

struct FitDiagnostics {
  double residual_rms = 0.0;
  double condition = 0.0;  // ratio of extreme pivoted-R diagonal entries
  int rank = 0;
  bool ill_conditioned = false;  // condition > 1e12 with no ridge
};

/// One least-squares projection: factor the basis matrix for a sample once,
/// then project any number of target columns through it. Backed by a
/// column-pivoted Householder QR; ridge > 0 augments the system with
/// sqrt(ridge) I rows.
class StepProjector {
 public:
  StepProjector(const BasisSpec& basis, double ridge = 0.0);

  void bind(const Eigen::Ref<const Eigen::MatrixXd>& x);
  bool bound() const { return bound_; }
  int sample_size() const { return rows_; }

  /// Fitted values (projection of each target column) at the bound sample.
  Eigen::MatrixXd project(const Eigen::Ref<const Eigen::MatrixXd>& targets) const;
  Eigen::MatrixXd coefficients(const Eigen::Ref<const Eigen::MatrixXd>& targets) const;
  /// Basis matrix for arbitrary points in the bound standardization.
  Eigen::MatrixXd basis_matrix(const Eigen::Ref<const Eigen::MatrixXd>& x) const;

  const Eigen::VectorXd& shift() const { return shift_; }
  const Eigen::VectorXd& scale() const { return scale_; }
  const BasisSpec& basis() const { return basis_; }
  double condition() const { return condition_; }
  int rank() const { return rank_; }
  bool ill_conditioned() const { return ill_conditioned_; }

 private:
  void check_targets(const Eigen::Ref<const Eigen::MatrixXd>& targets) const;

  BasisSpec basis_;
  double ridge_;
  bool bound_ = false;
  // A point-mass sample (every row identical, e.g. the deterministic X_0
  // step) collapses the fit to the sample mean over the constant basis
  // instead of pushing a rank-deficient matrix through the QR.
  bool point_mass_ = false;
  int rows_ = 0;
  int dim_ = 0;
  Eigen::VectorXd shift_, scale_;
  Eigen::MatrixXd phi_;  // possibly ridge-augmented
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
  double condition_ = 0.0;
  int rank_ = 0;
  bool ill_conditioned_ = false;
};

/// Immutable fitted regression: coefficients plus the standardization they
/// were computed in. eval() on the fitting sample reproduces fitted()
/// bitwise because fitted() is recorded through the same code path.
class RegressionOperator {
 public:
  static RegressionOperator fit(const BasisSpec& basis,
                                const Eigen::Ref<const Eigen::MatrixXd>& x,
                                const Eigen::Ref<const Eigen::MatrixXd>& targets,
                                double ridge = 0.0);

  Eigen::MatrixXd eval(const Eigen::Ref<const Eigen::MatrixXd>& x) const;
  const Eigen::MatrixXd& fitted() const { return fitted_; }
  const Eigen::MatrixXd& coefficients() const { return coeffs_; }
  const FitDiagnostics& diagnostics() const { return diag_; }
  const BasisSpec& basis() const { return basis_; }

 private:
  BasisSpec basis_;
  int dim_ = 0;
  Eigen::VectorXd shift_, scale_;
  Eigen::MatrixXd coeffs_;
  Eigen::MatrixXd fitted_;
  FitDiagnostics diag_;
};

/// fit + fitted in one call: regression estimate of E[targets | x] at the
/// sample points.
Eigen::MatrixXd condexp(const BasisSpec& basis,
                        const Eigen::Ref<const Eigen::MatrixXd>& x,
                        const Eigen::Ref<const Eigen::MatrixXd>& targets,
                        double ridge = 0.0);

}  // namespace fbsde
