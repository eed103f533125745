#include "fbsde/regression.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace fbsde {

int BasisSpec::size(int dim) const {
  if (dim == 1) return degree + 1;
  // C(degree + dim, dim) without overflow for the sizes we meet in practice
  long long n = 1;
  for (int i = 1; i <= dim; ++i) n = n * (degree + i) / i;
  return static_cast<int>(n);
}

std::vector<std::vector<int>> total_degree_multi_indices(int dim, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> alpha(dim, 0);
  // Enumerate by total degree so low-order terms lead, mirroring the 1-d
  // column order.
  for (int total = 0; total <= degree; ++total) {
    std::function<void(int, int)> rec = [&](int pos, int left) {
      if (pos == dim - 1) {
        alpha[pos] = left;
        out.push_back(alpha);
        return;
      }
      for (int v = left; v >= 0; --v) {
        alpha[pos] = v;
        rec(pos + 1, left - v);
      }
    };
    rec(0, total);
  }
  return out;
}

namespace {

// Columns of the 1-d basis evaluated by recurrence on a whole sample.
void one_dim_columns(BasisKind kind, int degree,
                     const Eigen::ArrayXd& u, Eigen::MatrixXd& cols) {
  cols.col(0).setOnes();
  if (degree >= 1) cols.col(1) = u;
  for (int n = 1; n < degree; ++n) {
    if (kind == BasisKind::hermite)
      cols.col(n + 1) =
          u * cols.col(n).array() - static_cast<double>(n) * cols.col(n - 1).array();
    else
      cols.col(n + 1) = u * cols.col(n).array();
  }
}

}  // namespace

StepProjector::StepProjector(const BasisSpec& basis, double ridge)
    : basis_(basis), ridge_(ridge) {
  if (basis.degree < 0) throw ConfigError("basis degree must be >= 0");
  if (ridge < 0.0) throw ConfigError("ridge must be >= 0");
}

void StepProjector::bind(const Eigen::Ref<const Eigen::MatrixXd>& x) {
  rows_ = static_cast<int>(x.rows());
  dim_ = static_cast<int>(x.cols());
  if (rows_ < 1 || dim_ < 1) throw DataError("regression sample is empty");
  if (!x.allFinite()) throw DataError("regression sample has non-finite states");

  point_mass_ = true;
  for (int m = 1; m < rows_ && point_mass_; ++m)
    if ((x.row(m).array() != x.row(0).array()).any()) point_mass_ = false;
  if (point_mass_) {
    // Conditioning on a point mass is exactly the sample mean; fit the
    // constant basis so the diagnostics stay clean.
    shift_ = x.row(0).transpose();
    scale_ = Eigen::VectorXd::Ones(dim_);
    const int aug = ridge_ > 0.0 ? 1 : 0;
    phi_ = Eigen::MatrixXd::Ones(rows_ + aug, 1);
    if (aug > 0) phi_(rows_, 0) = std::sqrt(ridge_);
    qr_.compute(phi_);
    rank_ = 1;
    condition_ = 1.0;
    ill_conditioned_ = false;
    bound_ = true;
    return;
  }

  const int width = basis_.size(dim_);
  if (rows_ < width)
    throw DataError("underdetermined fit: " + std::to_string(rows_) +
                    " rows for " + std::to_string(width) + " basis functions");

  shift_ = Eigen::VectorXd::Zero(dim_);
  scale_ = Eigen::VectorXd::Ones(dim_);
  if (basis_.standardization == Standardization::per_step_affine) {
    shift_ = x.colwise().mean();
    for (int j = 0; j < dim_; ++j) {
      const double var = (x.col(j).array() - shift_[j]).square().mean();
      const double sd = std::sqrt(var);
      scale_[j] = sd > 0.0 ? sd : 1.0;
    }
  }

  const int aug = ridge_ > 0.0 ? width : 0;
  phi_.resize(rows_ + aug, width);
  phi_.topRows(rows_) = basis_matrix(x);
  if (aug > 0)
    phi_.bottomRows(aug) =
        std::sqrt(ridge_) * Eigen::MatrixXd::Identity(width, width);

  qr_.compute(phi_);
  rank_ = static_cast<int>(qr_.rank());
  const auto diag = qr_.matrixR().diagonal().head(std::min<int>(width, rows_ + aug));
  double dmax = 0.0, dmin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < diag.size(); ++i) {
    const double a = std::abs(diag[i]);
    dmax = std::max(dmax, a);
    dmin = std::min(dmin, a);
  }
  condition_ = dmin > 0.0 ? dmax / dmin
                          : std::numeric_limits<double>::infinity();
  ill_conditioned_ = ridge_ == 0.0 && condition_ > 1e12;
  bound_ = true;
}

Eigen::MatrixXd build_basis_matrix(const BasisSpec& basis,
                                   const Eigen::VectorXd& shift,
                                   const Eigen::VectorXd& scale,
                                   const Eigen::Ref<const Eigen::MatrixXd>& x) {
  const int rows = static_cast<int>(x.rows());
  const int dim = static_cast<int>(shift.size());
  const int width = basis.size(dim);
  if (static_cast<int>(x.cols()) != dim)
    throw DataError("basis evaluation: dimension mismatch");

  if (dim == 1) {
    Eigen::MatrixXd cols(rows, width);
    const Eigen::ArrayXd u = (x.col(0).array() - shift[0]) / scale[0];
    one_dim_columns(basis.kind, basis.degree, u, cols);
    return cols;
  }

  // Per-coordinate 1-d tables, then products over each multi-index.
  std::vector<Eigen::MatrixXd> table(dim);
  for (int j = 0; j < dim; ++j) {
    table[j].resize(rows, basis.degree + 1);
    const Eigen::ArrayXd u = (x.col(j).array() - shift[j]) / scale[j];
    one_dim_columns(basis.kind, basis.degree, u, table[j]);
  }
  const auto alphas = total_degree_multi_indices(dim, basis.degree);
  Eigen::MatrixXd out(rows, width);
  for (std::size_t a = 0; a < alphas.size(); ++a) {
    Eigen::ArrayXd prod = table[0].col(alphas[a][0]);
    for (int j = 1; j < dim; ++j) prod *= table[j].col(alphas[a][j]).array();
    out.col(static_cast<int>(a)) = prod;
  }
  return out;
}

Eigen::MatrixXd StepProjector::basis_matrix(
    const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  return build_basis_matrix(basis_, shift_, scale_, x);
}

void StepProjector::check_targets(
    const Eigen::Ref<const Eigen::MatrixXd>& targets) const {
  if (!bound_) throw DataError("projector used before bind()");
  if (static_cast<int>(targets.rows()) != rows_)
    throw DataError("targets row count does not match the bound sample");
  if (!targets.allFinite())
    throw DataError("regression targets contain non-finite values");
}

Eigen::MatrixXd StepProjector::coefficients(
    const Eigen::Ref<const Eigen::MatrixXd>& targets) const {
  check_targets(targets);
  Eigen::MatrixXd solved;
  if (ridge_ > 0.0) {
    Eigen::MatrixXd aug =
        Eigen::MatrixXd::Zero(phi_.rows(), targets.cols());
    aug.topRows(rows_) = targets;
    solved = qr_.solve(aug);
  } else {
    solved = qr_.solve(targets);
  }
  if (point_mass_) {
    // Pad the mean row out to the full basis width so eval() through the
    // ordinary basis matrix stays consistent (the extra coefficients are 0).
    Eigen::MatrixXd full =
        Eigen::MatrixXd::Zero(basis_.size(dim_), targets.cols());
    full.row(0) = solved.row(0);
    return full;
  }
  return solved;
}

Eigen::MatrixXd StepProjector::project(
    const Eigen::Ref<const Eigen::MatrixXd>& targets) const {
  if (point_mass_) {
    const Eigen::MatrixXd coeffs = coefficients(targets);
    return phi_.topRows(rows_) * coeffs.row(0);
  }
  return phi_.topRows(rows_) * coefficients(targets);
}

RegressionOperator RegressionOperator::fit(
    const BasisSpec& basis, const Eigen::Ref<const Eigen::MatrixXd>& x,
    const Eigen::Ref<const Eigen::MatrixXd>& targets, double ridge) {
  StepProjector proj(basis, ridge);
  proj.bind(x);

  RegressionOperator op;
  op.basis_ = basis;
  op.dim_ = static_cast<int>(x.cols());
  op.shift_ = proj.shift();
  op.scale_ = proj.scale();
  op.coeffs_ = proj.coefficients(targets);
  // Record fitted values through eval() itself so eval-on-sample is the
  // identical computation, bit for bit.
  op.fitted_ = op.eval(x);
  op.diag_.condition = proj.condition();
  op.diag_.rank = proj.rank();
  op.diag_.ill_conditioned = proj.ill_conditioned();
  op.diag_.residual_rms =
      std::sqrt((targets - op.fitted_).squaredNorm() / targets.size());
  return op;
}

Eigen::MatrixXd RegressionOperator::eval(
    const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  if (static_cast<int>(x.cols()) != dim_)
    throw DataError("eval: dimension mismatch");
  return build_basis_matrix(basis_, shift_, scale_, x) * coeffs_;
}

Eigen::MatrixXd condexp(const BasisSpec& basis,
                        const Eigen::Ref<const Eigen::MatrixXd>& x,
                        const Eigen::Ref<const Eigen::MatrixXd>& targets,
                        double ridge) {
  return RegressionOperator::fit(basis, x, targets, ridge).fitted();
}

}  // namespace fbsde
