#include "iccgee/core_math.hpp"

#include "iccgee/errors.hpp"

#include <cmath>
#include <sstream>

namespace iccgee {

namespace {
constexpr double kFisherEdge = 1.0 - 1e-12;
constexpr double kPdMargin = 1e-12;
}  // namespace

double expit(double x) {
  if (std::isnan(x)) throw DomainError("expit: NaN argument");
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError("logit: argument outside (0, 1): " + std::to_string(p));
  }
  return std::log(p / (1.0 - p));
}

double fisher_z(double r) {
  if (!(std::fabs(r) < kFisherEdge)) {
    throw DomainError("fisher_z: |r| must be < 1 - 1e-12, got " + std::to_string(r));
  }
  return std::atanh(r);
}

double inv_fisher_z(double z) {
  if (std::isnan(z)) throw DomainError("inv_fisher_z: NaN argument");
  return std::tanh(z);
}

// ---------------------------------------------------------------------------

EquicorrelatedCovariance::EquicorrelatedCovariance(long n, double rho, Eigen::VectorXd u)
    : n_(n), rho_(rho), u_(std::move(u)) {
  if (n_ < 1) throw ShapeError("equicorrelated covariance needs n >= 1");
  if (u_.size() != n_) throw ShapeError("equicorrelated covariance: u has wrong length");
  for (long j = 0; j < n_; ++j) {
    if (!(u_[j] > 0.0) || !std::isfinite(u_[j])) {
      throw DomainError("equicorrelated covariance: variances must be positive and finite");
    }
  }
  if (!std::isfinite(rho_)) throw DomainError("equicorrelated covariance: rho is not finite");
  // validates the positive-definite range
  (void)equicorrelation_inverse(n_, rho_);
}

EquicorrelatedCovariance::EquicorrelatedCovariance(long n, double rho)
    : EquicorrelatedCovariance(n, rho, Eigen::VectorXd::Ones(n)) {}

Eigen::MatrixXd EquicorrelatedCovariance::dense() const {
  Eigen::MatrixXd c = Eigen::MatrixXd::Constant(n_, n_, rho_);
  c.diagonal().setOnes();
  const Eigen::VectorXd s = u_.cwiseSqrt();
  return s.asDiagonal() * c * s.asDiagonal();
}

EquicorrelationInverseCoefficients equicorrelation_inverse(long n, double rho) {
  if (n < 1) throw ShapeError("equicorrelation_inverse: n must be >= 1");
  if (n == 1) return {1.0, 0.0};
  const double one_minus = 1.0 - rho;
  const double spread = 1.0 + static_cast<double>(n - 1) * rho;
  if (!(one_minus > kPdMargin) || !(spread > kPdMargin)) throw SingularityError(rho, n);
  return {1.0 / one_minus, -rho / (one_minus * spread)};
}

Eigen::MatrixXd EquicorrelatedInverse::apply(const Eigen::MatrixXd& x) const {
  if (x.rows() != n()) throw ShapeError("EquicorrelatedInverse::apply: row mismatch");
  Eigen::MatrixXd scaled = inv_sqrt_u_.asDiagonal() * x;
  const Eigen::RowVectorXd col_sums = scaled.colwise().sum();
  Eigen::MatrixXd out = coef_.a * scaled;
  out.rowwise() += coef_.b * col_sums;
  return inv_sqrt_u_.asDiagonal() * out;
}

Eigen::MatrixXd EquicorrelatedInverse::dense() const {
  return apply(Eigen::MatrixXd::Identity(n(), n()));
}

EquicorrelatedInverse invert_equicorrelated(const EquicorrelatedCovariance& cov) {
  return EquicorrelatedInverse(equicorrelation_inverse(cov.n(), cov.rho()),
                               cov.u().cwiseSqrt().cwiseInverse());
}

// ---------------------------------------------------------------------------

DiagonalWeight::DiagonalWeight(Eigen::VectorXd entries) : entries_(std::move(entries)) {
  for (long i = 0; i < entries_.size(); ++i) {
    const double w = entries_[i];
    if (!std::isfinite(w)) throw DomainError("DiagonalWeight: non-finite entry");
    if (w < 0.0) throw DomainError("DiagonalWeight: negative entry");
    if (w > 0.0) support_.push_back(i);
  }
}

Eigen::MatrixXd sparse_weighted_product(const Eigen::MatrixXd& m, const DiagonalWeight& lambda,
                                        const Eigen::MatrixXd& n) {
  if (m.cols() != lambda.size() || n.rows() != lambda.size()) {
    std::ostringstream os;
    os << "sparse_weighted_product: shapes " << m.rows() << "x" << m.cols() << ", diag("
       << lambda.size() << "), " << n.rows() << "x" << n.cols() << " do not conform";
    throw ShapeError(os.str());
  }
  const auto& support = lambda.support();
  const long nnz = static_cast<long>(support.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m.rows(), n.cols());
  if (nnz == 0) return out;
  Eigen::MatrixXd m_cols(m.rows(), nnz);
  Eigen::MatrixXd n_rows(nnz, n.cols());
  for (long k = 0; k < nnz; ++k) {
    const long idx = support[static_cast<std::size_t>(k)];
    m_cols.col(k) = m.col(idx);
    n_rows.row(k) = lambda[idx] * n.row(idx);
  }
  out.noalias() = m_cols * n_rows;
  return out;
}

// ---------------------------------------------------------------------------

PairIndex::PairIndex(long n) : n_(n) {
  if (n < 1) throw ShapeError("pair_enumerate: n must be >= 1");
  pairs_.reserve(static_cast<std::size_t>(pair_count(n)));
  for (int j = 0; j < n; ++j) {
    for (int k = j + 1; k < n; ++k) pairs_.push_back({j, k});
  }
}

PairIndex pair_enumerate(long n) { return PairIndex(n); }

}  // namespace iccgee
