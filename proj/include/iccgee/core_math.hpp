#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <utility>
#include <vector>

namespace iccgee {

// ---------------------------------------------------------------------------
// Links. Domain violations throw DomainError; nothing here returns NaN.

double expit(double x);
double logit(double p);
double fisher_z(double r);       // atanh, rejects |r| >= 1 - 1e-12
double inv_fisher_z(double z);   // tanh

// ---------------------------------------------------------------------------
// Equicorrelated covariance V = U^{1/2} C U^{1/2}, C = (1 - rho) I + rho J.

class EquicorrelatedCovariance {
 public:
  EquicorrelatedCovariance(long n, double rho, Eigen::VectorXd u);
  // Unit diagonal variances.
  EquicorrelatedCovariance(long n, double rho);

  long n() const { return n_; }
  double rho() const { return rho_; }
  const Eigen::VectorXd& u() const { return u_; }

  Eigen::MatrixXd dense() const;

 private:
  long n_;
  double rho_;
  Eigen::VectorXd u_;
};

// C^{-1} = a I + b J. Throws SingularityError outside (-1/(n-1), 1).
struct EquicorrelationInverseCoefficients {
  double a = 1.0;
  double b = 0.0;
};
EquicorrelationInverseCoefficients equicorrelation_inverse(long n, double rho);

// Implicit V^{-1} = U^{-1/2} (a I + b J) U^{-1/2}; never stores an n x n matrix.
class EquicorrelatedInverse {
 public:
  EquicorrelatedInverse(EquicorrelationInverseCoefficients coef, Eigen::VectorXd inv_sqrt_u)
      : coef_(coef), inv_sqrt_u_(std::move(inv_sqrt_u)) {}

  double a() const { return coef_.a; }
  double b() const { return coef_.b; }
  const Eigen::VectorXd& inv_sqrt_u() const { return inv_sqrt_u_; }
  long n() const { return inv_sqrt_u_.size(); }

  // V^{-1} X in O(n * cols).
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd dense() const;

 private:
  EquicorrelationInverseCoefficients coef_;
  Eigen::VectorXd inv_sqrt_u_;
};

EquicorrelatedInverse invert_equicorrelated(const EquicorrelatedCovariance& cov);

// ---------------------------------------------------------------------------
// Diagonal weight matrices with an explicit support.

class DiagonalWeight {
 public:
  DiagonalWeight() = default;
  explicit DiagonalWeight(Eigen::VectorXd entries);

  long size() const { return entries_.size(); }
  const Eigen::VectorXd& entries() const { return entries_; }
  // Indices of strictly positive entries, ascending.
  const std::vector<long>& support() const { return support_; }
  double operator[](long i) const { return entries_[i]; }

 private:
  Eigen::VectorXd entries_;
  std::vector<long> support_;
};

// M (Lambda N) computed as col_lambda(M) (lambda' o row_lambda(N)); work is
// proportional to |support| rather than to the inner dimension.
Eigen::MatrixXd sparse_weighted_product(const Eigen::MatrixXd& m, const DiagonalWeight& lambda,
                                        const Eigen::MatrixXd& n);

// ---------------------------------------------------------------------------
// Pairs (j, k), j < k, in lexicographic order. Zero-based.

struct Pair {
  int first = 0;
  int second = 0;
  friend bool operator==(const Pair&, const Pair&) = default;
};

constexpr long pair_count(long n) { return n < 2 ? 0 : n * (n - 1) / 2; }

// Position of (j, k), j < k, in the lexicographic enumeration for size n.
constexpr long pair_position(long n, long j, long k) {
  return j * (2 * n - j - 1) / 2 + (k - j - 1);
}

class PairIndex {
 public:
  explicit PairIndex(long n);

  long n() const { return n_; }
  long size() const { return static_cast<long>(pairs_.size()); }
  const Pair& operator[](long i) const { return pairs_[static_cast<std::size_t>(i)]; }
  long position(long j, long k) const { return pair_position(n_, j, k); }
  auto begin() const { return pairs_.begin(); }
  auto end() const { return pairs_.end(); }

 private:
  long n_;
  std::vector<Pair> pairs_;
};

PairIndex pair_enumerate(long n);

}  // namespace iccgee
