#pragma once

// Per-cluster accumulation kernels shared by the deterministic, stochastic
// and benchmark code paths. Weights and residuals are callables so that the
// same loops serve IPW, DR and subsampled variants.

#include "iccgee/core_math.hpp"

#include <Eigen/Dense>

#include <vector>

namespace iccgee::detail {

// GEE1 portion with V = U^{1/2} C U^{1/2}, C equicorrelated over all n
// subjects, D rows u_j x_j. Adds D'V^{-1}WE to g and D'V^{-1}WD to h where W
// is supported on `members`. t = sum over all subjects of sqrt(u_j) x_j.
//   D'V^{-1}WE = a sum_S w x e + b t sum_S w e / sqrt(u)
//   D'V^{-1}WD = a sum_S w u x x' + b t (sum_S w sqrt(u) x)'
template <class Row, class SqrtU, class Weight, class Resid>
void gee1_equicorrelated(long n, double rho_work, const Eigen::VectorXd& t,
                         const std::vector<int>& members, Row row, SqrtU sqrt_u, Weight weight,
                         Resid resid, Eigen::VectorXd& g, Eigen::MatrixXd* h) {
  const auto coef = equicorrelation_inverse(n, rho_work);
  const long p = t.size();
  Eigen::VectorXd gx = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd hx = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd hxx;
  if (h) hxx = Eigen::MatrixXd::Zero(p, p);
  double ge = 0.0;
  for (int j : members) {
    const double w = weight(j);
    if (w == 0.0) continue;
    const double su = sqrt_u(j);
    const double e = resid(j);
    const auto xj = row(j);
    gx.noalias() += (w * e) * xj;
    ge += w * e / su;
    if (h) {
      // explicit loops: the scaled outer product would allocate per subject
      const double wu = w * su * su;
      for (long r = 0; r < p; ++r) {
        const double xr = wu * xj[r];
        for (long k = 0; k < p; ++k) hxx(r, k) += xr * xj[k];
      }
      hx.noalias() += (w * su) * xj;
    }
  }
  g.noalias() += coef.a * gx + (coef.b * ge) * t;
  if (h) h->noalias() += coef.a * hxx + coef.b * t * hx.transpose();
}

// GEE2 portion with identity working covariance; the correlation is
// constant within the cluster so D_alpha rows are all drho * c.
template <class PairWeight, class PairResid>
void gee2_identity(const Eigen::VectorXd& c, double drho, const std::vector<int>& members,
                   double factor, PairWeight pair_weight, PairResid pair_resid,
                   Eigen::VectorXd& g, Eigen::MatrixXd* h) {
  const std::size_t k = members.size();
  if (k < 2) return;
  double s1 = 0.0;
  double s0 = 0.0;
  for (std::size_t a = 0; a + 1 < k; ++a) {
    const int j = members[a];
    for (std::size_t b = a + 1; b < k; ++b) {
      const int l = members[b];
      const double w = pair_weight(j, l);
      if (w == 0.0) continue;
      s1 += w * pair_resid(j, l);
      s0 += w;
    }
  }
  g.noalias() += (factor * drho * s1) * c;
  if (h) h->noalias() += (factor * drho * drho * s0) * c * c.transpose();
}

}  // namespace iccgee::detail
