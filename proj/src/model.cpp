#include "iccgee/model.hpp"

#include "iccgee/errors.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace iccgee {

ClusterData::ClusterData(std::string id, int a, Eigen::VectorXd z, Eigen::MatrixXd x,
                         std::vector<std::optional<int>> y)
    : id_(std::move(id)), a_(a), z_(std::move(z)), x_(std::move(x)), y_(std::move(y)) {
  const long n = static_cast<long>(y_.size());
  if (n < 1) throw ShapeError("cluster " + id_ + ": needs at least one subject");
  if (a_ != 0 && a_ != 1) throw DomainError("cluster " + id_ + ": treatment must be 0 or 1");
  if (x_.rows() != n) {
    if (x_.size() == 0) {
      x_.resize(n, 0);
    } else {
      throw ShapeError("cluster " + id_ + ": x has " + std::to_string(x_.rows()) +
                       " rows for " + std::to_string(n) + " subjects");
    }
  }
  y_filled_ = Eigen::VectorXd::Zero(n);
  r_ = Eigen::VectorXd::Zero(n);
  for (long j = 0; j < n; ++j) {
    const auto& v = y_[static_cast<std::size_t>(j)];
    if (!v) continue;
    if (*v != 0 && *v != 1) throw DomainError("cluster " + id_ + ": outcome must be 0 or 1");
    y_filled_[j] = *v;
    r_[j] = 1.0;
    observed_.push_back(static_cast<int>(j));
  }
}

ClusterData ClusterData::masked(std::string id, int a, Eigen::VectorXd z, Eigen::MatrixXd x,
                                const std::vector<int>& y_full, const std::vector<int>& r) {
  if (y_full.size() != r.size()) throw ShapeError("masked: y and r lengths differ");
  std::vector<std::optional<int>> y(y_full.size());
  for (std::size_t j = 0; j < y_full.size(); ++j) {
    if (r[j]) y[j] = y_full[j];
  }
  return ClusterData(std::move(id), a, std::move(z), std::move(x), std::move(y));
}

Dataset::Dataset(std::vector<ClusterData> clusters, std::optional<double> p_a)
    : clusters_(std::move(clusters)) {
  if (!clusters_.empty()) {
    q_ = clusters_.front().z().size();
    m_ = clusters_.front().x().cols();
    for (const auto& c : clusters_) {
      if (c.z().size() != q_ || c.x().cols() != m_) {
        throw ShapeError("cluster " + c.id() + ": covariate dimensions differ from the first cluster");
      }
    }
  }
  set_p_a(p_a);
}

long Dataset::subjects() const {
  long s = 0;
  for (const auto& c : clusters_) s += c.n();
  return s;
}

double Dataset::p_a() const {
  if (p_a_) return *p_a_;
  if (clusters_.empty()) return 0.5;
  double treated = 0;
  for (const auto& c : clusters_) treated += c.a();
  return treated / static_cast<double>(clusters_.size());
}

void Dataset::set_p_a(std::optional<double> p_a) {
  if (p_a && !(*p_a >= 0.0 && *p_a <= 1.0)) throw DomainError("p_a must lie in [0, 1]");
  p_a_ = p_a;
}

void Dataset::require_both_arms() const {
  bool arm[2] = {false, false};
  for (const auto& c : clusters_) arm[c.a()] = true;
  if (!arm[0] || !arm[1]) throw SeparationError("dataset needs clusters in both treatment arms");
}

// ---------------------------------------------------------------------------

const char* target_name(Target t) {
  switch (t) {
    case Target::tm: return "TM";
    case Target::psm: return "PSM";
    case Target::om: return "OM";
  }
  return "?";
}

namespace {
std::vector<int> iota_vec(long k) {
  std::vector<int> v(static_cast<std::size_t>(k));
  std::iota(v.begin(), v.end(), 0);
  return v;
}
}  // namespace

ModelSpec ModelSpec::canonical_tm() { return ModelSpec{}; }

ModelSpec ModelSpec::full(Target target, long q, long m) {
  ModelSpec s;
  s.target = target;
  s.mean_z = iota_vec(q);
  s.mean_x = iota_vec(m);
  s.mean_z_int = iota_vec(q);
  s.mean_x_int = iota_vec(m);
  s.corr_z = iota_vec(q);
  s.corr_z_int = iota_vec(q);
  return s;
}

ModelSpec ModelSpec::main_effects(Target target, long q, long m) {
  ModelSpec s = full(target, q, m);
  s.mean_z_int.clear();
  s.mean_x_int.clear();
  s.corr_z_int.clear();
  return s;
}

long ModelSpec::mean_dim() const {
  return 1 + (mean_treatment ? 1 : 0) + static_cast<long>(mean_z.size() + mean_x.size() +
                                                          mean_z_int.size() + mean_x_int.size());
}

long ModelSpec::corr_dim() const {
  if (!second_order) return 0;
  return 1 + (corr_treatment ? 1 : 0) + static_cast<long>(corr_z.size() + corr_z_int.size());
}

bool ModelSpec::canonical() const {
  return mean_treatment && corr_treatment && second_order && mean_z.empty() && mean_x.empty() &&
         mean_z_int.empty() && mean_x_int.empty() && corr_z.empty() && corr_z_int.empty();
}

void ModelSpec::validate(long q, long m) const {
  auto check = [](const std::vector<int>& cols, long limit, const char* what) {
    for (int c : cols) {
      if (c < 0 || c >= limit) {
        throw ConfigError(std::string("model column ") + what + std::to_string(c + 1) +
                          " does not exist");
      }
    }
  };
  check(mean_z, q, "z");
  check(mean_z_int, q, "z");
  check(corr_z, q, "z");
  check(corr_z_int, q, "z");
  check(mean_x, m, "x");
  check(mean_x_int, m, "x");
  if (target == Target::tm && !canonical()) {
    throw ConfigError("the treatment model must be intercept + treatment only");
  }
}

std::vector<std::string> ModelSpec::mean_names() const {
  std::vector<std::string> names{"(Intercept)"};
  if (mean_treatment) names.push_back("A");
  for (int c : mean_z) names.push_back("z" + std::to_string(c + 1));
  for (int c : mean_x) names.push_back("x" + std::to_string(c + 1));
  for (int c : mean_z_int) names.push_back("A:z" + std::to_string(c + 1));
  for (int c : mean_x_int) names.push_back("A:x" + std::to_string(c + 1));
  return names;
}

std::vector<std::string> ModelSpec::corr_names() const {
  if (!second_order) return {};
  std::vector<std::string> names{"(Intercept)"};
  if (corr_treatment) names.push_back("A");
  for (int c : corr_z) names.push_back("z" + std::to_string(c + 1));
  for (int c : corr_z_int) names.push_back("A:z" + std::to_string(c + 1));
  return names;
}

ParameterVector ParameterVector::zeros(const ModelSpec& spec) {
  return {Eigen::VectorXd::Zero(spec.mean_dim()), Eigen::VectorXd::Zero(spec.corr_dim())};
}

ParameterVector ParameterVector::from_stacked(const ModelSpec& spec, const Eigen::VectorXd& v) {
  const long p = spec.mean_dim();
  const long q = spec.corr_dim();
  if (v.size() != p + q) throw ShapeError("parameter vector has the wrong length");
  return {v.head(p), v.tail(q)};
}

Eigen::VectorXd ParameterVector::stacked() const {
  Eigen::VectorXd v(beta.size() + alpha.size());
  v << beta, alpha;
  return v;
}

bool ParameterVector::finite() const { return beta.allFinite() && alpha.allFinite(); }

// ---------------------------------------------------------------------------

Design build_design(const ModelSpec& spec, const ClusterData& cluster, std::optional<int> a_override) {
  const double a = a_override ? *a_override : cluster.a();
  const long n = cluster.n();
  const auto& z = cluster.z();
  const auto& x = cluster.x();
  Design d;
  d.mean.resize(n, spec.mean_dim());
  long col = 0;
  d.mean.col(col++).setOnes();
  if (spec.mean_treatment) d.mean.col(col++).setConstant(a);
  for (int c : spec.mean_z) d.mean.col(col++).setConstant(z[c]);
  for (int c : spec.mean_x) d.mean.col(col++) = x.col(c);
  for (int c : spec.mean_z_int) d.mean.col(col++).setConstant(a * z[c]);
  for (int c : spec.mean_x_int) d.mean.col(col++) = a * x.col(c);

  d.corr.resize(spec.corr_dim());
  if (spec.second_order) {
    long k = 0;
    d.corr[k++] = 1.0;
    if (spec.corr_treatment) d.corr[k++] = a;
    for (int c : spec.corr_z) d.corr[k++] = z[c];
    for (int c : spec.corr_z_int) d.corr[k++] = a * z[c];
  }
  return d;
}

ClusterMoments evaluate_moments(const Design& design, const ParameterVector& theta,
                                const std::string& cluster_id) {
  if (design.mean.cols() != theta.beta.size() || design.corr.size() != theta.alpha.size()) {
    throw ShapeError("cluster " + cluster_id + ": parameter and design dimensions differ");
  }
  ClusterMoments out;
  const Eigen::VectorXd eta = design.mean * theta.beta;
  const long n = eta.size();
  out.mu.resize(n);
  out.u.resize(n);
  for (long j = 0; j < n; ++j) {
    if (!std::isfinite(eta[j])) {
      throw OverflowError("cluster " + cluster_id + ": non-finite mean linear predictor");
    }
    const double mu = expit(eta[j]);
    const double u = mu * (1.0 - mu);
    if (!(u > 0.0)) {
      throw OverflowError("cluster " + cluster_id + ": mean linear predictor saturated");
    }
    out.mu[j] = mu;
    out.u[j] = u;
  }
  out.sqrt_u = out.u.cwiseSqrt();
  if (theta.alpha.size() > 0) {
    const double lp = design.corr.dot(theta.alpha);
    if (!std::isfinite(lp)) {
      throw OverflowError("cluster " + cluster_id + ": non-finite correlation linear predictor");
    }
    out.rho = inv_fisher_z(lp);
    if (!(std::fabs(out.rho) < 1.0)) {
      throw OverflowError("cluster " + cluster_id + ": correlation linear predictor saturated");
    }
    out.drho = 1.0 - out.rho * out.rho;
  }
  return out;
}

Eigen::VectorXd predict_mean(const ModelSpec& spec, const ParameterVector& theta,
                             const ClusterData& cluster) {
  return evaluate_moments(build_design(spec, cluster), theta, cluster.id()).mu;
}

double predict_corr(const ModelSpec& spec, const ParameterVector& theta, const ClusterData& cluster) {
  return evaluate_moments(build_design(spec, cluster), theta, cluster.id()).rho;
}

PairResiduals standardized_residuals(const std::vector<std::optional<int>>& y, double pi_star,
                                     const PairIndex& pairs) {
  if (!(pi_star > 0.0 && pi_star < 1.0)) throw DomainError("standardized_residuals: pi* outside (0, 1)");
  if (pairs.n() != static_cast<long>(y.size())) throw ShapeError("standardized_residuals: pair index size");
  const double scale = pi_star * (1.0 - pi_star);
  PairResiduals out;
  out.values = Eigen::VectorXd::Zero(pairs.size());
  out.usable.assign(static_cast<std::size_t>(pairs.size()), 0);
  for (long p = 0; p < pairs.size(); ++p) {
    const auto& yj = y[static_cast<std::size_t>(pairs[p].first)];
    const auto& yk = y[static_cast<std::size_t>(pairs[p].second)];
    if (!yj || !yk) continue;
    out.values[p] = (*yj - pi_star) * (*yk - pi_star) / scale;
    out.usable[static_cast<std::size_t>(p)] = 1;
  }
  return out;
}

double rho_dagger(double pi_j, double pi_k, double rho, double pi_star) {
  auto inside = [](double p) { return p > 0.0 && p < 1.0; };
  if (!inside(pi_j) || !inside(pi_k) || !inside(pi_star)) {
    throw DomainError("rho_dagger: probabilities must lie in (0, 1)");
  }
  if (!(std::fabs(rho) < 1.0)) throw DomainError("rho_dagger: |rho| must be < 1");
  const double v = pi_j * (1.0 - pi_j) * pi_k * (1.0 - pi_k);
  return ((pi_j - pi_star) * (pi_k - pi_star) + rho * std::sqrt(v)) / (pi_star * (1.0 - pi_star));
}

Jacobian jacobian(const ModelSpec& spec, const ParameterVector& theta, const ClusterData& cluster) {
  const Design d = build_design(spec, cluster);
  const ClusterMoments mom = evaluate_moments(d, theta, cluster.id());
  Jacobian jac;
  jac.beta = mom.u.asDiagonal() * d.mean;
  const long pairs = spec.second_order ? pair_count(cluster.n()) : 0;
  jac.alpha.resize(pairs, spec.corr_dim());
  for (long p = 0; p < pairs; ++p) jac.alpha.row(p) = mom.drho * d.corr.transpose();
  return jac;
}

// ---------------------------------------------------------------------------

WorkingCovariance::WorkingCovariance(const Eigen::VectorXd& u, double icc)
    : u_(u), icc_(icc),
      upper_(invert_equicorrelated(EquicorrelatedCovariance(u.size(), icc, u))) {}

Eigen::VectorXd WorkingCovariance::solve(const Eigen::VectorXd& v) const {
  const long n = this->n();
  if (v.size() != n + pair_dim()) throw ShapeError("WorkingCovariance::solve: length mismatch");
  Eigen::VectorXd out(v.size());
  out.head(n) = upper_.apply(v.head(n));
  out.tail(pair_dim()) = v.tail(pair_dim());
  return out;
}

Eigen::MatrixXd WorkingCovariance::dense() const {
  const long n = this->n();
  const long total = n + pair_dim();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(total, total);
  v.topLeftCorner(n, n) = EquicorrelatedCovariance(n, icc_, u_).dense();
  return v;
}

WorkingCovariance working_covariance(const Eigen::VectorXd& u, double icc) {
  return WorkingCovariance(u, icc);
}

}  // namespace iccgee
