#pragma once

#include "iccgee/core_math.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace iccgee {

// One cluster: treatment, cluster covariates z (q), subject covariates x
// (n x m) and outcomes that may be missing. R is derived from presence of y.
class ClusterData {
 public:
  ClusterData(std::string id, int a, Eigen::VectorXd z, Eigen::MatrixXd x,
              std::vector<std::optional<int>> y);

  // Build from a fully generated outcome vector and a missingness pattern.
  static ClusterData masked(std::string id, int a, Eigen::VectorXd z, Eigen::MatrixXd x,
                            const std::vector<int>& y_full, const std::vector<int>& r);

  const std::string& id() const { return id_; }
  int a() const { return a_; }
  const Eigen::VectorXd& z() const { return z_; }
  const Eigen::MatrixXd& x() const { return x_; }
  long n() const { return static_cast<long>(y_.size()); }
  long m() const { return static_cast<long>(observed_.size()); }

  std::optional<int> y(long j) const { return y_[static_cast<std::size_t>(j)]; }
  bool observed(long j) const { return r_[j] > 0.5; }
  // Outcomes with missing entries set to 0; only read where r = 1.
  const Eigen::VectorXd& y_filled() const { return y_filled_; }
  const Eigen::VectorXd& r() const { return r_; }
  const std::vector<int>& observed_indices() const { return observed_; }
  const std::vector<std::optional<int>>& outcomes() const { return y_; }

 private:
  std::string id_;
  int a_;
  Eigen::VectorXd z_;
  Eigen::MatrixXd x_;
  std::vector<std::optional<int>> y_;
  Eigen::VectorXd y_filled_;
  Eigen::VectorXd r_;
  std::vector<int> observed_;
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<ClusterData> clusters, std::optional<double> p_a = std::nullopt);

  const std::vector<ClusterData>& clusters() const { return clusters_; }
  const ClusterData& operator[](long i) const { return clusters_[static_cast<std::size_t>(i)]; }
  long size() const { return static_cast<long>(clusters_.size()); }
  long q() const { return q_; }
  long m() const { return m_; }
  long subjects() const;

  // Known randomization probability if set, otherwise the treated fraction.
  double p_a() const;
  std::optional<double> p_a_override() const { return p_a_; }
  void set_p_a(std::optional<double> p_a);

  // Throws SeparationError when either arm has no clusters.
  void require_both_arms() const;

 private:
  std::vector<ClusterData> clusters_;
  std::optional<double> p_a_;
  long q_ = 0;
  long m_ = 0;
};

enum class Target { tm, psm, om };
const char* target_name(Target t);

// Column selections are zero-based indices into z (cluster level) and x
// (subject level). Mean row layout:
//   [1, A?, z[mean_z], x[mean_x], A*z[mean_z_int], A*x[mean_x_int]]
// Correlation row layout:
//   [1, A?, z[corr_z], A*z[corr_z_int]]
struct ModelSpec {
  Target target = Target::tm;
  bool mean_treatment = true;
  bool corr_treatment = true;
  std::vector<int> mean_z, mean_x, mean_z_int, mean_x_int;
  std::vector<int> corr_z, corr_z_int;
  // false: GEE1 only, working independence, empty alpha block
  bool second_order = true;

  static ModelSpec canonical_tm();
  // All covariates with all treatment interactions (the generating structure).
  static ModelSpec full(Target target, long q, long m);
  // Same covariates, no treatment interactions.
  static ModelSpec main_effects(Target target, long q, long m);

  long mean_dim() const;
  long corr_dim() const;
  bool canonical() const;
  void validate(long q, long m) const;
  std::vector<std::string> mean_names() const;
  std::vector<std::string> corr_names() const;
};

struct ParameterVector {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;

  static ParameterVector zeros(const ModelSpec& spec);
  static ParameterVector from_stacked(const ModelSpec& spec, const Eigen::VectorXd& v);
  Eigen::VectorXd stacked() const;
  long size() const { return beta.size() + alpha.size(); }
  bool finite() const;
};

// Design rows for one cluster; a_override evaluates at a counterfactual arm.
struct Design {
  Eigen::MatrixXd mean;   // n x mean_dim
  Eigen::VectorXd corr;   // corr_dim
};
Design build_design(const ModelSpec& spec, const ClusterData& cluster,
                    std::optional<int> a_override = std::nullopt);

// Fitted moments of one cluster under a model.
struct ClusterMoments {
  Eigen::VectorXd mu;
  Eigen::VectorXd u;        // mu (1 - mu)
  Eigen::VectorXd sqrt_u;
  double rho = 0.0;
  double drho = 0.0;        // 1 - rho^2 (0 when the alpha block is empty)
};
ClusterMoments evaluate_moments(const Design& design, const ParameterVector& theta,
                                const std::string& cluster_id);

Eigen::VectorXd predict_mean(const ModelSpec& spec, const ParameterVector& theta,
                             const ClusterData& cluster);
double predict_corr(const ModelSpec& spec, const ParameterVector& theta,
                    const ClusterData& cluster);

struct PairResiduals {
  Eigen::VectorXd values;        // length n(n-1)/2, lexicographic
  std::vector<unsigned char> usable;
};
PairResiduals standardized_residuals(const std::vector<std::optional<int>>& y, double pi_star,
                                     const PairIndex& pairs);

double rho_dagger(double pi_j, double pi_k, double rho, double pi_star);

struct Jacobian {
  Eigen::MatrixXd beta;    // n x mean_dim, rows u_j x_j
  Eigen::MatrixXd alpha;   // n(n-1)/2 x corr_dim, rows (1 - rho^2) c
};
Jacobian jacobian(const ModelSpec& spec, const ParameterVector& theta, const ClusterData& cluster);

// Block working covariance: equicorrelated Bernoulli block for the means,
// identity for the pairwise block, zero cross blocks.
class WorkingCovariance {
 public:
  WorkingCovariance(const Eigen::VectorXd& u, double icc);

  long n() const { return upper_.n(); }
  long pair_dim() const { return pair_count(n()); }
  const EquicorrelatedInverse& mean_block_inverse() const { return upper_; }

  // V^{-1} v for v of length n + n(n-1)/2.
  Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd dense() const;

 private:
  Eigen::VectorXd u_;
  double icc_;
  EquicorrelatedInverse upper_;
};

WorkingCovariance working_covariance(const Eigen::VectorXd& u, double icc);

}  // namespace iccgee
