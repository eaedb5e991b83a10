#pragma once

#include "iccgee/core_math.hpp"
#include "iccgee/model.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace iccgee {

struct Controls {
  double tol = 1e-8;
  int max_iter = 50;
  double condition_threshold = 1e12;
  int max_halvings = 5;
  double positivity_floor = 1e-3;
  bool keep_trace = false;
};

// Gradient and negative Hessian (expected information) of the two portions.
struct BlockScore {
  Eigen::VectorXd g_beta;
  Eigen::MatrixXd h_beta;
  Eigen::VectorXd g_alpha;
  Eigen::MatrixXd h_alpha;

  static BlockScore zeros(long p, long q);
  BlockScore& operator+=(const BlockScore& o);
  bool finite() const;
};

struct FitResult {
  ModelSpec spec;
  ParameterVector theta;
  Eigen::MatrixXd sandwich;   // filled by the inference module
  bool converged = false;
  int iterations = 0;
  double max_update = 0.0;
  double condition = 0.0;     // worst Hessian condition number seen
  double seconds = 0.0;
  std::vector<Eigen::VectorXd> trace;  // stacked theta after each iteration
};

// Newton direction H^{-1} G per block. Throws DivergenceError when either
// Hessian is ill-conditioned or the direction is not finite.
struct Direction {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  double condition = 0.0;
};
Direction newton_direction(const BlockScore& s, double condition_threshold);

using ScoreFn = std::function<BlockScore(const ParameterVector&)>;

// Simultaneous block updates beta += H_b^{-1} G_b, alpha += H_a^{-1} G_a.
// The score function may throw iccgee::Error for inadmissible parameters;
// such steps (and non-finite scores) are halved up to max_halvings times.
FitResult fisher_scoring(const ScoreFn& score, const ParameterVector& theta0,
                         const Controls& controls = {});

enum class IpwMode { complete_case, g1, g2 };
enum class EstimatorKind { complete_case, ipw_g1, ipw_g2, doubly_robust };
enum class SolverKind { deterministic, stochastic, parallel_stochastic };
enum class ZetaVariant { z1, z2, z3 };

struct EstimatorChoice {
  EstimatorKind kind = EstimatorKind::doubly_robust;
  SolverKind solver = SolverKind::deterministic;

  bool needs_psm() const { return kind != EstimatorKind::complete_case; }
  bool needs_om() const { return kind == EstimatorKind::doubly_robust; }
  IpwMode ipw_mode() const;
};

const char* estimator_name(EstimatorKind k);
const char* solver_name(SolverKind k);
EstimatorKind parse_estimator(const std::string& s);
SolverKind parse_solver(const std::string& s);

struct NuisanceModel {
  ModelSpec spec;
  ParameterVector theta;
};

// Simple random sample without replacement of `upsilon` entries of
// `universe`, returned in ascending universe order.
std::vector<int> srswor(const std::vector<int>& universe, long upsilon, std::mt19937_64& rng);

// Subsample size ceil(pi_s * m), floored at 2 when pairs are used.
long subsample_size(double pi_s, long m, bool pairs);

// ---------------------------------------------------------------------------
// GEE2 for a conditional binary model (missingness or outcome). The
// referenced Dataset must outlive the problem.

class NuisanceProblem {
 public:
  NuisanceProblem(const Dataset& data, ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  long clusters() const { return static_cast<long>(clusters_.size()); }
  long dim() const { return spec_.mean_dim() + spec_.corr_dim(); }

  BlockScore score(const ParameterVector& theta) const;
  BlockScore cluster_score(long i, const ParameterVector& theta) const;
  // I x dim matrix of per-cluster estimating functions.
  Eigen::MatrixXd psi(const ParameterVector& theta) const;
  BlockScore sampled_score(const ParameterVector& theta, double pi_s, std::mt19937_64& rng) const;
  bool admissible(const ParameterVector& theta) const;
  // Response constant within an arm -> SeparationError.
  void check_separation() const;

 private:
  struct Cluster {
    const ClusterData* data;
    Design design;
    const Eigen::VectorXd* response;
    std::vector<int> members;
  };
  void accumulate(const Cluster& c, const ParameterVector& theta, const std::vector<int>& members,
                  double f1, double f2, BlockScore& out) const;

  ModelSpec spec_;
  std::vector<Cluster> clusters_;
  std::vector<int> all_index_;
};

FitResult fit_psee(const Dataset& data, const ModelSpec& psm, const Controls& controls = {});
FitResult fit_omee(const Dataset& data, const ModelSpec& om, const Controls& controls = {});

// P(R_j = R_k = 1) from the first-order scores and the missingness ICC.
double joint_observation_prob(double pi1, double pi2, double rho_r);

// Diagonal of W^R: n first-order entries then n(n-1)/2 pair entries.
DiagonalWeight build_ipw_matrix(const ClusterData& cluster, const NuisanceModel& psm, IpwMode mode,
                                double positivity_floor = 1e-3);

// ---------------------------------------------------------------------------
// Treatment-model estimating equations: complete case (W = diag(R)), IPW
// (g1 or g2 pair weights) and doubly robust (IPW plus augmentation).

class TmProblem {
 public:
  TmProblem(const Dataset& data, ModelSpec tm, IpwMode mode,
            const std::optional<NuisanceModel>& psm, const std::optional<NuisanceModel>& om,
            double p_a, double positivity_floor = 1e-3);

  const ModelSpec& spec() const { return spec_; }
  bool doubly_robust() const { return dr_; }
  long clusters() const { return static_cast<long>(clusters_.size()); }
  long dim() const { return spec_.mean_dim() + spec_.corr_dim(); }

  BlockScore score(const ParameterVector& theta) const;
  BlockScore cluster_score(long i, const ParameterVector& theta) const;
  Eigen::MatrixXd psi(const ParameterVector& theta) const;

  // One stochastic draw. s is drawn from rng_s over observed subjects; for DR
  // the independent all-subject sample s' comes from rng_sp.
  BlockScore sampled_score(const ParameterVector& theta, double pi_s, std::mt19937_64& rng_s,
                           std::mt19937_64& rng_sp, ZetaVariant variant = ZetaVariant::z3) const;

  // Augmentation term of cluster i, stacked (beta; alpha).
  Eigen::VectorXd zeta(long i, const ParameterVector& theta) const;
  Eigen::VectorXd sampled_zeta(long i, const ParameterVector& theta, double pi_s,
                               std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                               ZetaVariant variant) const;

  bool admissible(const ParameterVector& theta) const;
  void check_separation() const;

 private:
  struct Arm {
    double pi, u, su, rho, drho;
  };
  struct Cluster {
    const ClusterData* data;
    Eigen::VectorXd inv_pi;     // 1 / pi^R (ones for complete case)
    Eigen::VectorXd pi_r;
    Eigen::VectorXd sqrt_v_r;
    double rho_r = 0.0;
    // outcome-model predictions at A = 0 and A = 1
    Eigen::VectorXd om_pi[2];
    Eigen::VectorXd om_sqrt_v[2];
    double om_rho[2] = {0.0, 0.0};
  };

  Arm arm(const ParameterVector& theta, int a) const;
  double pair_weight(const Cluster& c, int j, int k) const;
  void ipw_part(const Cluster& c, const Arm& arm, const std::vector<int>& members, double f1,
                double f2, bool use_ipw_weights, BlockScore& out) const;
  // sum_a p_a D(a)' V(a)^{-1} W' E''(a) with W' given by members and factors;
  // H receives the matching sum of D(a)' V(a)^{-1} W' D(a).
  void zeta_part(const Cluster& c, const ParameterVector& theta, const std::vector<int>& members,
                 double f1, double f2, bool ipw_weights, Eigen::VectorXd& g_beta,
                 Eigen::VectorXd& g_alpha, Eigen::MatrixXd* h_beta, Eigen::MatrixXd* h_alpha) const;

  ModelSpec spec_;
  IpwMode mode_;
  bool dr_;
  double p_a_;
  std::vector<Cluster> clusters_;
  std::vector<std::vector<int>> all_index_;  // 0..n-1 per cluster
};

FitResult fit_complete_case(const Dataset& data, const ModelSpec& tm, const Controls& controls = {});
FitResult fit_ipw_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee, IpwMode mode,
                       const Controls& controls = {});
FitResult fit_dr_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                      const FitResult& omee, const Controls& controls = {},
                      IpwMode mode = IpwMode::g2);

// Deterministic augmentation term for one cluster.
Eigen::VectorXd augmentation_term(const ClusterData& cluster, const ModelSpec& tm,
                                  const ParameterVector& tm_theta, const NuisanceModel& om,
                                  double p_a);

}  // namespace iccgee
