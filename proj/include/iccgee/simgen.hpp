#pragma once

#include "iccgee/inference.hpp"
#include "iccgee/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace iccgee {

enum class GenerationMethod { parzen, random_intercept };
const char* method_name(GenerationMethod m);
GenerationMethod parse_method(const std::string& s);

// logit pi = (b0 + bA A) + (bz + bz_a A)'z + (bx + bx_a A)'x
// atanh rho = (a0 + aA A) + (az + az_a A)'z
struct Coefficients {
  double b0 = 0.0, b_a = 0.0;
  Eigen::VectorXd bz, bz_a, bx, bx_a;
  double a0 = 0.0, a_a = 0.0;
  Eigen::VectorXd az, az_a;

  static Coefficients table2();
  void validate(long q, long m) const;
  double mean_linear(int a, const Eigen::VectorXd& z, const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  double cluster_linear(int a, const Eigen::VectorXd& z) const;   // z part of the mean plus intercepts
  Eigen::VectorXd x_slopes(int a) const;
  double corr_linear(int a, const Eigen::VectorXd& z) const;
};

struct GenerationConfig {
  GenerationMethod y_method = GenerationMethod::parzen;
  GenerationMethod r_method = GenerationMethod::parzen;
  bool missingness = true;
  long clusters = 500;
  long n_min = 80, n_max = 140;
  Eigen::VectorXd x_min = (Eigen::VectorXd(3) << 20, 1, 4).finished();
  Eigen::VectorXd x_max = (Eigen::VectorXd(3) << 60, 10, 25).finished();
  std::vector<long> z_min{80};
  std::vector<long> z_max{140};
  Coefficients y = Coefficients::table2();
  Coefficients r = Coefficients::table2();
  double p_a = 0.5;
  std::uint64_t seed = 1;

  long q() const { return static_cast<long>(z_min.size()); }
  long m() const { return x_min.size(); }
  void validate() const;
};

struct ClusterSkeleton {
  int a = 0;
  Eigen::VectorXd z;
  Eigen::MatrixXd x;
};

std::vector<ClusterSkeleton> generate_covariates(const GenerationConfig& config, std::mt19937_64& rng);

// Marginal probabilities and ICC of one cluster under a coefficient set.
Eigen::VectorXd cluster_pi(const ClusterSkeleton& s, const Coefficients& c);
double cluster_rho(const ClusterSkeleton& s, const Coefficients& c);

// Scaled Beta effect with mean 0 and variance rho on (L, U); requires
// -U L - rho >= 0. rho ~ 0 gives 0.
double parzen_effect(double lower, double upper, double rho, std::mt19937_64& rng);
struct ParzenBounds {
  double lower, upper;
};
ParzenBounds parzen_bounds(const Eigen::VectorXd& pi);

std::vector<std::vector<int>> parzen_generate(const std::vector<ClusterSkeleton>& skeleton,
                                              const Coefficients& c, std::mt19937_64& rng);
std::vector<std::vector<int>> random_intercept_generate(const std::vector<ClusterSkeleton>& skeleton,
                                                        const Coefficients& c, std::mt19937_64& rng);
double random_intercept_sd(int a);

// Covariates, outcomes and missingness from independent streams of
// (seed, replicate). The dataset carries p_a from the config.
Dataset generate_dataset(const GenerationConfig& config, long replicate);

// ---------------------------------------------------------------------------
// Quadrature truth.

struct QuadratureRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};
// Golub-Welsch. Legendre on [-1, 1] with unit weight; Hermite for the
// standard normal density (probabilists' form, weights sum to 1).
QuadratureRule gauss_legendre(int n);
QuadratureRule gauss_hermite_normal(int n);

struct Truth {
  double beta0 = 0, beta_a = 0, alpha0 = 0, alpha_a = 0;
  double achieved_error = 0.0;   // max change between the two node counts
  Eigen::Vector4d vec() const { return {beta0, beta_a, alpha0, alpha_a}; }
};

struct TruthOptions {
  int nodes = 64;
  int check_nodes = 48;
  double tolerance = 1e-4;
};

Truth marginal_truth(const GenerationConfig& config, const TruthOptions& options = {});

// ---------------------------------------------------------------------------
// Replicate harness.

struct EstimatorRun {
  std::string label;
  PipelineOptions options;
};

struct ReplicateRecord {
  long replicate = 0;
  std::size_t estimator = 0;
  bool ok = false;
  bool psm_failed = false, om_failed = false, tm_failed = false, inference_failed = false;
  std::string error;
  Eigen::VectorXd theta;
  Eigen::VectorXd se;
  StageTimes seconds;
  int converged_chains = 0;
};

struct EstimatorSummary {
  std::string label;
  long runs = 0;
  long converged = 0;
  long psm_only = 0, om_only = 0, both_nuisance = 0, tm_errors = 0, inference_errors = 0;
  Eigen::VectorXd bias, replicate_se, sandwich_se, wald, coverage;
  StageTimes mean_seconds, median_seconds;

  double error_rate(long count) const { return runs ? static_cast<double>(count) / runs : 0.0; }
};

struct ReplicateSummary {
  Eigen::Vector4d truth;
  long replicates = 0;
  std::vector<EstimatorSummary> rows;
  std::vector<ReplicateRecord> records;
};

ReplicateSummary run_replicates(const GenerationConfig& config, const std::vector<EstimatorRun>& runs,
                                long replicates, const Eigen::Vector4d& truth, int threads = 1);

}  // namespace iccgee
