#pragma once

#include "iccgee/estimators.hpp"
#include "iccgee/model.hpp"
#include "iccgee/stochastic.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace iccgee {

// Fitted pieces of the stacked system kappa = (theta_TM, theta_R, theta_Y).
// Nuisance blocks are absent for estimators that do not use them.
struct StackedFits {
  ModelSpec tm;
  ParameterVector tm_theta;
  IpwMode mode = IpwMode::g2;
  bool doubly_robust = false;
  std::optional<NuisanceModel> psm;
  std::optional<NuisanceModel> om;
  double p_a = 0.5;
  double positivity_floor = 1e-3;
};

struct SandwichResult {
  Eigen::MatrixXd gamma;        // (1/I) sum dPsi/dkappa
  Eigen::MatrixXd delta;        // (1/I) sum Psi Psi'
  Eigen::MatrixXd covariance;   // of kappa-hat
  double condition = 0.0;
  std::vector<std::string> names;
  long tm_dim = 0;

  Eigen::MatrixXd tm_covariance() const { return covariance.topLeftCorner(tm_dim, tm_dim); }
  Eigen::VectorXd tm_se() const;
};

struct SandwichOptions {
  // Block-diagonal Gamma: ignores the dependence of the TM equations on the
  // nuisance estimates.
  bool ignore_nuisance = false;
  double condition_threshold = 1e12;
};

// var = Gamma^{-1} Delta Gamma^{-T} / I for the stacked equations. Gamma is
// assembled by central differences with h = 1e-6 max(1, |kappa_j|).
SandwichResult sandwich_variance(const Dataset& data, const StackedFits& fits,
                                 const SandwichOptions& options = {});

// Single-model version: psi maps a parameter vector to the I x p matrix of
// per-cluster estimating functions.
using PsiFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;
SandwichResult sandwich_from_psi(const PsiFn& psi, const Eigen::VectorXd& theta,
                                 double condition_threshold = 1e12);

struct WaldResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool flagged = false;   // |W| > 2
};

// estimate / se, two-sided normal p-value. With reps, the replicate form
// sqrt(R) * bias / replicate SE.
WaldResult wald(double estimate, double se, std::optional<long> reps = std::nullopt);

struct Interval {
  double lower, upper;
};
Interval wald_interval(double estimate, double se, double level = 0.95);

// ---------------------------------------------------------------------------
// PSEE -> OMEE -> TMEE pipeline.

struct PipelineOptions {
  EstimatorChoice choice;
  ModelSpec tm = ModelSpec::canonical_tm();
  std::optional<ModelSpec> psm;   // default full(psm, q, m)
  std::optional<ModelSpec> om;    // default full(om, q, m)
  Controls controls;
  SamplingPlan plan;
  int threads = 1;
  bool sandwich = true;
  bool naive_sandwich = false;
};

struct StageTimes {
  double psm = 0.0, om = 0.0, tm = 0.0, inference = 0.0;
};

struct PipelineResult {
  EstimatorChoice choice;
  FitResult tm;
  std::optional<FitResult> psee;
  std::optional<FitResult> omee;
  std::optional<SandwichResult> sandwich;
  Eigen::VectorXd tm_se;
  StageTimes seconds;
  std::vector<ChainResult> chains;
  int converged_chains = 0;
  double p_a = 0.5;
};

ModelSpec resolve_psm(const PipelineOptions& options, const Dataset& data);
ModelSpec resolve_om(const PipelineOptions& options, const Dataset& data);

// Nuisance stages with the configured solver; failures become StageError.
FitResult run_psm_stage(const Dataset& data, const PipelineOptions& options);
FitResult run_om_stage(const Dataset& data, const PipelineOptions& options);

// TM stage and inference given nuisance fits (either may be null when the
// estimator does not need it).
PipelineResult run_tm_stage(const Dataset& data, const PipelineOptions& options,
                            const FitResult* psee, const FitResult* omee);

PipelineResult run_pipeline(const Dataset& data, const PipelineOptions& options);

}  // namespace iccgee
