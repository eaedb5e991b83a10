#pragma once

#include "iccgee/core_math.hpp"
#include "iccgee/estimators.hpp"
#include "iccgee/model.hpp"

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace iccgee {

using LearningRate = std::function<double(int)>;

// gamma_w = 1 / (w + 1)
LearningRate default_learning_rate();
LearningRate constant_learning_rate(double g);

// Numerical check of sum gamma = inf and sum gamma^2 < inf from dyadic
// tail sums; a heuristic, exact only for regularly varying schedules.
struct RobbinsMonroCheck {
  bool sum_diverges = false;
  bool squares_converge = false;
  bool ok() const { return sum_diverges && squares_converge; }
};
RobbinsMonroCheck check_robbins_monro(const LearningRate& gamma);

struct SamplingPlan {
  double pi_s = 0.30;
  int omega_nuisance = 20;
  int omega_tm = 10;
  LearningRate gamma = default_learning_rate();
  std::uint64_t seed = 1;
  int chains = 1;
  bool second_round = false;
  ZetaVariant zeta = ZetaVariant::z3;
  bool keep_trace = false;

  void validate() const;
};

struct ChainResult {
  ParameterVector theta;
  bool converged = false;
  std::string divergence_reason;
  std::vector<Eigen::VectorXd> trace;
  int iterations = 0;
  double condition = 0.0;
  double seconds = 0.0;
};

// Independent engine for (seed, tags...). Chains, stages and the s / s'
// streams each get their own tag combination.
std::mt19937_64 derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

enum class RngStage : std::uint64_t { psm = 0, om = 1, tm = 2 };

enum class WeightOrder { first, second };

// (m / upsilon) W[s] for first order, m(m-1)/(upsilon(upsilon-1)) W[(s)_2] for
// pairs. For second order, w holds the n(n-1)/2 pair entries of a cluster
// of size n.
DiagonalWeight induced_weights(const DiagonalWeight& w, const std::vector<int>& s, long n, long m,
                               long upsilon, WeightOrder order);

using SampledScoreFn =
    std::function<BlockScore(const ParameterVector&, std::mt19937_64&, std::mt19937_64&)>;
using AdmissibleFn = std::function<bool(const ParameterVector&)>;

// Robbins-Monro Fisher scoring over a fixed budget of omega iterations.
ChainResult run_chain(const SampledScoreFn& sampler, const AdmissibleFn& admissible,
                      const ParameterVector& theta0, int omega, const LearningRate& gamma,
                      const Controls& controls, std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                      bool keep_trace);

ChainResult s_fit_nuisance(const Dataset& data, const ModelSpec& spec, const SamplingPlan& plan,
                           const Controls& controls = {}, std::uint64_t chain = 0);

ChainResult s_ipw_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                       const SamplingPlan& plan, IpwMode mode = IpwMode::g2,
                       const Controls& controls = {}, std::uint64_t chain = 0);

ChainResult s_dr_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                      const FitResult& omee, const SamplingPlan& plan, const Controls& controls = {},
                      std::uint64_t chain = 0, const ParameterVector* theta0 = nullptr);

// One stochastic augmentation draw for a cluster.
Eigen::VectorXd stochastic_zeta(const ClusterData& cluster, const ModelSpec& tm,
                                const ParameterVector& tm_theta, const NuisanceModel& om, double p_a,
                                double pi_s, std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                                ZetaVariant variant);

struct ParallelResult {
  ParameterVector theta;
  std::vector<ChainResult> chains;
  int converged_chains = 0;
};

// K independent S-DR chains averaged over those that converged; chain k uses
// the tag (tm, k) so K = 1 reproduces s_dr_gee2 with the same seed.
ParallelResult par_sgee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                         const FitResult& omee, const SamplingPlan& plan,
                         const Controls& controls = {}, int threads = 1);

}  // namespace iccgee
