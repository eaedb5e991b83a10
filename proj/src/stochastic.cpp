#include "iccgee/stochastic.hpp"

#include "iccgee/errors.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

namespace iccgee {

namespace {
using Clock = std::chrono::steady_clock;
}

LearningRate default_learning_rate() {
  return [](int w) { return 1.0 / (static_cast<double>(w) + 1.0); };
}

LearningRate constant_learning_rate(double g) {
  return [g](int) { return g; };
}

RobbinsMonroCheck check_robbins_monro(const LearningRate& gamma) {
  // Dyadic blocks [2^k, 2^{k+1}): a divergent sum keeps block sums bounded
  // away from zero, a convergent sum of squares drives them to zero.
  auto block = [&](int k, bool squared) {
    double s = 0.0;
    for (int w = 1 << k; w < (1 << (k + 1)); ++w) {
      const double g = gamma(w);
      s += squared ? g * g : g;
    }
    return s;
  };
  RobbinsMonroCheck out;
  for (int w = 0; w < 1024; ++w) {
    const double g = gamma(w);
    if (!(g > 0.0) || !std::isfinite(g)) return out;
  }
  const double s_lo = block(12, false), s_hi = block(18, false);
  const double q_lo = block(12, true), q_hi = block(18, true);
  out.sum_diverges = s_hi > 1e-2 && s_hi > 0.2 * s_lo;
  out.squares_converge = q_hi < 1e-3 && q_hi < 0.5 * q_lo;
  return out;
}

void SamplingPlan::validate() const {
  if (!(pi_s > 0.0 && pi_s <= 1.0)) throw ConfigError("pi_s must lie in (0, 1]");
  if (omega_nuisance < 1 || omega_tm < 1) throw ConfigError("iteration budgets must be positive");
  if (chains < 1) throw ConfigError("chains must be >= 1");
  if (!gamma) throw ConfigError("learning rate schedule missing");
}

std::mt19937_64 derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                   static_cast<std::uint32_t>(seed >> 32)};
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

DiagonalWeight induced_weights(const DiagonalWeight& w, const std::vector<int>& s, long n, long m,
                               long upsilon, WeightOrder order) {
  if (upsilon < 1 || upsilon > m) throw SamplingError("induced_weights: upsilon outside [1, m]");
  if (static_cast<long>(s.size()) != upsilon) throw SamplingError("induced_weights: |s| != upsilon");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(w.size());
  if (order == WeightOrder::first) {
    if (w.size() != n) throw ShapeError("induced_weights: first-order weights need length n");
    const double f = static_cast<double>(m) / static_cast<double>(upsilon);
    for (int j : s) out[j] = f * w[j];
    return DiagonalWeight(out);
  }
  if (upsilon < 2) throw SamplingError("induced_weights: pair weights need upsilon >= 2");
  if (w.size() != pair_count(n)) throw ShapeError("induced_weights: pair weights need n(n-1)/2 entries");
  const double f = static_cast<double>(m * (m - 1)) / static_cast<double>(upsilon * (upsilon - 1));
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t b = a + 1; b < s.size(); ++b) {
      const long p = pair_position(n, s[a], s[b]);
      out[p] = f * w[p];
    }
  }
  return DiagonalWeight(out);
}

ChainResult run_chain(const SampledScoreFn& sampler, const AdmissibleFn& admissible,
                      const ParameterVector& theta0, int omega, const LearningRate& gamma,
                      const Controls& controls, std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                      bool keep_trace) {
  const auto t0 = Clock::now();
  ChainResult res;
  res.theta = theta0;
  double last_condition = 0.0;
  auto fail = [&](const std::string& why) {
    res.converged = false;
    res.divergence_reason = why;
    res.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return res;
  };
  for (int w = 0; w < omega; ++w) {
    BlockScore s;
    Direction dir;
    try {
      s = sampler(res.theta, rng_s, rng_sp);
      if (!s.finite()) return fail("non-finite stochastic score at iteration " + std::to_string(w));
      dir = newton_direction(s, controls.condition_threshold);
    } catch (const Error& e) {
      return fail(std::string(e.what()) + " at iteration " + std::to_string(w));
    }
    last_condition = dir.condition;
    res.condition = std::max(res.condition, dir.condition);
    double lambda = gamma(w);
    bool accepted = false;
    ParameterVector cand;
    for (int h = 0; h <= controls.max_halvings; ++h, lambda *= 0.5) {
      cand.beta = res.theta.beta + lambda * dir.beta;
      cand.alpha = res.theta.alpha + lambda * dir.alpha;
      if (cand.finite() && admissible(cand)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return fail("inadmissible update at iteration " + std::to_string(w));
    res.theta = cand;
    res.iterations = w + 1;
    if (keep_trace) res.trace.push_back(cand.stacked());
  }
  res.converged = res.theta.finite() && last_condition <= controls.condition_threshold;
  if (!res.converged) res.divergence_reason = "final information ill-conditioned";
  res.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

ChainResult s_fit_nuisance(const Dataset& data, const ModelSpec& spec, const SamplingPlan& plan,
                           const Controls& controls, std::uint64_t chain) {
  plan.validate();
  NuisanceProblem prob(data, spec);
  prob.check_separation();
  const auto stage = spec.target == Target::psm ? RngStage::psm : RngStage::om;
  auto rs = derive_rng(plan.seed, {static_cast<std::uint64_t>(stage), chain, 0});
  auto rsp = derive_rng(plan.seed, {static_cast<std::uint64_t>(stage), chain, 1});
  return run_chain(
      [&](const ParameterVector& th, std::mt19937_64& r, std::mt19937_64&) {
        return prob.sampled_score(th, plan.pi_s, r);
      },
      [&](const ParameterVector& th) { return prob.admissible(th); }, ParameterVector::zeros(spec),
      plan.omega_nuisance, plan.gamma, controls, rs, rsp, plan.keep_trace);
}

namespace {

ChainResult tm_chain(const TmProblem& prob, const SamplingPlan& plan, const Controls& controls,
                     std::uint64_t chain, const ParameterVector& theta0) {
  auto rs = derive_rng(plan.seed, {static_cast<std::uint64_t>(RngStage::tm), chain, 0});
  auto rsp = derive_rng(plan.seed, {static_cast<std::uint64_t>(RngStage::tm), chain, 1});
  return run_chain(
      [&](const ParameterVector& th, std::mt19937_64& a, std::mt19937_64& b) {
        return prob.sampled_score(th, plan.pi_s, a, b, plan.zeta);
      },
      [&](const ParameterVector& th) { return prob.admissible(th); }, theta0, plan.omega_tm,
      plan.gamma, controls, rs, rsp, plan.keep_trace);
}

}  // namespace

ChainResult s_ipw_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                       const SamplingPlan& plan, IpwMode mode, const Controls& controls,
                       std::uint64_t chain) {
  plan.validate();
  data.require_both_arms();
  std::optional<NuisanceModel> psm;
  if (mode != IpwMode::complete_case) psm = NuisanceModel{psee.spec, psee.theta};
  TmProblem prob(data, tm, mode, psm, std::nullopt, data.p_a(), controls.positivity_floor);
  prob.check_separation();
  return tm_chain(prob, plan, controls, chain, ParameterVector::zeros(tm));
}

ChainResult s_dr_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                      const FitResult& omee, const SamplingPlan& plan, const Controls& controls,
                      std::uint64_t chain, const ParameterVector* theta0) {
  plan.validate();
  data.require_both_arms();
  TmProblem prob(data, tm, IpwMode::g2, NuisanceModel{psee.spec, psee.theta},
                 NuisanceModel{omee.spec, omee.theta}, data.p_a(), controls.positivity_floor);
  prob.check_separation();
  return tm_chain(prob, plan, controls, chain, theta0 ? *theta0 : ParameterVector::zeros(tm));
}

Eigen::VectorXd stochastic_zeta(const ClusterData& cluster, const ModelSpec& tm,
                                const ParameterVector& tm_theta, const NuisanceModel& om, double p_a,
                                double pi_s, std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                                ZetaVariant variant) {
  Dataset one({cluster}, p_a);
  TmProblem prob(one, tm, IpwMode::complete_case, std::nullopt, om, p_a);
  return prob.sampled_zeta(0, tm_theta, pi_s, rng_s, rng_sp, variant);
}

ParallelResult par_sgee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                         const FitResult& omee, const SamplingPlan& plan, const Controls& controls,
                         int threads) {
  plan.validate();
  data.require_both_arms();
  TmProblem prob(data, tm, IpwMode::g2, NuisanceModel{psee.spec, psee.theta},
                 NuisanceModel{omee.spec, omee.theta}, data.p_a(), controls.positivity_floor);
  prob.check_separation();

  auto round = [&](std::uint64_t first_chain, const ParameterVector& theta0) {
    const int k = plan.chains;
    std::vector<ChainResult> chains(static_cast<std::size_t>(k));
    const int workers = std::max(1, std::min(threads, k));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int c = w; c < k; c += workers) {
          chains[static_cast<std::size_t>(c)] =
              tm_chain(prob, plan, controls, first_chain + static_cast<std::uint64_t>(c), theta0);
        }
      });
    }
    for (auto& t : pool) t.join();
    return chains;
  };

  auto average = [&](const std::vector<ChainResult>& chains, ParallelResult& out) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(tm.mean_dim() + tm.corr_dim());
    int ok = 0;
    std::ostringstream reasons;
    for (std::size_t c = 0; c < chains.size(); ++c) {
      if (chains[c].converged) {
        sum += chains[c].theta.stacked();
        ++ok;
      } else {
        reasons << " [chain " << c << ": " << chains[c].divergence_reason << "]";
      }
    }
    if (ok == 0) throw DivergenceError("all " + std::to_string(chains.size()) + " chains diverged:" + reasons.str());
    out.theta = ParameterVector::from_stacked(tm, sum / ok);
    out.converged_chains = ok;
  };

  ParallelResult out;
  out.chains = round(0, ParameterVector::zeros(tm));
  average(out.chains, out);
  if (plan.second_round) {
    out.chains = round(static_cast<std::uint64_t>(plan.chains), out.theta);
    average(out.chains, out);
  }
  return out;
}

}  // namespace iccgee
