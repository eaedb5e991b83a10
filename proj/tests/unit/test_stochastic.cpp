#include "iccgee/errors.hpp"
#include "iccgee/estimators.hpp"
#include "iccgee/simgen.hpp"
#include "iccgee/stochastic.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace iccgee;

namespace {

Dataset parzen_dataset(long clusters, long n_lo, long n_hi, std::uint64_t seed) {
  GenerationConfig g;
  g.clusters = clusters;
  g.n_min = n_lo;
  g.n_max = n_hi;
  g.seed = seed;
  return generate_dataset(g, 0);
}

struct Fits {
  FitResult psee, omee;
};

Fits nuisance(const Dataset& d) {
  return {fit_psee(d, ModelSpec::main_effects(Target::psm, d.q(), d.m())),
          fit_omee(d, ModelSpec::main_effects(Target::om, d.q(), d.m()))};
}

double sd(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

TEST_CASE("Robbins-Monro check") {
  CHECK(check_robbins_monro(default_learning_rate()).ok());
  CHECK(check_robbins_monro([](int w) { return 2.0 / (w + 10.0); }).ok());
  const auto c = check_robbins_monro(constant_learning_rate(0.5));
  CHECK(c.sum_diverges);
  CHECK_FALSE(c.squares_converge);
  CHECK_FALSE(check_robbins_monro([](int w) { return 1.0 / std::sqrt(w + 1.0); }).ok());
  CHECK_FALSE(check_robbins_monro([](int w) { return 1.0 / ((w + 1.0) * (w + 1.0)); }).ok());
  CHECK_FALSE(check_robbins_monro([](int w) { return w == 3 ? -1.0 : 1.0 / (w + 1.0); }).ok());
}

TEST_CASE("sampling plan validation") {
  SamplingPlan p;
  CHECK_NOTHROW(p.validate());
  p.pi_s = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.pi_s = 1.2;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = SamplingPlan{};
  p.chains = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = SamplingPlan{};
  p.omega_tm = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = SamplingPlan{};
  p.gamma = nullptr;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("derived streams are reproducible and distinct") {
  auto a = derive_rng(5, {1, 2});
  auto b = derive_rng(5, {1, 2});
  auto c = derive_rng(5, {2, 1});
  auto d = derive_rng(6, {1, 2});
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}

TEST_CASE("induced weights") {
  const long n = 6;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  Eigen::VectorXd w1(n), w2(pair_count(n));
  for (long k = 0; k < n; ++k) w1[k] = u(rng);
  for (long k = 0; k < w2.size(); ++k) w2[k] = u(rng);
  w1[2] = 0.0;  // an unobserved subject
  std::vector<int> all{0, 1, 2, 3, 4, 5};
  CHECK(induced_weights(DiagonalWeight(w1), all, n, n, n, WeightOrder::first).entries() == w1);
  CHECK(induced_weights(DiagonalWeight(w2), all, n, n, n, WeightOrder::second).entries() == w2);

  const std::vector<int> s{1, 4};
  const auto pw = induced_weights(DiagonalWeight(w2), s, n, n, 2, WeightOrder::second);
  CHECK(pw[pair_position(n, 0, 1)] == 0.0);
  CHECK(pw[pair_position(n, 1, 4)] == doctest::Approx(15.0 * w2[pair_position(n, 1, 4)]));
  CHECK_THROWS_AS(induced_weights(DiagonalWeight(w2), {3}, n, n, 1, WeightOrder::second), SamplingError);

  // MC expectation over SRSWOR of the universe
  const long draws = 100000, ups = 3;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(n), q1 = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd s2 = Eigen::VectorXd::Zero(w2.size()), q2 = Eigen::VectorXd::Zero(w2.size());
  for (long d = 0; d < draws; ++d) {
    const auto smp = srswor(all, ups, rng);
    const auto a = induced_weights(DiagonalWeight(w1), smp, n, n, ups, WeightOrder::first).entries();
    const auto b = induced_weights(DiagonalWeight(w2), smp, n, n, ups, WeightOrder::second).entries();
    s1 += a;
    q1 += a.cwiseProduct(a);
    s2 += b;
    q2 += b.cwiseProduct(b);
  }
  for (long k = 0; k < n; ++k) {
    const double m = s1[k] / draws, se = std::sqrt(std::max(q1[k] / draws - m * m, 0.0) / draws);
    CHECK(std::fabs(m - w1[k]) <= 3 * se + 1e-15);
  }
  for (long k = 0; k < w2.size(); ++k) {
    const double m = s2[k] / draws, se = std::sqrt(std::max(q2[k] / draws - m * m, 0.0) / draws);
    CHECK(std::fabs(m - w2[k]) <= 3 * se);
  }
}

TEST_CASE("sampled scores are unbiased on a frozen dataset") {
  const Dataset d = parzen_dataset(10, 8, 14, 3);
  const Fits f = nuisance(d);
  const NuisanceModel psm{f.psee.spec, f.psee.theta}, om{f.omee.spec, f.omee.theta};
  ParameterVector th;
  th.beta = Eigen::Vector2d(0.1, 0.2);
  th.alpha = Eigen::Vector2d(0.12, 0.08);
  for (bool dr : {false, true}) {
    TmProblem prob(d, ModelSpec::canonical_tm(), IpwMode::g2, psm, dr ? std::optional(om) : std::nullopt, 0.5);
    const BlockScore exact = prob.score(th);
    auto flat = [](const BlockScore& s) {
      Eigen::VectorXd v(12);
      v << s.g_beta, s.g_alpha, s.h_beta.reshaped(), s.h_alpha.reshaped();
      return v;
    };
    const Eigen::VectorXd target = flat(exact);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(12), sq = Eigen::VectorXd::Zero(12);
    auto rs = derive_rng(1, {0}), rsp = derive_rng(1, {1});
    const long draws = 4000;
    for (long k = 0; k < draws; ++k) {
      const Eigen::VectorXd v = flat(prob.sampled_score(th, 0.3, rs, rsp, ZetaVariant::z3));
      sum += v;
      sq += v.cwiseProduct(v);
    }
    for (long k = 0; k < 12; ++k) {
      const double m = sum[k] / draws;
      const double se = std::sqrt(std::max(sq[k] / draws - m * m, 0.0) / draws);
      CHECK(std::fabs(m - target[k]) <= 3 * se + 1e-9 * std::max(1.0, std::fabs(target[k])));
    }
  }
  // pi_s = 1: every variant equals the deterministic augmentation term
  TmProblem prob(d, ModelSpec::canonical_tm(), IpwMode::g2, psm, om, 0.5);
  auto rs = derive_rng(2, {0}), rsp = derive_rng(2, {1});
  for (auto v : {ZetaVariant::z3}) {
    for (long i = 0; i < d.size(); ++i) {
      CHECK((prob.sampled_zeta(i, th, 1.0, rs, rsp, v) - prob.zeta(i, th)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("pi_s = 1 with unit steps reproduces deterministic scoring") {
  const Dataset d = parzen_dataset(40, 6, 12, 7);
  const Fits f = nuisance(d);
  REQUIRE(f.psee.converged);
  REQUIRE(f.omee.converged);
  Controls ctl;
  ctl.keep_trace = true;
  SamplingPlan plan;
  plan.pi_s = 1.0;
  plan.gamma = constant_learning_rate(1.0);
  plan.keep_trace = true;

  const FitResult ipw = fit_ipw_gee2(d, ModelSpec::canonical_tm(), f.psee, IpwMode::g2, ctl);
  plan.omega_tm = static_cast<int>(ipw.trace.size());
  const ChainResult sipw = s_ipw_gee2(d, ModelSpec::canonical_tm(), f.psee, plan);
  REQUIRE(sipw.trace.size() == ipw.trace.size());
  for (std::size_t k = 0; k < ipw.trace.size(); ++k) CHECK((sipw.trace[k] - ipw.trace[k]).cwiseAbs().maxCoeff() < 1e-12);

  const FitResult dr = fit_dr_gee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, ctl);
  plan.omega_tm = static_cast<int>(dr.trace.size());
  const ChainResult sdr = s_dr_gee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan);
  REQUIRE(sdr.trace.size() == dr.trace.size());
  for (std::size_t k = 0; k < dr.trace.size(); ++k) CHECK((sdr.trace[k] - dr.trace[k]).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(sdr.converged);

  const FitResult ps = fit_psee(d, f.psee.spec, ctl);
  plan.omega_nuisance = static_cast<int>(ps.trace.size());
  const ChainResult sps = s_fit_nuisance(d, f.psee.spec, plan);
  REQUIRE(sps.trace.size() == ps.trace.size());
  CHECK((sps.theta.stacked() - ps.theta.stacked()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("parallel chains") {
  const Dataset d = parzen_dataset(40, 6, 12, 9);
  const Fits f = nuisance(d);
  SamplingPlan plan;
  plan.seed = 77;
  plan.chains = 1;
  const ParallelResult one = par_sgee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan);
  const ChainResult single = s_dr_gee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan);
  CHECK(one.theta.stacked() == single.theta.stacked());

  plan.chains = 4;
  const ParallelResult a = par_sgee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan, {}, 1);
  const ParallelResult b = par_sgee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan, {}, 3);
  CHECK(a.chains.size() == 4);
  CHECK(a.theta.stacked() == b.theta.stacked());
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(4);
  int used = 0;
  for (const auto& c : a.chains) {
    if (!c.converged) continue;
    avg += c.theta.stacked();
    ++used;
  }
  REQUIRE(used == a.converged_chains);
  CHECK((avg / used - a.theta.stacked()).cwiseAbs().maxCoeff() < 1e-14);

  plan.second_round = true;
  const ParallelResult r2 = par_sgee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan);
  CHECK(r2.chains.size() == 4);
  CHECK(r2.theta.finite());
}

TEST_CASE("seed-to-seed dispersion shrinks with the iteration budget") {
  const Dataset d = parzen_dataset(60, 8, 12, 21);
  const Fits f = nuisance(d);
  double prev = 1e9;
  for (int omega : {5, 10, 20}) {
    std::vector<std::vector<double>> est(4);
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
      SamplingPlan plan;
      plan.seed = seed;
      plan.omega_tm = omega;
      const ChainResult c = s_dr_gee2(d, ModelSpec::canonical_tm(), f.psee, f.omee, plan);
      REQUIRE(c.theta.finite());
      const Eigen::VectorXd v = c.theta.stacked();
      for (int k = 0; k < 4; ++k) est[static_cast<std::size_t>(k)].push_back(v[k]);
    }
    double total = 0;
    for (const auto& e : est) total += sd(e);
    CHECK(total < prev);
    prev = total;
  }
}
