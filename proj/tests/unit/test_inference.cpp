#include "iccgee/errors.hpp"
#include "iccgee/inference.hpp"
#include "iccgee/simgen.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace iccgee;

TEST_CASE("wald statistics") {
  const auto zero = wald(0.0, 0.3);
  CHECK(zero.statistic == 0.0);
  CHECK(zero.p_value == doctest::Approx(1.0));
  CHECK_FALSE(zero.flagged);
  const auto cc = wald(0.0349, 0.0245, 1000L);
  CHECK(std::fabs(cc.statistic) == doctest::Approx(45.05).epsilon(1e-3));
  CHECK(cc.flagged);
  CHECK(wald(1.96, 1.0).p_value == doctest::Approx(0.05).epsilon(1e-3));
  CHECK_THROWS_AS(wald(1.0, 0.0), DomainError);
  const auto ci = wald_interval(1.0, 0.5);
  CHECK(ci.lower == doctest::Approx(1.0 - 1.959964 * 0.5).epsilon(1e-6));
  CHECK(ci.upper == doctest::Approx(1.0 + 1.959964 * 0.5).epsilon(1e-6));
}

TEST_CASE("sandwich collapses to identity over I") {
  // psi_i(theta) = s_i - theta over the four sign patterns: Delta = I, Gamma = -I
  Eigen::MatrixXd s2(4, 2);
  s2 << 1, 1, 1, -1, -1, 1, -1, -1;
  const PsiFn psi2 = [&](const Eigen::VectorXd& th) {
    Eigen::MatrixXd out = s2;
    out.rowwise() -= th.transpose();
    return out;
  };
  const auto r = sandwich_from_psi(psi2, Eigen::Vector2d::Zero());
  CHECK((r.gamma + Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((r.delta - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((r.covariance - 0.25 * Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);

  const PsiFn flat = [](const Eigen::VectorXd& th) {
    Eigen::MatrixXd out(3, 2);
    out.col(0).setConstant(1.0 - th[0]);
    out.col(1).setConstant(1.0 - th[0]);
    return out;
  };
  CHECK_THROWS_AS(sandwich_from_psi(flat, Eigen::Vector2d::Zero()), InferenceError);
}

TEST_CASE("sandwich SE for an iid Bernoulli intercept") {
  std::mt19937_64 rng(12);
  std::bernoulli_distribution b(0.35);
  std::vector<ClusterData> cl;
  const long I = 20000, n = 3;
  long ones = 0;
  for (long i = 0; i < I; ++i) {
    std::vector<std::optional<int>> y;
    for (long j = 0; j < n; ++j) {
      const int v = b(rng);
      ones += v;
      y.emplace_back(v);
    }
    cl.emplace_back(std::to_string(i), static_cast<int>(i % 2), Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Zero(n, 1), y);
  }
  const Dataset d(cl);
  ModelSpec spec;
  spec.target = Target::om;
  spec.mean_treatment = false;
  spec.corr_treatment = false;
  spec.second_order = false;
  const FitResult f = fit_omee(d, spec);
  REQUIRE(f.converged);
  NuisanceProblem prob(d, spec);
  const auto s = sandwich_from_psi(
      [&](const Eigen::VectorXd& th) { return prob.psi(ParameterVector::from_stacked(spec, th)); },
      f.theta.stacked());
  const double N = static_cast<double>(I * n);
  const double p = ones / N;
  const double analytic = std::sqrt(1.0 / (N * p * (1 - p)));
  CHECK(std::sqrt(s.covariance(0, 0)) == doctest::Approx(analytic).epsilon(0.02));
}

TEST_CASE("pipeline sandwich on a DR fit") {
  GenerationConfig g;
  g.clusters = 150;
  g.n_min = 10;
  g.n_max = 20;
  g.seed = 4;
  const Dataset d = generate_dataset(g, 0);
  PipelineOptions o;
  o.choice.kind = EstimatorKind::doubly_robust;
  o.psm = ModelSpec::main_effects(Target::psm, 1, 3);
  o.om = ModelSpec::main_effects(Target::om, 1, 3);
  const PipelineResult full = run_pipeline(d, o);
  REQUIRE(full.sandwich);
  const Eigen::MatrixXd& cov = full.sandwich->covariance;
  CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10 * cov.trace());
  CHECK(full.sandwich->names.front() == "TM.(Intercept)");
  CHECK(full.tm_se.size() == 4);
  CHECK(full.psee);
  CHECK(full.omee);

  o.naive_sandwich = true;
  const PipelineResult naive = run_pipeline(d, o);
  const Eigen::VectorXd rel = ((naive.tm_se - full.tm_se).array() / full.tm_se.array()).abs();
  CHECK(rel.maxCoeff() > 0.01);
  CHECK((naive.tm.theta.stacked() - full.tm.theta.stacked()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pipeline stages and failures") {
  GenerationConfig g;
  g.clusters = 80;
  g.n_min = 8;
  g.n_max = 12;
  const Dataset d = generate_dataset(g, 1);
  PipelineOptions o;
  o.psm = ModelSpec::main_effects(Target::psm, 1, 3);
  o.om = ModelSpec::main_effects(Target::om, 1, 3);
  for (auto k : {EstimatorKind::complete_case, EstimatorKind::ipw_g1, EstimatorKind::ipw_g2}) {
    o.choice.kind = k;
    const auto r = run_pipeline(d, o);
    CHECK(r.tm.converged);
    CHECK(r.psee.has_value() == (k != EstimatorKind::complete_case));
    CHECK_FALSE(r.omee.has_value());
    CHECK((r.tm_se.array() > 0).all());
  }
  o.choice.kind = EstimatorKind::ipw_g2;
  o.choice.solver = SolverKind::parallel_stochastic;
  CHECK_THROWS_AS(run_pipeline(d, o), ConfigError);

  o.choice.kind = EstimatorKind::doubly_robust;
  o.choice.solver = SolverKind::stochastic;
  const auto s = run_pipeline(d, o);
  CHECK(s.tm.theta.finite());
  CHECK(s.chains.size() == 1);

  // constant missingness -> the PSM stage fails with its stage tag
  std::vector<ClusterData> obs;
  for (const auto& c : d.clusters()) {
    std::vector<std::optional<int>> y;
    for (long j = 0; j < c.n(); ++j) y.push_back(c.y(j).value_or(1));
    obs.emplace_back(c.id(), c.a(), c.z(), c.x(), y);
  }
  o.choice.solver = SolverKind::deterministic;
  try {
    run_pipeline(Dataset(obs), o);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::psm);
  }
}
