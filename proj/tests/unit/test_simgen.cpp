#include "iccgee/errors.hpp"
#include "iccgee/simgen.hpp"
#include "iccgee/stochastic.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace iccgee;

namespace {

// One cluster with n subjects, x column 0 spread over [0, 1]; the other
// coefficients are zero so pi and rho are set by b0, bx and a0.
ClusterSkeleton flat_skeleton(long n) {
  ClusterSkeleton s;
  s.a = 0;
  s.z = Eigen::VectorXd::Zero(1);
  s.x = Eigen::MatrixXd::Zero(n, 3);
  for (long j = 0; j < n; ++j) s.x(j, 0) = n > 1 ? static_cast<double>(j) / (n - 1) : 0.0;
  return s;
}

Coefficients zero_coefficients() {
  Coefficients c;
  c.bz = c.bz_a = c.az = c.az_a = Eigen::VectorXd::Zero(1);
  c.bx = c.bx_a = Eigen::VectorXd::Zero(3);
  return c;
}

}  // namespace

TEST_CASE("quadrature rules") {
  const auto gl = gauss_legendre(8);
  CHECK(gl.weights.sum() == doctest::Approx(2.0).epsilon(1e-14));
  for (int k = 0; k <= 15; ++k) {
    double s = 0;
    for (long i = 0; i < 8; ++i) s += gl.weights[i] * std::pow(gl.nodes[i], k);
    const double exact = k % 2 ? 0.0 : 2.0 / (k + 1);
    CHECK(std::fabs(s - exact) < 1e-13);
  }
  const auto gh = gauss_hermite_normal(10);
  CHECK(gh.weights.sum() == doctest::Approx(1.0).epsilon(1e-14));
  const double moments[] = {1, 0, 1, 0, 3, 0, 15, 0, 105};
  for (int k = 0; k <= 8; ++k) {
    double s = 0;
    for (long i = 0; i < 10; ++i) s += gh.weights[i] * std::pow(gh.nodes[i], k);
    CHECK(std::fabs(s - moments[k]) < 1e-10 * std::max(1.0, moments[k]));
  }
  // 64-node rules stay accurate
  const auto g64 = gauss_legendre(64);
  double s = 0;
  for (long i = 0; i < 64; ++i) s += g64.weights[i] * std::exp(g64.nodes[i]);
  CHECK(std::fabs(s - (std::exp(1.0) - std::exp(-1.0))) < 1e-13);
}

TEST_CASE("covariate laws") {
  GenerationConfig g;
  g.clusters = 10000;
  auto rng = derive_rng(3, {0});
  const auto sk = generate_covariates(g, rng);
  double sum = 0, sq = 0, treated = 0;
  for (const auto& s : sk) {
    const double n = static_cast<double>(s.x.rows());
    sum += n;
    sq += n * n;
    treated += s.a;
    CHECK(s.x.rows() >= 80);
    CHECK(s.x.rows() <= 140);
    CHECK(s.x.col(0).minCoeff() >= 20.0);
    CHECK(s.x.col(0).maxCoeff() <= 60.0);
    CHECK(s.x.col(1).minCoeff() >= 1.0);
    CHECK(s.x.col(2).maxCoeff() <= 25.0);
    CHECK(s.z[0] == std::round(s.z[0]));
    CHECK(s.z[0] >= 80);
    CHECK(s.z[0] <= 140);
  }
  const double mean = sum / g.clusters;
  const double se = std::sqrt((sq / g.clusters - mean * mean) / g.clusters);
  CHECK(std::fabs(mean - 110.0) < 3 * se);
  CHECK(treated / g.clusters == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("datasets are deterministic in (seed, replicate)") {
  GenerationConfig g;
  g.clusters = 30;
  const Dataset a = generate_dataset(g, 4), b = generate_dataset(g, 4), c = generate_dataset(g, 5);
  REQUIRE(a.size() == b.size());
  bool same = true, differs = false;
  for (long i = 0; i < a.size(); ++i) {
    same = same && a[i].outcomes() == b[i].outcomes() && a[i].x() == b[i].x() && a[i].a() == b[i].a();
    if (i < c.size()) differs = differs || a[i].outcomes() != c[i].outcomes();
  }
  CHECK(same);
  CHECK(differs);
  CHECK(a[0].id() == "1");
  CHECK(a.p_a_override() == 0.5);

  g.missingness = false;
  const Dataset full = generate_dataset(g, 0);
  for (const auto& cl : full.clusters()) CHECK(cl.m() == cl.n());
}

TEST_CASE("Parzen effect moments and support") {
  std::mt19937_64 rng(17);
  CHECK(parzen_effect(-0.8, 0.9, 0.0, rng) == 0.0);
  CHECK_THROWS_AS(parzen_effect(-0.3, 0.3, 0.2, rng), FeasibilityError);
  CHECK_THROWS_AS(parzen_effect(-0.8, 0.9, -0.1, rng), FeasibilityError);
  const double lo = -0.9, hi = 0.7, rho = 0.25;
  const long draws = 400000;
  double s = 0, s2 = 0, s3 = 0, s4 = 0;
  for (long d = 0; d < draws; ++d) {
    const double x = parzen_effect(lo, hi, rho, rng);
    REQUIRE(x >= lo);
    REQUIRE(x <= hi);
    s += x;
    s2 += x * x;
    s3 += x * x * x;
    s4 += x * x * x * x;
  }
  const double m = s / draws, v = s2 / draws;
  CHECK(std::fabs(m) < 3 * std::sqrt(v / draws));
  CHECK(std::fabs(v - rho) < 3 * std::sqrt((s4 / draws - v * v) / draws));
  (void)s3;
  // boundary slack: two-point law with the same moments
  const double l2 = -0.5, u2 = 0.5;
  double t = 0, t2 = 0;
  for (long d = 0; d < 100000; ++d) {
    const double x = parzen_effect(l2, u2, 0.25, rng);
    CHECK((x == l2 || x == u2));
    t += x;
    t2 += x * x;
  }
  CHECK(std::fabs(t / 100000) < 3 * 0.5 / std::sqrt(100000.0));
  CHECK(t2 / 100000 == doctest::Approx(0.25));
}

TEST_CASE("Parzen generation attains nominal moments on a grid") {
  struct Point {
    double pi, rho, slope;
  };
  const Point grid[] = {{0.3, 0.05, 0.2}, {0.5, 0.2, 0.4}, {0.7, 0.1, -0.3}, {0.45, 0.3, 0.0}, {0.6, 0.01, 0.3}};
  std::mt19937_64 rng(99);
  const long n = 4, draws = 200000;
  for (const auto& pt : grid) {
    Coefficients c = zero_coefficients();
    c.b0 = std::log(pt.pi / (1 - pt.pi));
    c.bx[0] = pt.slope;
    c.a0 = std::atanh(pt.rho);
    const std::vector<ClusterSkeleton> sk{flat_skeleton(n)};
    const Eigen::VectorXd pi = cluster_pi(sk[0], c);
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd c1 = Eigen::MatrixXd::Zero(n, n), c2 = Eigen::MatrixXd::Zero(n, n);
    for (long d = 0; d < draws; ++d) {
      const auto y = parzen_generate(sk, c, rng)[0];
      Eigen::VectorXd st(n);
      for (long j = 0; j < n; ++j) {
        s1[j] += y[static_cast<std::size_t>(j)];
        st[j] = (y[static_cast<std::size_t>(j)] - pi[j]) / std::sqrt(pi[j] * (1 - pi[j]));
      }
      const Eigen::MatrixXd pr = st * st.transpose();
      c1 += pr;
      c2 += pr.cwiseProduct(pr);
    }
    for (long j = 0; j < n; ++j) {
      const double se = std::sqrt(pi[j] * (1 - pi[j]) / draws);
      CHECK(std::fabs(s1[j] / draws - pi[j]) < 3 * se);
      for (long k = j + 1; k < n; ++k) {
        const double m = c1(j, k) / draws;
        const double sem = std::sqrt((c2(j, k) / draws - m * m) / draws);
        CHECK(std::fabs(m - pt.rho) < 3 * sem);
      }
    }
  }
}

TEST_CASE("Parzen infeasibility names the cluster") {
  Coefficients c = zero_coefficients();
  c.bx[0] = 2.2;  // pi from 0.5 to 0.9
  c.a0 = std::atanh(0.8);
  const std::vector<ClusterSkeleton> sk{flat_skeleton(3), flat_skeleton(3)};
  std::mt19937_64 rng(1);
  try {
    parzen_generate(sk, c, rng);
    FAIL("expected a feasibility error");
  } catch (const FeasibilityError& e) {
    CHECK(std::string(e.what()).find("cluster 0") != std::string::npos);
  }
}

TEST_CASE("random intercept generation") {
  CHECK(random_intercept_sd(0) == doctest::Approx(1.0 / 3.0));
  CHECK(random_intercept_sd(1) == doctest::Approx(5.0 / 6.0));
  Coefficients c = zero_coefficients();
  c.b0 = 0.4;
  c.b_a = -0.2;
  auto sk = flat_skeleton(1);
  sk.a = 1;
  std::mt19937_64 rng(2);
  const long draws = 400000;
  long ones = 0;
  for (long d = 0; d < draws; ++d) ones += random_intercept_generate({sk}, c, rng)[0][0];
  // marginal over the normal intercept by Gauss-Hermite
  const auto gh = gauss_hermite_normal(40);
  double p = 0;
  for (long k = 0; k < 40; ++k) p += gh.weights[k] * expit(random_intercept_sd(1) * gh.nodes[k] + 0.2);
  CHECK(std::fabs(static_cast<double>(ones) / draws - p) < 3 * std::sqrt(p * (1 - p) / draws));
}

TEST_CASE("truth without covariate effects is the intercepts") {
  GenerationConfig g;
  g.y = zero_coefficients();
  g.y.b0 = 0.2;
  g.y.b_a = -0.3;
  g.y.a0 = 0.1;
  g.y.a_a = 0.15;
  const Truth t = marginal_truth(g);
  CHECK(t.beta0 == doctest::Approx(0.2).epsilon(1e-10));
  CHECK(t.beta_a == doctest::Approx(-0.3).epsilon(1e-10));
  CHECK(t.alpha0 == doctest::Approx(0.1).epsilon(1e-10));
  CHECK(t.alpha_a == doctest::Approx(0.15).epsilon(1e-10));
  CHECK(t.achieved_error < 1e-10);
}

TEST_CASE("truth mean part agrees with Monte Carlo") {
  GenerationConfig g;
  const Truth t = marginal_truth(g);
  g.clusters = 40000;
  g.n_min = g.n_max = 1;
  auto rng = derive_rng(8, {0});
  const auto sk = generate_covariates(g, rng);
  double s[2] = {0, 0}, s2[2] = {0, 0};
  long cnt[2] = {0, 0};
  for (const auto& c : sk) {
    const double p = cluster_pi(c, g.y)[0];
    s[c.a] += p;
    s2[c.a] += p * p;
    ++cnt[c.a];
  }
  for (int a = 0; a < 2; ++a) {
    const double m = s[a] / cnt[a];
    const double se = std::sqrt((s2[a] / cnt[a] - m * m) / cnt[a]);
    const double want = expit(t.beta0 + a * t.beta_a);
    CHECK(std::fabs(m - want) < 3 * se);
  }
}

TEST_CASE("replicate harness") {
  GenerationConfig g;
  g.clusters = 40;
  g.n_min = 6;
  g.n_max = 10;
  g.missingness = false;
  EstimatorRun cc;
  cc.label = "cc";
  cc.options.choice.kind = EstimatorKind::complete_case;
  const Eigen::Vector4d truth = marginal_truth(g).vec();
  const auto a = run_replicates(g, {cc}, 3, truth, 1);
  const auto b = run_replicates(g, {cc}, 3, truth, 2);
  REQUIRE(a.rows.size() == 1);
  CHECK(a.rows[0].runs == 3);
  CHECK(a.rows[0].converged == 3);
  CHECK(a.rows[0].bias == b.rows[0].bias);
  CHECK(a.records.size() == 3);
  CHECK(a.rows[0].bias.size() == 4);
}
