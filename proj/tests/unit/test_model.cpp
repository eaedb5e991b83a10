#include "iccgee/errors.hpp"
#include "iccgee/model.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace iccgee;

namespace {

ClusterData make_cluster(int a, long n, std::mt19937_64& rng, double miss = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd z(1);
  z << 80 + 60 * u(rng);
  Eigen::MatrixXd x(n, 2);
  for (long j = 0; j < n; ++j) x.row(j) << 20 + 40 * u(rng), u(rng);
  std::vector<std::optional<int>> y(static_cast<std::size_t>(n));
  for (auto& v : y) {
    if (u(rng) >= miss) v = u(rng) < 0.5 ? 1 : 0;
  }
  return ClusterData("c", a, z, x, y);
}

double expit_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("cluster data derives R from present outcomes") {
  Eigen::MatrixXd x(3, 1);
  x << 1, 2, 3;
  ClusterData c("k", 1, Eigen::VectorXd::Zero(1), x, {1, std::nullopt, 0});
  CHECK(c.observed(0));
  CHECK_FALSE(c.observed(1));
  CHECK(c.observed_indices() == std::vector<int>{0, 2});
  CHECK(c.y_filled()[1] == 0.0);
  CHECK_THROWS(ClusterData("k", 2, Eigen::VectorXd::Zero(1), x, {1, 1, 0}));
  CHECK_THROWS(ClusterData("k", 0, Eigen::VectorXd::Zero(1), x, {1, 2, 0}));
  CHECK_THROWS(ClusterData("k", 0, Eigen::VectorXd::Zero(1), x, {1, 0}));

  auto m = ClusterData::masked("k", 0, Eigen::VectorXd::Zero(1), x, {1, 1, 0}, {1, 0, 1});
  CHECK(m.y(0) == 1);
  CHECK_FALSE(m.y(1).has_value());
}

TEST_CASE("dataset treatment probability and arms") {
  std::mt19937_64 rng(1);
  std::vector<ClusterData> cl{make_cluster(1, 3, rng), make_cluster(0, 3, rng), make_cluster(1, 2, rng),
                              make_cluster(1, 4, rng)};
  Dataset d(cl);
  CHECK(d.p_a() == doctest::Approx(0.75));
  CHECK(d.subjects() == 12);
  d.set_p_a(0.5);
  CHECK(d.p_a() == 0.5);
  CHECK_NOTHROW(d.require_both_arms());
  Dataset one({make_cluster(1, 3, rng)});
  CHECK_THROWS_AS(one.require_both_arms(), SeparationError);
}

TEST_CASE("canonical TM predictions") {
  std::mt19937_64 rng(2);
  const auto tm = ModelSpec::canonical_tm();
  CHECK(tm.canonical());
  const auto c1 = make_cluster(1, 4, rng);
  const auto c0 = make_cluster(0, 4, rng);
  auto zero = ParameterVector::zeros(tm);
  CHECK(predict_mean(tm, zero, c1).isApprox(Eigen::VectorXd::Constant(4, 0.5)));
  CHECK(predict_corr(tm, zero, c1) == 0.0);

  ParameterVector th;
  th.beta = Eigen::Vector2d(0.1413, 0.1808);
  th.alpha = Eigen::Vector2d(0.1238, 0.0755);
  CHECK(predict_mean(tm, th, c1)[0] == doctest::Approx(0.5798).epsilon(1e-4));
  CHECK(predict_corr(tm, th, c0) == doctest::Approx(0.1232).epsilon(1e-3));
}

TEST_CASE("full-spec predictions match scalar evaluation") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 0.004);
  const auto spec = ModelSpec::full(Target::om, 1, 2);
  CHECK(spec.mean_dim() == 8);
  CHECK(spec.corr_dim() == 4);
  for (int rep = 0; rep < 20; ++rep) {
    const auto c = make_cluster(rep % 2, 5, rng);
    ParameterVector th = ParameterVector::zeros(spec);
    for (long k = 0; k < th.beta.size(); ++k) th.beta[k] = nd(rng);
    for (long k = 0; k < th.alpha.size(); ++k) th.alpha[k] = nd(rng);
    const double a = c.a(), z = c.z()[0];
    const auto mu = predict_mean(spec, th, c);
    for (long j = 0; j < 5; ++j) {
      const double x1 = c.x()(j, 0), x2 = c.x()(j, 1);
      const auto& b = th.beta;
      const double lin = b[0] + b[1] * a + b[2] * z + b[3] * x1 + b[4] * x2 + b[5] * a * z + b[6] * a * x1 + b[7] * a * x2;
      CHECK(std::fabs(mu[j] - expit_ref(lin)) < 1e-12);
    }
    const auto& al = th.alpha;
    CHECK(std::fabs(predict_corr(spec, th, c) - std::tanh(al[0] + al[1] * a + al[2] * z + al[3] * a * z)) < 1e-12);
  }
  ParameterVector huge = ParameterVector::zeros(spec);
  huge.beta[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(predict_mean(spec, huge, make_cluster(0, 2, rng)), OverflowError);
}

TEST_CASE("standardized residuals") {
  auto r = standardized_residuals({1, 1}, 0.5, pair_enumerate(2));
  CHECK(r.values[0] == doctest::Approx(1.0));
  r = standardized_residuals({1, 0}, 0.5, pair_enumerate(2));
  CHECK(r.values[0] == doctest::Approx(-1.0));
  r = standardized_residuals({1, 1, 0}, 0.5, pair_enumerate(3));
  CHECK(r.values[0] == doctest::Approx(1.0));
  CHECK(r.values[1] == doctest::Approx(-1.0));
  CHECK(r.values[2] == doctest::Approx(-1.0));
  r = standardized_residuals({1, std::nullopt, 0}, 0.5, pair_enumerate(3));
  CHECK(r.usable == std::vector<unsigned char>{0, 1, 0});
  CHECK_THROWS_AS(standardized_residuals({1, 0}, 1.0, pair_enumerate(2)), DomainError);
}

TEST_CASE("rho dagger") {
  CHECK(rho_dagger(0.3, 0.3, 0.2, 0.3) == doctest::Approx(0.2));
  const double d = 0.1, ps = 0.4;
  CHECK(rho_dagger(ps + d, ps - d, 0.0, ps) == doctest::Approx(-d * d / (ps * (1 - ps))));
  CHECK_THROWS_AS(rho_dagger(0.0, 0.3, 0.1, 0.3), DomainError);
  CHECK_THROWS_AS(rho_dagger(0.3, 0.3, 1.0, 0.3), DomainError);

  // joint-Bernoulli simulation
  const double p1 = 0.35, p2 = 0.6, rho = 0.25, pstar = 0.45;
  const double p11 = p1 * p2 + rho * std::sqrt(p1 * (1 - p1) * p2 * (1 - p2));
  const double probs[4] = {p11, p1 - p11, p2 - p11, 1 - p1 - p2 + p11};
  std::mt19937_64 rng(8);
  std::discrete_distribution<int> joint(probs, probs + 4);
  const long draws = 1000000;
  double s = 0.0, s2 = 0.0;
  for (long k = 0; k < draws; ++k) {
    const int cell = joint(rng);
    const double y1 = (cell == 0 || cell == 1) ? 1 : 0;
    const double y2 = (cell == 0 || cell == 2) ? 1 : 0;
    const double v = (y1 - pstar) * (y2 - pstar) / (pstar * (1 - pstar));
    s += v;
    s2 += v * v;
  }
  const double mean = s / draws;
  const double se = std::sqrt((s2 / draws - mean * mean) / draws);
  CHECK(std::fabs(mean - rho_dagger(p1, p2, rho, pstar)) < 3 * se);
}

TEST_CASE("jacobian matches central differences") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd(0.0, 0.03);
  const auto spec = ModelSpec::full(Target::psm, 1, 2);
  for (int rep = 0; rep < 5; ++rep) {
    const auto c = make_cluster(rep % 2, 4, rng);
    ParameterVector th = ParameterVector::zeros(spec);
    for (long k = 0; k < th.beta.size(); ++k) th.beta[k] = nd(rng);
    for (long k = 0; k < th.alpha.size(); ++k) th.alpha[k] = nd(rng);
    const Jacobian jac = jacobian(spec, th, c);
    REQUIRE(jac.beta.rows() == 4);
    REQUIRE(jac.alpha.rows() == 6);
    for (long k = 0; k < th.beta.size(); ++k) {
      const double h = 1e-6 * std::max(1.0, std::fabs(th.beta[k]));
      ParameterVector p = th, m = th;
      p.beta[k] += h;
      m.beta[k] -= h;
      const Eigen::VectorXd fd = (predict_mean(spec, p, c) - predict_mean(spec, m, c)) / (2 * h);
      for (long j = 0; j < 4; ++j) CHECK(fd[j] == doctest::Approx(jac.beta(j, k)).epsilon(1e-6).scale(1e-3));
    }
    for (long k = 0; k < th.alpha.size(); ++k) {
      const double h = 1e-6;
      ParameterVector p = th, m = th;
      p.alpha[k] += h;
      m.alpha[k] -= h;
      const double fd = (predict_corr(spec, p, c) - predict_corr(spec, m, c)) / (2 * h);
      for (long r = 0; r < 6; ++r) CHECK(fd == doctest::Approx(jac.alpha(r, k)).epsilon(1e-6).scale(1e-3));
    }
  }
  // scalar derivatives at zero
  const auto tm = ModelSpec::canonical_tm();
  const auto c = make_cluster(0, 2, rng);
  const auto j0 = jacobian(tm, ParameterVector::zeros(tm), c);
  CHECK(j0.beta(0, 0) == doctest::Approx(0.25));
  CHECK(j0.alpha(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("block working covariance") {
  Eigen::VectorXd u(4);
  u << 0.2, 0.15, 0.24, 0.1;
  const auto ind = working_covariance(u, 0.0);
  const Eigen::MatrixXd d0 = ind.dense();
  CHECK(d0.topLeftCorner(4, 4).isApprox(Eigen::MatrixXd(u.asDiagonal())));

  const auto v = working_covariance(u, 0.2);
  CHECK(v.pair_dim() == 6);
  const Eigen::MatrixXd dense = v.dense();
  CHECK(dense.rows() == 10);
  CHECK(dense.bottomRightCorner(6, 6).isApprox(Eigen::MatrixXd::Identity(6, 6)));
  CHECK(dense.topRightCorner(4, 6).cwiseAbs().maxCoeff() == 0.0);
  Eigen::LLT<Eigen::MatrixXd> llt(dense);
  CHECK(llt.info() == Eigen::Success);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  Eigen::VectorXd r(10);
  for (long k = 0; k < 10; ++k) r[k] = nd(rng);
  CHECK((v.solve(r) - dense.ldlt().solve(r)).cwiseAbs().maxCoeff() < 1e-10);

  const auto one = working_covariance(Eigen::VectorXd::Constant(1, 0.21), 0.4);
  CHECK(one.pair_dim() == 0);
  CHECK(one.dense()(0, 0) == doctest::Approx(0.21));
  CHECK_THROWS_AS(working_covariance(u, -0.5), SingularityError);
}
