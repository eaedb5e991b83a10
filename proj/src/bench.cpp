#include "iccgee/bench.hpp"

#include "iccgee/core_math.hpp"
#include "iccgee/errors.hpp"
#include "iccgee/estimators.hpp"
#include "kernels.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

namespace iccgee {

const char* structure_name(Structure s) {
  switch (s) {
    case Structure::arbitrary: return "arbitrary";
    case Structure::equicorrelated: return "equicorrelated";
    case Structure::independence: return "independence";
    case Structure::identity: return "identity";
  }
  return "?";
}

const char* portion_name(Portion p) {
  switch (p) {
    case Portion::gee1: return "gee1";
    case Portion::gee2: return "gee2";
    case Portion::overall: return "overall";
  }
  return "?";
}

const char* bench_solver_name(BenchSolver s) { return s == BenchSolver::full ? "full" : "stochastic"; }

Structure parse_structure(const std::string& s) {
  if (s == "arbitrary") return Structure::arbitrary;
  if (s == "equicorrelated" || s == "exchangeable") return Structure::equicorrelated;
  if (s == "independence") return Structure::independence;
  if (s == "identity") return Structure::identity;
  throw ConfigError("unknown covariance structure '" + s + "'");
}

void BenchConfig::validate() const {
  if (sizes.size() < 3) throw ConfigError("bench: the size grid needs at least 3 points");
  for (long n : sizes) {
    if (n < 2) throw ConfigError("bench: cluster sizes must be >= 2");
  }
  if (repetitions < 1) throw ConfigError("bench: repetitions must be positive");
  if (upsilon < 2) throw ConfigError("bench: upsilon must be >= 2");
  if (clusters < 1) throw ConfigError("bench: need at least one cluster");
  if (structures.empty()) throw ConfigError("bench: no structures requested");
}

double BenchResult::slope(Structure s, BenchSolver v, Portion p) const {
  for (const auto& b : slopes) {
    if (b.structure == s && b.solver == v && b.portion == p) return b.slope;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double loglog_slope(const std::vector<double>& n, const std::vector<double>& t) {
  if (n.size() != t.size() || n.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  const double k = static_cast<double>(n.size());
  for (std::size_t i = 0; i < n.size(); ++i) {
    mx += std::log(n[i]) / k;
    my += std::log(t[i]) / k;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double dx = std::log(n[i]) - mx;
    sxy += dx * (std::log(t[i]) - my);
    sxx += dx * dx;
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

namespace {

using Clock = std::chrono::steady_clock;
constexpr long kP = 4;   // mean covariates including the intercept
constexpr long kQ = 3;   // pair covariates

// A synthetic cluster. Means, variances and pair rows are evaluated only for
// the indices a kernel touches.
struct BenchCluster {
  Eigen::MatrixXd x;        // n x kP
  Eigen::VectorXd y;
  Eigen::VectorXd beta;
  double rho = 0.1;
  std::vector<int> all;

  long n() const { return x.rows(); }
  double mu(int j) const { return expit(x.row(j).dot(beta)); }
  Eigen::Matrix<double, kQ, 1> pair_row(int j, int k) const {
    Eigen::Matrix<double, kQ, 1> d;
    d << 1.0, x(j, 1) * x(k, 1), x(j, 2) + x(k, 2);
    return d * (1.0 - rho * rho);
  }
};

BenchCluster make_cluster(long n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  BenchCluster c;
  c.x.resize(n, kP);
  for (long j = 0; j < n; ++j) {
    c.x(j, 0) = 1.0;
    for (long k = 1; k < kP; ++k) c.x(j, k) = 0.5 * normal(rng);
  }
  c.y.resize(n);
  for (long j = 0; j < n; ++j) c.y[j] = coin(rng) ? 1.0 : 0.0;
  c.beta = Eigen::VectorXd::Constant(kP, 0.1);
  c.all.resize(static_cast<std::size_t>(n));
  for (long j = 0; j < n; ++j) c.all[static_cast<std::size_t>(j)] = static_cast<int>(j);
  return c;
}

struct Sample {
  std::vector<int> members;
  double f1 = 1.0, f2 = 1.0;
};

Sample draw(const BenchCluster& c, BenchSolver solver, long upsilon, std::mt19937_64& rng) {
  Sample s;
  if (solver == BenchSolver::full) {
    s.members = c.all;
    return s;
  }
  const long n = c.n();
  const long v = std::min(upsilon, n);
  s.members = srswor(c.all, v, rng);
  s.f1 = static_cast<double>(n) / v;
  s.f2 = static_cast<double>(n * (n - 1)) / static_cast<double>(v * (v - 1));
  return s;
}

// --- GEE1 portion ----------------------------------------------------------

void gee1_arbitrary(const BenchCluster& c, const Sample& s, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
  // AR(1) working correlation refactorized at every iteration.
  const long n = c.n();
  Eigen::VectorXd mu(n), su(n);
  for (long j = 0; j < n; ++j) {
    mu[j] = c.mu(static_cast<int>(j));
    su[j] = std::sqrt(mu[j] * (1.0 - mu[j]));
  }
  Eigen::MatrixXd v(n, n);
  for (long j = 0; j < n; ++j) {
    for (long k = 0; k < n; ++k) v(j, k) = su[j] * su[k] * std::pow(c.rho, std::abs(j - k));
  }
  Eigen::MatrixXd d = su.array().square().matrix().asDiagonal() * c.x;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  for (int j : s.members) w[j] = s.f1;
  Eigen::MatrixXd rhs(n, kP + 1);
  rhs.leftCols(kP) = w.asDiagonal() * d;
  rhs.col(kP) = w.cwiseProduct(c.y - mu);
  const Eigen::MatrixXd sol = v.llt().solve(rhs);
  g.noalias() += d.transpose() * sol.col(kP);
  h.noalias() += d.transpose() * sol.leftCols(kP);
}

void gee1_equicorrelated(const BenchCluster& c, const Sample& s, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
  const long n = c.n();
  Eigen::VectorXd su(n);
  Eigen::VectorXd t = Eigen::VectorXd::Zero(kP);
  for (long j = 0; j < n; ++j) {
    const double m = c.mu(static_cast<int>(j));
    su[j] = std::sqrt(m * (1.0 - m));
    t.noalias() += su[j] * c.x.row(j).transpose();
  }
  detail::gee1_equicorrelated(
      n, c.rho, t, s.members, [&](int j) { return c.x.row(j).transpose(); },
      [&](int j) { return su[j]; }, [&](int) { return s.f1; },
      [&](int j) { return c.y[j] - c.mu(j); }, g, &h);
}

// Independence: V = U. Identity: V = I.
void gee1_diagonal(const BenchCluster& c, const Sample& s, bool identity, Eigen::VectorXd& g,
                   Eigen::MatrixXd& h) {
  for (int j : s.members) {
    const double m = c.mu(j);
    const double u = m * (1.0 - m);
    const auto xj = c.x.row(j).transpose();
    const double hw = identity ? s.f1 * u * u : s.f1 * u;
    g.noalias() += (identity ? s.f1 * u * (c.y[j] - m) : s.f1 * (c.y[j] - m)) * xj;
    for (long r = 0; r < kP; ++r) {
      for (long k = 0; k < kP; ++k) h(r, k) += hw * xj[r] * xj[k];
    }
  }
}

// --- GEE2 portion ----------------------------------------------------------

double pair_resid(const BenchCluster& c, int j, int k, double mj, double mk) {
  return (c.y[j] - mj) * (c.y[k] - mk) / std::sqrt(mj * (1 - mj) * mk * (1 - mk)) - c.rho;
}

void gee2_arbitrary(const BenchCluster& c, const Sample& s, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
  const long n = c.n();
  const long p = pair_count(n);
  Eigen::VectorXd mu(n);
  for (long j = 0; j < n; ++j) mu[j] = c.mu(static_cast<int>(j));
  Eigen::MatrixXd d(p, kQ);
  Eigen::VectorXd r(p);
  for (long j = 0, q = 0; j < n; ++j) {
    for (long k = j + 1; k < n; ++k, ++q) {
      d.row(q) = c.pair_row(static_cast<int>(j), static_cast<int>(k)).transpose();
      r[q] = pair_resid(c, static_cast<int>(j), static_cast<int>(k), mu[j], mu[k]);
    }
  }
  // Exponential-decay pair covariance, refactorized at every iteration.
  Eigen::MatrixXd v(p, p);
  for (long a = 0; a < p; ++a) {
    for (long b = 0; b < p; ++b) v(a, b) = std::exp(-std::abs(a - b) / 5.0);
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
  for (std::size_t a = 0; a < s.members.size(); ++a) {
    for (std::size_t b = a + 1; b < s.members.size(); ++b) {
      w[pair_position(n, s.members[a], s.members[b])] = s.f2;
    }
  }
  Eigen::MatrixXd rhs(p, kQ + 1);
  rhs.leftCols(kQ) = w.asDiagonal() * d;
  rhs.col(kQ) = w.cwiseProduct(r);
  const Eigen::MatrixXd sol = v.llt().solve(rhs);
  g.noalias() += d.transpose() * sol.col(kQ);
  h.noalias() += d.transpose() * sol.leftCols(kQ);
}

void gee2_equicorrelated(const BenchCluster& c, const Sample& s, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
  // Pair covariance (1 - tau) I + tau 11' over every pair of the cluster; the
  // column sum of D runs over all pairs whatever the sample.
  const long n = c.n();
  const double tau = 0.1;
  const auto coef = equicorrelation_inverse(pair_count(n), tau);
  Eigen::Matrix<double, kQ, 1> dsum = Eigen::Matrix<double, kQ, 1>::Zero();
  for (long j = 0; j < n; ++j) {
    for (long k = j + 1; k < n; ++k) dsum += c.pair_row(static_cast<int>(j), static_cast<int>(k));
  }
  Eigen::Matrix<double, kQ, 1> gd = Eigen::Matrix<double, kQ, 1>::Zero(), wd = gd;
  Eigen::Matrix<double, kQ, kQ> hdd = Eigen::Matrix<double, kQ, kQ>::Zero();
  double wr = 0.0;
  std::vector<double> mu(s.members.size());
  for (std::size_t a = 0; a < s.members.size(); ++a) mu[a] = c.mu(s.members[a]);
  for (std::size_t a = 0; a < s.members.size(); ++a) {
    for (std::size_t b = a + 1; b < s.members.size(); ++b) {
      const auto d = c.pair_row(s.members[a], s.members[b]);
      const double r = pair_resid(c, s.members[a], s.members[b], mu[a], mu[b]);
      gd += s.f2 * r * d;
      wd += s.f2 * d;
      hdd += s.f2 * d * d.transpose();
      wr += s.f2 * r;
    }
  }
  g.noalias() += coef.a * gd + coef.b * wr * dsum;
  h.noalias() += coef.a * hdd + coef.b * dsum * wd.transpose();
}

void gee2_diagonal(const BenchCluster& c, const Sample& s, bool identity, Eigen::VectorXd& g,
                   Eigen::MatrixXd& h) {
  std::vector<double> mu(s.members.size());
  for (std::size_t a = 0; a < s.members.size(); ++a) mu[a] = c.mu(s.members[a]);
  for (std::size_t a = 0; a < s.members.size(); ++a) {
    for (std::size_t b = a + 1; b < s.members.size(); ++b) {
      const auto d = c.pair_row(s.members[a], s.members[b]);
      const double r = pair_resid(c, s.members[a], s.members[b], mu[a], mu[b]);
      // Independence scales each pair by the inverse of a mean-dependent variance.
      const double vinv = identity ? 1.0 : 1.0 / (1.0 + 0.1 * (mu[a] + mu[b]));
      g.noalias() += (s.f2 * vinv * r) * d;
      h.noalias() += (s.f2 * vinv) * d * d.transpose();
    }
  }
}

struct Combo {
  Structure structure;
  BenchSolver solver;
  Portion portion;
};

void iteration(const Combo& cb, const std::vector<BenchCluster>& clusters, long upsilon,
               std::mt19937_64& rng, Eigen::VectorXd& g, Eigen::MatrixXd& h) {
  // Accumulators live across clusters so the timings carry no allocator cost.
  thread_local Eigen::VectorXd g1(kP), g2(kQ);
  thread_local Eigen::MatrixXd h1(kP, kP), h2(kQ, kQ);
  for (const auto& c : clusters) {
    const Sample s = draw(c, cb.solver, upsilon, rng);
    const bool gee1 = cb.portion != Portion::gee2;
    const bool gee2 = cb.portion != Portion::gee1;
    g1.setZero();
    h1.setZero();
    g2.setZero();
    h2.setZero();
    if (cb.portion == Portion::overall) {
      // Equicorrelated GEE1 with identity GEE2.
      gee1_equicorrelated(c, s, g1, h1);
      gee2_diagonal(c, s, true, g2, h2);
    } else {
      switch (cb.structure) {
        case Structure::arbitrary:
          if (gee1) gee1_arbitrary(c, s, g1, h1);
          if (gee2) gee2_arbitrary(c, s, g2, h2);
          break;
        case Structure::equicorrelated:
          if (gee1) gee1_equicorrelated(c, s, g1, h1);
          if (gee2) gee2_equicorrelated(c, s, g2, h2);
          break;
        case Structure::independence:
        case Structure::identity:
          if (gee1) gee1_diagonal(c, s, cb.structure == Structure::identity, g1, h1);
          if (gee2) gee2_diagonal(c, s, cb.structure == Structure::identity, g2, h2);
          break;
      }
    }
    g[0] += g1.sum() + g2.sum();
    h(0, 0) += h1.sum() + h2.sum();
  }
}

double time_combo(const Combo& cb, const std::vector<BenchCluster>& clusters, const BenchConfig& cfg,
                  std::mt19937_64& rng) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(1);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(1, 1);
  auto once = [&](long count) {
    const auto t0 = Clock::now();
    for (long k = 0; k < count; ++k) iteration(cb, clusters, cfg.upsilon, rng, g, h);
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };
  const double first = once(1);
  const long count = std::max(1L, static_cast<long>(std::ceil(cfg.min_sample_seconds / std::max(first, 1e-9))));
  for (int w = 0; w < cfg.warmup; ++w) once(count);
  std::vector<double> samples;
  for (int r = 0; r < cfg.repetitions; ++r) samples.push_back(once(count) / static_cast<double>(count));
  std::nth_element(samples.begin(), samples.begin() + static_cast<long>(samples.size() / 2), samples.end());
  // Keeps the accumulators observable so the loops are not elided.
  if (!std::isfinite(g[0] + h(0, 0))) throw DomainError("bench: non-finite kernel output");
  return samples[samples.size() / 2];
}

}  // namespace

BenchResult run_bench(const BenchConfig& config) {
  config.validate();
  std::vector<Combo> combos;
  for (Structure s : config.structures) {
    for (BenchSolver v : {BenchSolver::full, BenchSolver::stochastic}) {
      for (Portion p : {Portion::gee1, Portion::gee2}) combos.push_back({s, v, p});
    }
  }
  for (BenchSolver v : {BenchSolver::full, BenchSolver::stochastic}) {
    combos.push_back({Structure::equicorrelated, v, Portion::overall});
  }

  BenchResult out;
  std::mt19937_64 rng(config.seed);
  std::vector<std::vector<BenchCluster>> data;
  for (long n : config.sizes) {
    std::vector<BenchCluster> cl;
    for (int i = 0; i < config.clusters; ++i) cl.push_back(make_cluster(n, rng));
    data.push_back(std::move(cl));
  }
  for (const auto& cb : combos) {
    std::vector<double> ns, ts;
    for (std::size_t k = 0; k < config.sizes.size(); ++k) {
      const long n = config.sizes[k];
      BenchRow row{cb.structure, cb.solver, cb.portion, n, 0.0, false};
      if (cb.structure == Structure::arbitrary && cb.portion == Portion::gee2 &&
          pair_count(n) > config.arbitrary_pair_limit) {
        row.skipped = true;
        row.seconds = std::numeric_limits<double>::quiet_NaN();
      } else {
        row.seconds = time_combo(cb, data[k], config, rng);
        ns.push_back(static_cast<double>(n));
        ts.push_back(row.seconds);
      }
      out.rows.push_back(row);
    }
    BenchSlope sl;
    sl.structure = cb.structure;
    sl.solver = cb.solver;
    sl.portion = cb.portion;
    sl.points = static_cast<int>(ns.size());
    sl.slope = ns.size() >= 2 ? loglog_slope(ns, ts) : std::numeric_limits<double>::quiet_NaN();
    sl.label = std::string(bench_solver_name(cb.solver)) + "/" +
               (cb.portion == Portion::overall ? "equicorrelated+identity" : structure_name(cb.structure)) +
               "/" + portion_name(cb.portion);
    out.slopes.push_back(sl);
  }
  return out;
}

}  // namespace iccgee
