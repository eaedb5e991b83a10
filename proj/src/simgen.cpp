#include "iccgee/simgen.hpp"

#include "iccgee/core_math.hpp"
#include "iccgee/errors.hpp"
#include "iccgee/stochastic.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

namespace iccgee {

const char* method_name(GenerationMethod m) {
  return m == GenerationMethod::parzen ? "parzen" : "random_intercept";
}

GenerationMethod parse_method(const std::string& s) {
  if (s == "parzen") return GenerationMethod::parzen;
  if (s == "random_intercept" || s == "ri") return GenerationMethod::random_intercept;
  throw ConfigError("unknown generation method '" + s + "'");
}

Coefficients Coefficients::table2() {
  Coefficients c;
  c.b0 = 0.11;
  c.b_a = 0.67;
  c.bz = Eigen::VectorXd::Constant(1, 0.009);
  c.bz_a = Eigen::VectorXd::Constant(1, -0.018);
  c.bx = (Eigen::VectorXd(3) << -0.007, -0.020, -0.040).finished();
  c.bx_a = (Eigen::VectorXd(3) << 0.012, 0.030, 0.060).finished();
  c.a0 = -0.32;
  c.a_a = 0.96;
  c.az = Eigen::VectorXd::Constant(1, 0.004);
  c.az_a = Eigen::VectorXd::Constant(1, -0.008);
  return c;
}

void Coefficients::validate(long q, long m) const {
  if (bz.size() != q || bz_a.size() != q || az.size() != q || az_a.size() != q) {
    throw ConfigError("coefficients: cluster covariate slopes need " + std::to_string(q) + " entries");
  }
  if (bx.size() != m || bx_a.size() != m) {
    throw ConfigError("coefficients: subject covariate slopes need " + std::to_string(m) + " entries");
  }
}

double Coefficients::cluster_linear(int a, const Eigen::VectorXd& z) const {
  return b0 + b_a * a + (bz + bz_a * a).dot(z);
}

Eigen::VectorXd Coefficients::x_slopes(int a) const { return bx + bx_a * a; }

double Coefficients::mean_linear(int a, const Eigen::VectorXd& z,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  return cluster_linear(a, z) + x.dot(x_slopes(a).transpose());
}

double Coefficients::corr_linear(int a, const Eigen::VectorXd& z) const {
  return a0 + a_a * a + (az + az_a * a).dot(z);
}

void GenerationConfig::validate() const {
  if (clusters < 1) throw ConfigError("clusters must be positive");
  if (n_min < 1 || n_max < n_min) throw ConfigError("cluster size bounds invalid");
  if (x_min.size() != x_max.size()) throw ConfigError("x bounds differ in length");
  if ((x_max - x_min).minCoeff() < 0.0) throw ConfigError("x bounds reversed");
  if (z_min.size() != z_max.size()) throw ConfigError("z bounds differ in length");
  for (std::size_t k = 0; k < z_min.size(); ++k) {
    if (z_max[k] < z_min[k]) throw ConfigError("z bounds reversed");
  }
  if (!(p_a > 0.0 && p_a < 1.0)) throw ConfigError("p_a must lie in (0, 1)");
  y.validate(q(), m());
  r.validate(q(), m());
}

std::vector<ClusterSkeleton> generate_covariates(const GenerationConfig& config, std::mt19937_64& rng) {
  config.validate();
  std::uniform_int_distribution<long> size(config.n_min, config.n_max);
  std::bernoulli_distribution treat(config.p_a);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ClusterSkeleton> out(static_cast<std::size_t>(config.clusters));
  for (auto& c : out) {
    const long n = size(rng);
    c.a = treat(rng) ? 1 : 0;
    c.z.resize(config.q());
    for (long k = 0; k < config.q(); ++k) {
      std::uniform_int_distribution<long> zk(config.z_min[static_cast<std::size_t>(k)],
                                             config.z_max[static_cast<std::size_t>(k)]);
      c.z[k] = static_cast<double>(zk(rng));
    }
    c.x.resize(n, config.m());
    for (long j = 0; j < n; ++j) {
      for (long k = 0; k < config.m(); ++k) {
        c.x(j, k) = config.x_min[k] + (config.x_max[k] - config.x_min[k]) * unit(rng);
      }
    }
  }
  return out;
}

Eigen::VectorXd cluster_pi(const ClusterSkeleton& s, const Coefficients& c) {
  const Eigen::VectorXd eta = (s.x * c.x_slopes(s.a)).array() + c.cluster_linear(s.a, s.z);
  return eta.unaryExpr([](double v) { return expit(v); });
}

double cluster_rho(const ClusterSkeleton& s, const Coefficients& c) {
  return std::tanh(c.corr_linear(s.a, s.z));
}

ParzenBounds parzen_bounds(const Eigen::VectorXd& pi) {
  const double lo = pi.minCoeff(), hi = pi.maxCoeff();
  return {-std::sqrt(lo / (1.0 - lo)), std::sqrt((1.0 - hi) / hi)};
}

double parzen_effect(double lower, double upper, double rho, std::mt19937_64& rng) {
  if (std::abs(rho) < 1e-12) return 0.0;
  const double slack = -upper * lower - rho;
  if (rho < 0.0 || slack < 0.0) {
    throw FeasibilityError("Parzen effect infeasible: rho=" + std::to_string(rho) +
                           ", -UL=" + std::to_string(-upper * lower));
  }
  if (slack == 0.0) {
    // Two-point limit of the Beta on {L, U}.
    std::bernoulli_distribution at_upper(-lower / (upper - lower));
    return at_upper(rng) ? upper : lower;
  }
  const double width = upper - lower;
  const double first = -lower * slack / (width * rho);
  const double second = upper * slack / (width * rho);
  std::gamma_distribution<double> g1(first, 1.0), g2(second, 1.0);
  const double x1 = g1(rng), x2 = g2(rng);
  const double sum = x1 + x2;
  const double b = sum > 0.0 ? x1 / sum : (first / (first + second));
  return lower + width * b;
}

std::vector<std::vector<int>> parzen_generate(const std::vector<ClusterSkeleton>& skeleton,
                                              const Coefficients& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<int>> out;
  out.reserve(skeleton.size());
  for (std::size_t i = 0; i < skeleton.size(); ++i) {
    const auto& s = skeleton[i];
    const Eigen::VectorXd pi = cluster_pi(s, c);
    const double rho = cluster_rho(s, c);
    const auto b = parzen_bounds(pi);
    double xi = 0.0;
    try {
      xi = parzen_effect(b.lower, b.upper, rho, rng);
    } catch (const FeasibilityError& e) {
      throw FeasibilityError("cluster " + std::to_string(i) + ": " + e.what());
    }
    std::vector<int> y(static_cast<std::size_t>(pi.size()));
    for (long j = 0; j < pi.size(); ++j) {
      const double p = std::clamp(pi[j] + xi * std::sqrt(pi[j] * (1.0 - pi[j])), 0.0, 1.0);
      y[static_cast<std::size_t>(j)] = unit(rng) < p ? 1 : 0;
    }
    out.push_back(std::move(y));
  }
  return out;
}

double random_intercept_sd(int a) { return 1.0 / 3.0 + 0.5 * a; }

std::vector<std::vector<int>> random_intercept_generate(const std::vector<ClusterSkeleton>& skeleton,
                                                        const Coefficients& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<int>> out;
  out.reserve(skeleton.size());
  for (const auto& s : skeleton) {
    const double xi = random_intercept_sd(s.a) * normal(rng);
    const Eigen::VectorXd eta = (s.x * c.x_slopes(s.a)).array() + c.cluster_linear(s.a, s.z);
    std::vector<int> y(static_cast<std::size_t>(eta.size()));
    for (long j = 0; j < eta.size(); ++j) y[static_cast<std::size_t>(j)] = unit(rng) < expit(xi + eta[j]) ? 1 : 0;
    out.push_back(std::move(y));
  }
  return out;
}

namespace {

std::vector<std::vector<int>> generate_binary(GenerationMethod m, const std::vector<ClusterSkeleton>& s,
                                              const Coefficients& c, std::mt19937_64& rng) {
  return m == GenerationMethod::parzen ? parzen_generate(s, c, rng) : random_intercept_generate(s, c, rng);
}

}  // namespace

Dataset generate_dataset(const GenerationConfig& config, long replicate) {
  const auto rep = static_cast<std::uint64_t>(replicate);
  auto rng_cov = derive_rng(config.seed, {rep, 0});
  auto rng_y = derive_rng(config.seed, {rep, 1});
  auto rng_r = derive_rng(config.seed, {rep, 2});
  const auto skeleton = generate_covariates(config, rng_cov);
  const auto y = generate_binary(config.y_method, skeleton, config.y, rng_y);
  std::vector<std::vector<int>> r;
  if (config.missingness) {
    r = generate_binary(config.r_method, skeleton, config.r, rng_r);
  } else {
    for (const auto& yi : y) r.emplace_back(yi.size(), 1);
  }
  std::vector<ClusterData> clusters;
  clusters.reserve(skeleton.size());
  for (std::size_t i = 0; i < skeleton.size(); ++i) {
    clusters.push_back(ClusterData::masked(std::to_string(i + 1), skeleton[i].a, skeleton[i].z,
                                           skeleton[i].x, y[i], r[i]));
  }
  return Dataset(std::move(clusters), config.p_a);
}

// ---------------------------------------------------------------------------

namespace {

QuadratureRule golub_welsch(const Eigen::VectorXd& diag, const Eigen::VectorXd& off, double mass) {
  const long n = diag.size();
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  j.diagonal() = diag;
  for (long k = 0; k + 1 < n; ++k) j(k, k + 1) = j(k + 1, k) = off[k];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  QuadratureRule r;
  r.nodes = es.eigenvalues();
  r.weights = mass * es.eigenvectors().row(0).transpose().array().square();
  return r;
}

double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

// Average of expit(c + b t) for t uniform on [lo, hi].
double mean_expit_uniform(double c, double b, double lo, double hi) {
  const double t0 = c + b * lo, t1 = c + b * hi;
  if (std::abs(t1 - t0) < 1e-7) return expit(0.5 * (t0 + t1));
  return (softplus(t1) - softplus(t0)) / (t1 - t0);
}

// Expectation over independent uniform x of f(c + s'x). The last coordinate
// is integrated exactly for the expit integrand, the rest by Gauss-Legendre.
class UniformExpectation {
 public:
  UniformExpectation(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, int nodes)
      : lo_(lo), hi_(hi), rule_(gauss_legendre(nodes)) {}

  double expit_mean(double c, const Eigen::VectorXd& s) const {
    const long m = lo_.size();
    if (m == 0) return expit(c);
    return recurse(0, m - 1, c, s, [&](double shift) {
      return mean_expit_uniform(shift, s[m - 1], lo_[m - 1], hi_[m - 1]);
    });
  }

  double sd_mean(double c, const Eigen::VectorXd& s) const {
    const long m = lo_.size();
    auto f = [](double t) {
      const double p = expit(t);
      return std::sqrt(p * (1.0 - p));
    };
    if (m == 0) return f(c);
    return recurse(0, m, c, s, f);
  }

 private:
  template <class Leaf>
  double recurse(long k, long depth, double shift, const Eigen::VectorXd& s, const Leaf& leaf) const {
    if (k == depth) return leaf(shift);
    const double half = 0.5 * (hi_[k] - lo_[k]), mid = 0.5 * (hi_[k] + lo_[k]);
    double acc = 0.0;
    for (long t = 0; t < rule_.nodes.size(); ++t) {
      const double x = mid + half * rule_.nodes[t];
      acc += 0.5 * rule_.weights[t] * recurse(k + 1, depth, shift + s[k] * x, s, leaf);
    }
    return acc;
  }

  Eigen::VectorXd lo_, hi_;
  QuadratureRule rule_;
};

// All points of the discrete uniform z grid.
std::vector<Eigen::VectorXd> z_grid(const GenerationConfig& config) {
  std::vector<Eigen::VectorXd> out{Eigen::VectorXd(0)};
  for (long k = 0; k < config.q(); ++k) {
    std::vector<Eigen::VectorXd> next;
    for (const auto& base : out) {
      for (long v = config.z_min[static_cast<std::size_t>(k)]; v <= config.z_max[static_cast<std::size_t>(k)]; ++v) {
        Eigen::VectorXd z(base.size() + 1);
        z << base, static_cast<double>(v);
        next.push_back(std::move(z));
      }
    }
    out = std::move(next);
  }
  return out;
}

Eigen::Vector4d truth_at(const GenerationConfig& config, int nodes) {
  const UniformExpectation ex(config.x_min, config.x_max, nodes);
  const auto grid = z_grid(config);
  const double pz = 1.0 / static_cast<double>(grid.size());
  const Coefficients& c = config.y;
  const QuadratureRule gh = gauss_hermite_normal(nodes);
  double pi_star[2], rho_star[2];
  for (int a = 0; a < 2; ++a) {
    const Eigen::VectorXd s = c.x_slopes(a);
    if (config.y_method == GenerationMethod::parzen) {
      std::vector<double> m1, m2, rho;
      for (const auto& z : grid) {
        const double lin = c.cluster_linear(a, z);
        m1.push_back(ex.expit_mean(lin, s));
        m2.push_back(ex.sd_mean(lin, s));
        rho.push_back(std::tanh(c.corr_linear(a, z)));
      }
      const double p = pz * std::accumulate(m1.begin(), m1.end(), 0.0);
      double pair = 0.0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        pair += pz * ((m1[g] - p) * (m1[g] - p) + rho[g] * m2[g] * m2[g]);
      }
      pi_star[a] = p;
      rho_star[a] = pair / (p * (1.0 - p));
    } else {
      const double sd = random_intercept_sd(a);
      std::vector<Eigen::VectorXd> qk;
      double p = 0.0;
      for (const auto& z : grid) {
        const double lin = c.cluster_linear(a, z);
        Eigen::VectorXd q(gh.nodes.size());
        for (long k = 0; k < q.size(); ++k) q[k] = ex.expit_mean(lin + sd * gh.nodes[k], s);
        p += pz * gh.weights.dot(q);
        qk.push_back(std::move(q));
      }
      double pair = 0.0;
      for (const auto& q : qk) pair += pz * gh.weights.dot((q.array() - p).square().matrix());
      pi_star[a] = p;
      rho_star[a] = pair / (p * (1.0 - p));
    }
  }
  const double b0 = logit(pi_star[0]);
  const double a0 = fisher_z(rho_star[0]);
  return {b0, logit(pi_star[1]) - b0, a0, fisher_z(rho_star[1]) - a0};
}

}  // namespace

QuadratureRule gauss_legendre(int n) {
  if (n < 1) throw DomainError("gauss_legendre: need at least one node");
  Eigen::VectorXd off(std::max(n - 1, 0));
  for (int k = 1; k < n; ++k) off[k - 1] = k / std::sqrt(4.0 * k * k - 1.0);
  return golub_welsch(Eigen::VectorXd::Zero(n), off, 2.0);
}

QuadratureRule gauss_hermite_normal(int n) {
  if (n < 1) throw DomainError("gauss_hermite_normal: need at least one node");
  Eigen::VectorXd off(std::max(n - 1, 0));
  for (int k = 1; k < n; ++k) off[k - 1] = std::sqrt(static_cast<double>(k));
  return golub_welsch(Eigen::VectorXd::Zero(n), off, 1.0);
}

Truth marginal_truth(const GenerationConfig& config, const TruthOptions& options) {
  config.validate();
  const Eigen::Vector4d fine = truth_at(config, options.nodes);
  const Eigen::Vector4d coarse = truth_at(config, options.check_nodes);
  Truth t;
  t.beta0 = fine[0];
  t.beta_a = fine[1];
  t.alpha0 = fine[2];
  t.alpha_a = fine[3];
  t.achieved_error = (fine - coarse).cwiseAbs().maxCoeff();
  if (!fine.allFinite() || t.achieved_error > options.tolerance) {
    throw AccuracyError("quadrature did not reach the requested accuracy (change " +
                            std::to_string(t.achieved_error) + ")",
                        t.achieved_error);
  }
  return t;
}

// ---------------------------------------------------------------------------

namespace {

std::string nuisance_key(const ModelSpec& s, const PipelineOptions& o) {
  std::string k = target_name(s.target);
  for (const auto& n : s.mean_names()) k += "|" + n;
  k += "#";
  for (const auto& n : s.corr_names()) k += "|" + n;
  k += "@" + std::string(solver_name(o.choice.solver == SolverKind::deterministic ? SolverKind::deterministic
                                                                                 : SolverKind::stochastic));
  if (o.choice.solver != SolverKind::deterministic) {
    k += ":" + std::to_string(o.plan.pi_s) + ":" + std::to_string(o.plan.omega_nuisance);
  }
  return k;
}

struct NuisanceOutcome {
  std::optional<FitResult> fit;
  std::string error;
};

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

void run_one_replicate(const GenerationConfig& config, const std::vector<EstimatorRun>& runs, long rep,
                       std::vector<ReplicateRecord>& out) {
  Dataset data;
  std::string gen_error;
  try {
    data = generate_dataset(config, rep);
  } catch (const Error& e) {
    gen_error = e.what();
  }
  const std::uint64_t plan_seed = derive_rng(config.seed, {static_cast<std::uint64_t>(rep), 3})();
  std::map<std::string, NuisanceOutcome> cache;
  auto nuisance = [&](const ModelSpec& spec, const PipelineOptions& o, Stage stage) -> NuisanceOutcome& {
    const std::string key = nuisance_key(spec, o);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    NuisanceOutcome r;
    try {
      r.fit = stage == Stage::psm ? run_psm_stage(data, o) : run_om_stage(data, o);
    } catch (const Error& e) {
      r.error = e.what();
    }
    return cache.emplace(key, std::move(r)).first->second;
  };

  for (std::size_t e = 0; e < runs.size(); ++e) {
    ReplicateRecord rec;
    rec.replicate = rep;
    rec.estimator = e;
    if (!gen_error.empty()) {
      rec.error = "generation: " + gen_error;
      rec.tm_failed = true;
      out.push_back(std::move(rec));
      continue;
    }
    PipelineOptions o = runs[e].options;
    o.plan.seed = plan_seed;
    const FitResult* psee = nullptr;
    const FitResult* omee = nullptr;
    if (o.choice.needs_psm()) {
      auto& r = nuisance(resolve_psm(o, data), o, Stage::psm);
      if (r.fit) psee = &*r.fit; else { rec.psm_failed = true; rec.error = r.error; }
    }
    if (o.choice.needs_om()) {
      auto& r = nuisance(resolve_om(o, data), o, Stage::om);
      if (r.fit) omee = &*r.fit; else {
        rec.om_failed = true;
        rec.error += (rec.error.empty() ? "" : "; ") + r.error;
      }
    }
    if (!rec.psm_failed && !rec.om_failed) {
      try {
        const PipelineResult res = run_tm_stage(data, o, psee, omee);
        rec.ok = true;
        rec.theta = res.tm.theta.stacked();
        rec.se = res.tm_se.size() > 0 ? res.tm_se
                                       : Eigen::VectorXd::Constant(4, std::numeric_limits<double>::quiet_NaN());
        rec.seconds = res.seconds;
        rec.converged_chains = res.converged_chains;
      } catch (const InferenceError& ex) {
        rec.inference_failed = true;
        rec.error = ex.what();
      } catch (const Error& ex) {
        rec.tm_failed = true;
        rec.error = ex.what();
      }
    }
    out.push_back(std::move(rec));
  }
}

}  // namespace

ReplicateSummary run_replicates(const GenerationConfig& config, const std::vector<EstimatorRun>& runs,
                                long replicates, const Eigen::Vector4d& truth, int threads) {
  config.validate();
  if (replicates < 1) throw ConfigError("need at least one replicate");
  std::vector<std::vector<ReplicateRecord>> per(static_cast<std::size_t>(replicates));
  std::atomic<long> next{0};
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(replicates)));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (long r = next++; r < replicates; r = next++) {
        run_one_replicate(config, runs, r, per[static_cast<std::size_t>(r)]);
      }
    });
  }
  for (auto& t : pool) t.join();

  ReplicateSummary sum;
  sum.truth = truth;
  sum.replicates = replicates;
  for (auto& v : per) for (auto& r : v) sum.records.push_back(std::move(r));

  for (std::size_t e = 0; e < runs.size(); ++e) {
    EstimatorSummary row;
    row.label = runs[e].label;
    std::vector<Eigen::VectorXd> est, se;
    std::vector<double> t_psm, t_om, t_tm, t_inf;
    for (const auto& r : sum.records) {
      if (r.estimator != e) continue;
      ++row.runs;
      if (r.psm_failed && r.om_failed) ++row.both_nuisance;
      else if (r.psm_failed) ++row.psm_only;
      else if (r.om_failed) ++row.om_only;
      else if (r.tm_failed) ++row.tm_errors;
      else if (r.inference_failed) ++row.inference_errors;
      if (!r.ok) continue;
      ++row.converged;
      est.push_back(r.theta.head(4) - truth);
      se.push_back(r.se.head(4));
      t_psm.push_back(r.seconds.psm);
      t_om.push_back(r.seconds.om);
      t_tm.push_back(r.seconds.tm);
      t_inf.push_back(r.seconds.inference);
    }
    const long k = static_cast<long>(est.size());
    row.bias = row.replicate_se = row.sandwich_se = row.wald = row.coverage =
        Eigen::VectorXd::Constant(4, std::numeric_limits<double>::quiet_NaN());
    if (k > 0) {
      row.bias.setZero();
      for (long i = 0; i < k; ++i) row.bias += est[static_cast<std::size_t>(i)] / k;
      // Runs without a sandwich leave the SE columns NaN.
      long with_se = 0;
      Eigen::VectorXd se_sum = Eigen::VectorXd::Zero(4), covered = Eigen::VectorXd::Zero(4);
      for (long i = 0; i < k; ++i) {
        const auto& s_i = se[static_cast<std::size_t>(i)];
        if (!s_i.allFinite()) continue;
        ++with_se;
        se_sum += s_i;
        covered += (est[static_cast<std::size_t>(i)].array().abs() <= 1.959963984540054 * s_i.array())
                       .cast<double>()
                       .matrix();
      }
      if (with_se > 0) {
        row.sandwich_se = se_sum / with_se;
        row.coverage = covered / with_se;
      }
      if (k > 1) {
        row.replicate_se.setZero();
        for (const auto& d : est) row.replicate_se += ((d - row.bias).array().square().matrix()) / (k - 1);
        row.replicate_se = row.replicate_se.cwiseSqrt();
        for (int p = 0; p < 4; ++p) {
          if (row.replicate_se[p] > 0.0) row.wald[p] = wald(row.bias[p], row.replicate_se[p], k).statistic;
        }
      }
      auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      };
      row.mean_seconds = {mean(t_psm), mean(t_om), mean(t_tm), mean(t_inf)};
      row.median_seconds = {median(t_psm), median(t_om), median(t_tm), median(t_inf)};
    }
    sum.rows.push_back(std::move(row));
  }
  return sum;
}

}  // namespace iccgee
