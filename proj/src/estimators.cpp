#include "iccgee/estimators.hpp"

#include "iccgee/errors.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace iccgee {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<int> index_range(long n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Every observed pair's joint observation probability inside its Frechet
// bounds. In odds o = pi / (1 - pi) the pair (j, k) needs
// rho <= sqrt(min(o) / max(o)) when rho >= 0, and |rho| <= sqrt(o_j o_k) and
// |rho| <= 1 / sqrt(o_j o_k) when rho < 0, so only the extreme odds matter.
void check_pair_feasibility(const ClusterData& cl, const ClusterMoments& mom) {
  const auto& obs = cl.observed_indices();
  if (obs.size() < 2 || mom.rho == 0.0) return;
  std::vector<double> odds;
  odds.reserve(obs.size());
  for (int j : obs) odds.push_back(mom.mu[j] / (1.0 - mom.mu[j]));
  std::sort(odds.begin(), odds.end());
  const std::size_t last = odds.size() - 1;
  const double bound = mom.rho > 0.0 ? std::sqrt(odds[0] / odds[last])
                                     : std::min(std::sqrt(odds[0] * odds[1]),
                                                1.0 / std::sqrt(odds[last] * odds[last - 1]));
  if (std::fabs(mom.rho) > bound) {
    std::ostringstream os;
    os << "cluster " << cl.id() << ": PSM correlation " << mom.rho
       << " puts a joint observation probability outside its Frechet bounds (limit " << bound << ")";
    throw InfeasibleCorrelationError(os.str());
  }
}

// Solves h x = g by SVD, reporting the condition number.
Eigen::VectorXd solve_block(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, double threshold,
                            const char* block, double& condition) {
  if (g.size() == 0) return g;
  if (!h.allFinite() || !g.allFinite()) {
    throw DivergenceError(std::string("non-finite ") + block + " score or information");
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double smax = s(0);
  const double smin = s(s.size() - 1);
  const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  condition = std::max(condition, cond);
  if (!(cond <= threshold)) {
    std::ostringstream os;
    os << block << " information is ill-conditioned (condition " << cond << ")";
    throw DivergenceError(os.str());
  }
  Eigen::VectorXd x = svd.solve(g);
  if (!x.allFinite()) throw DivergenceError(std::string("non-finite ") + block + " update");
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------

BlockScore BlockScore::zeros(long p, long q) {
  return {Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Zero(p, p), Eigen::VectorXd::Zero(q),
          Eigen::MatrixXd::Zero(q, q)};
}

BlockScore& BlockScore::operator+=(const BlockScore& o) {
  g_beta += o.g_beta;
  h_beta += o.h_beta;
  g_alpha += o.g_alpha;
  h_alpha += o.h_alpha;
  return *this;
}

bool BlockScore::finite() const {
  return g_beta.allFinite() && h_beta.allFinite() && g_alpha.allFinite() && h_alpha.allFinite();
}

Direction newton_direction(const BlockScore& s, double condition_threshold) {
  Direction d;
  d.beta = solve_block(s.h_beta, s.g_beta, condition_threshold, "beta", d.condition);
  d.alpha = solve_block(s.h_alpha, s.g_alpha, condition_threshold, "alpha", d.condition);
  return d;
}

FitResult fisher_scoring(const ScoreFn& score, const ParameterVector& theta0, const Controls& controls) {
  const auto t0 = Clock::now();
  FitResult res;
  res.theta = theta0;
  BlockScore current;
  try {
    current = score(res.theta);
  } catch (const Error& e) {
    throw DivergenceError(std::string("score undefined at the starting value: ") + e.what());
  }
  if (!current.finite()) throw DivergenceError("non-finite score at the starting value");

  for (int it = 1; it <= controls.max_iter; ++it) {
    const Direction dir = newton_direction(current, controls.condition_threshold);
    res.condition = std::max(res.condition, dir.condition);

    double lambda = 1.0;
    bool accepted = false;
    ParameterVector cand;
    BlockScore next;
    std::string last_reason = "non-finite score";
    for (int h = 0; h <= controls.max_halvings; ++h, lambda *= 0.5) {
      cand.beta = res.theta.beta + lambda * dir.beta;
      cand.alpha = res.theta.alpha + lambda * dir.alpha;
      if (!cand.finite()) continue;
      try {
        next = score(cand);
      } catch (const Error& e) {
        last_reason = e.what();
        continue;
      }
      if (next.finite()) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      throw DivergenceError("update rejected after " + std::to_string(controls.max_halvings) +
                            " halvings: " + last_reason);
    }

    double max_update = 0.0;
    const Eigen::VectorXd old_stack = res.theta.stacked();
    const Eigen::VectorXd new_stack = cand.stacked();
    for (long k = 0; k < old_stack.size(); ++k) {
      const double rel = std::fabs(new_stack[k] - old_stack[k]) / std::max(1.0, std::fabs(old_stack[k]));
      max_update = std::max(max_update, rel);
    }
    res.theta = cand;
    current = next;
    res.iterations = it;
    res.max_update = max_update;
    if (controls.keep_trace) res.trace.push_back(new_stack);
    if (max_update < controls.tol) {
      res.converged = true;
      break;
    }
  }
  res.seconds = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------

IpwMode EstimatorChoice::ipw_mode() const {
  switch (kind) {
    case EstimatorKind::complete_case: return IpwMode::complete_case;
    case EstimatorKind::ipw_g1: return IpwMode::g1;
    case EstimatorKind::ipw_g2:
    case EstimatorKind::doubly_robust: return IpwMode::g2;
  }
  return IpwMode::g2;
}

const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::complete_case: return "complete_case";
    case EstimatorKind::ipw_g1: return "ipw_g1";
    case EstimatorKind::ipw_g2: return "ipw_g2";
    case EstimatorKind::doubly_robust: return "doubly_robust";
  }
  return "?";
}

const char* solver_name(SolverKind k) {
  switch (k) {
    case SolverKind::deterministic: return "deterministic";
    case SolverKind::stochastic: return "stochastic";
    case SolverKind::parallel_stochastic: return "parallel_stochastic";
  }
  return "?";
}

EstimatorKind parse_estimator(const std::string& s) {
  if (s == "complete_case" || s == "cc") return EstimatorKind::complete_case;
  if (s == "ipw_g1" || s == "g1") return EstimatorKind::ipw_g1;
  if (s == "ipw_g2" || s == "g2" || s == "ipw") return EstimatorKind::ipw_g2;
  if (s == "doubly_robust" || s == "dr") return EstimatorKind::doubly_robust;
  throw ConfigError("unknown estimator '" + s + "'");
}

SolverKind parse_solver(const std::string& s) {
  if (s == "deterministic" || s == "full") return SolverKind::deterministic;
  if (s == "stochastic") return SolverKind::stochastic;
  if (s == "parallel_stochastic" || s == "parallel") return SolverKind::parallel_stochastic;
  throw ConfigError("unknown solver '" + s + "'");
}

// ---------------------------------------------------------------------------

std::vector<int> srswor(const std::vector<int>& universe, long upsilon, std::mt19937_64& rng) {
  const long m = static_cast<long>(universe.size());
  if (upsilon < 1 || upsilon > m) {
    throw SamplingError("srswor: sample size " + std::to_string(upsilon) + " outside [1, " +
                        std::to_string(m) + "]");
  }
  if (upsilon == m) return universe;
  // Floyd's algorithm: O(upsilon) draws, membership by linear scan while small.
  std::vector<long> picked;
  picked.reserve(static_cast<std::size_t>(upsilon));
  std::vector<char> flag;
  const bool use_flags = upsilon > 64;
  if (use_flags) flag.assign(static_cast<std::size_t>(m), 0);
  auto contains = [&](long v) {
    if (use_flags) return flag[static_cast<std::size_t>(v)] != 0;
    return std::find(picked.begin(), picked.end(), v) != picked.end();
  };
  for (long j = m - upsilon; j < m; ++j) {
    const long t = std::uniform_int_distribution<long>(0, j)(rng);
    const long v = contains(t) ? j : t;
    picked.push_back(v);
    if (use_flags) flag[static_cast<std::size_t>(v)] = 1;
  }
  std::sort(picked.begin(), picked.end());
  std::vector<int> out;
  out.reserve(picked.size());
  for (long v : picked) out.push_back(universe[static_cast<std::size_t>(v)]);
  return out;
}

long subsample_size(double pi_s, long m, bool pairs) {
  if (!(pi_s > 0.0 && pi_s <= 1.0)) throw ConfigError("sampling proportion must lie in (0, 1]");
  if (m <= 0) return 0;
  long v = static_cast<long>(std::ceil(pi_s * static_cast<double>(m) - 1e-9));
  v = std::max(v, 1L);
  if (pairs && m >= 2) v = std::max(v, 2L);
  return std::min(v, m);
}

// ---------------------------------------------------------------------------

NuisanceProblem::NuisanceProblem(const Dataset& data, ModelSpec spec) : spec_(std::move(spec)) {
  if (spec_.target == Target::tm) throw ConfigError("nuisance problems take a PSM or OM spec");
  spec_.validate(data.q(), data.m());
  clusters_.reserve(static_cast<std::size_t>(data.size()));
  for (const auto& cl : data.clusters()) {
    Cluster c;
    c.data = &cl;
    c.design = build_design(spec_, cl);
    if (spec_.target == Target::psm) {
      c.response = &cl.r();
      c.members = index_range(cl.n());
    } else {
      c.response = &cl.y_filled();
      c.members = cl.observed_indices();
    }
    clusters_.push_back(std::move(c));
  }
}

void NuisanceProblem::accumulate(const Cluster& c, const ParameterVector& theta,
                                 const std::vector<int>& members, double f1, double f2,
                                 BlockScore& out) const {
  const ClusterMoments mom = evaluate_moments(c.design, theta, c.data->id());
  if (spec_.target == Target::psm && spec_.second_order) check_pair_feasibility(*c.data, mom);
  if (members.empty()) return;
  const long n = c.data->n();
  const auto& x = c.design.mean;
  const auto& y = *c.response;
  // Conditional ICCs of the nuisance models can dip below the PD bound of a
  // large cluster; the working matrix only needs to be a fixed PD choice.
  const double rho_work = spec_.second_order ? std::max(mom.rho, 0.0) : 0.0;
  const Eigen::VectorXd t = x.transpose() * mom.sqrt_u;
  detail::gee1_equicorrelated(
      n, rho_work, t, members, [&](int j) { return x.row(j).transpose(); },
      [&](int j) { return mom.sqrt_u[j]; }, [&](int) { return f1; },
      [&](int j) { return y[j] - mom.mu[j]; }, out.g_beta, &out.h_beta);
  if (spec_.second_order && members.size() >= 2) {
    Eigen::VectorXd s(n);
    for (int j : members) s[j] = (y[j] - mom.mu[j]) / mom.sqrt_u[j];
    const double rho = mom.rho;
    detail::gee2_identity(
        c.design.corr, mom.drho, members, f2, [](int, int) { return 1.0; },
        [&](int j, int k) { return s[j] * s[k] - rho; }, out.g_alpha, &out.h_alpha);
  }
}

BlockScore NuisanceProblem::cluster_score(long i, const ParameterVector& theta) const {
  BlockScore out = BlockScore::zeros(spec_.mean_dim(), spec_.corr_dim());
  const auto& c = clusters_[static_cast<std::size_t>(i)];
  accumulate(c, theta, c.members, 1.0, 1.0, out);
  return out;
}

BlockScore NuisanceProblem::score(const ParameterVector& theta) const {
  BlockScore out = BlockScore::zeros(spec_.mean_dim(), spec_.corr_dim());
  for (const auto& c : clusters_) accumulate(c, theta, c.members, 1.0, 1.0, out);
  return out;
}

Eigen::MatrixXd NuisanceProblem::psi(const ParameterVector& theta) const {
  Eigen::MatrixXd out(clusters(), dim());
  for (long i = 0; i < clusters(); ++i) {
    const BlockScore s = cluster_score(i, theta);
    out.row(i) << s.g_beta.transpose(), s.g_alpha.transpose();
  }
  return out;
}

BlockScore NuisanceProblem::sampled_score(const ParameterVector& theta, double pi_s,
                                          std::mt19937_64& rng) const {
  BlockScore out = BlockScore::zeros(spec_.mean_dim(), spec_.corr_dim());
  for (const auto& c : clusters_) {
    const long m = static_cast<long>(c.members.size());
    if (m == 0) continue;
    const bool pairs = spec_.second_order && m >= 2;
    const long v = subsample_size(pi_s, m, pairs);
    const std::vector<int> s = srswor(c.members, v, rng);
    const double f1 = static_cast<double>(m) / static_cast<double>(v);
    const double f2 = pairs ? static_cast<double>(m * (m - 1)) / static_cast<double>(v * (v - 1)) : 0.0;
    accumulate(c, theta, s, f1, f2, out);
  }
  return out;
}

bool NuisanceProblem::admissible(const ParameterVector& theta) const {
  if (!theta.finite()) return false;
  try {
    for (const auto& c : clusters_) {
      const ClusterMoments mom = evaluate_moments(c.design, theta, c.data->id());
      if (spec_.target == Target::psm && spec_.second_order) check_pair_feasibility(*c.data, mom);
    }
  } catch (const Error&) {
    return false;
  }
  return true;
}

void NuisanceProblem::check_separation() const {
  const char* what = spec_.target == Target::psm ? "missingness indicator" : "observed outcome";
  double first[2] = {-1.0, -1.0};
  bool varies[2] = {false, false};
  bool seen[2] = {false, false};
  for (const auto& c : clusters_) {
    const int arm = spec_.mean_treatment ? c.data->a() : 0;
    for (int j : c.members) {
      const double v = (*c.response)[j];
      if (!seen[arm]) {
        seen[arm] = true;
        first[arm] = v;
      } else if (v != first[arm]) {
        varies[arm] = true;
      }
    }
  }
  const int arms = spec_.mean_treatment ? 2 : 1;
  for (int a = 0; a < arms; ++a) {
    if (!seen[a] || !varies[a]) {
      throw SeparationError(std::string(target_name(spec_.target)) + ": " + what +
                            " is constant in arm " + std::to_string(a));
    }
  }
}

namespace {

FitResult fit_nuisance(const Dataset& data, const ModelSpec& spec, const Controls& controls) {
  const auto t0 = Clock::now();
  NuisanceProblem prob(data, spec);
  prob.check_separation();
  FitResult res = fisher_scoring([&](const ParameterVector& th) { return prob.score(th); },
                                 ParameterVector::zeros(spec), controls);
  res.spec = spec;
  res.seconds = seconds_since(t0);
  return res;
}

}  // namespace

FitResult fit_psee(const Dataset& data, const ModelSpec& psm, const Controls& controls) {
  if (psm.target != Target::psm) throw ConfigError("fit_psee needs a PSM spec");
  return fit_nuisance(data, psm, controls);
}

FitResult fit_omee(const Dataset& data, const ModelSpec& om, const Controls& controls) {
  if (om.target != Target::om) throw ConfigError("fit_omee needs an OM spec");
  return fit_nuisance(data, om, controls);
}

// ---------------------------------------------------------------------------

double joint_observation_prob(double pi1, double pi2, double rho_r) {
  if (!(pi1 > 0.0 && pi1 <= 1.0) || !(pi2 > 0.0 && pi2 <= 1.0)) {
    throw DomainError("joint_observation_prob: probabilities must lie in (0, 1]");
  }
  if (!(std::fabs(rho_r) < 1.0)) throw DomainError("joint_observation_prob: |rho| must be < 1");
  const double eta = pi1 * pi2 + rho_r * std::sqrt(pi1 * (1.0 - pi1) * pi2 * (1.0 - pi2));
  const double lo = std::max(0.0, pi1 + pi2 - 1.0);
  const double hi = std::min(pi1, pi2);
  constexpr double slack = 1e-12;
  if (eta < lo - slack || eta > hi + slack || !(eta > 0.0)) {
    std::ostringstream os;
    os << "joint observation probability " << eta << " outside Frechet bounds [" << lo << ", "
       << hi << "] (pi1=" << pi1 << ", pi2=" << pi2 << ", rho=" << rho_r << ")";
    throw InfeasibleCorrelationError(os.str());
  }
  return eta;
}

namespace {

void check_positivity(const ClusterData& cl, const Eigen::VectorXd& pi, double floor) {
  std::vector<long> bad;
  for (long j = 0; j < pi.size(); ++j) {
    if (pi[j] < floor) bad.push_back(j);
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "cluster " << cl.id() << ": fitted observation probability below " << floor
       << " for subjects";
    for (long j : bad) os << ' ' << j + 1;
    throw PositivityError(os.str(), bad);
  }
}

}  // namespace

DiagonalWeight build_ipw_matrix(const ClusterData& cluster, const NuisanceModel& psm, IpwMode mode,
                                double positivity_floor) {
  const long n = cluster.n();
  const long pairs = pair_count(n);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n + pairs);
  const auto& r = cluster.r();
  if (mode == IpwMode::complete_case) {
    w.head(n) = r;
    long p = 0;
    for (long j = 0; j < n; ++j)
      for (long k = j + 1; k < n; ++k) w[n + p++] = r[j] * r[k];
    return DiagonalWeight(w);
  }
  const ClusterMoments mom = evaluate_moments(build_design(psm.spec, cluster), psm.theta, cluster.id());
  check_positivity(cluster, mom.mu, positivity_floor);
  for (long j = 0; j < n; ++j) w[j] = r[j] / mom.mu[j];
  long p = 0;
  for (long j = 0; j < n; ++j) {
    for (long k = j + 1; k < n; ++k, ++p) {
      if (r[j] == 0.0 || r[k] == 0.0) continue;
      const double eta = mode == IpwMode::g1 ? mom.mu[j] * mom.mu[k]
                                             : joint_observation_prob(mom.mu[j], mom.mu[k], mom.rho);
      w[n + p] = 1.0 / eta;
    }
  }
  return DiagonalWeight(w);
}

// ---------------------------------------------------------------------------

TmProblem::TmProblem(const Dataset& data, ModelSpec tm, IpwMode mode,
                     const std::optional<NuisanceModel>& psm, const std::optional<NuisanceModel>& om,
                     double p_a, double positivity_floor)
    : spec_(std::move(tm)), mode_(mode), dr_(om.has_value()), p_a_(p_a) {
  spec_.validate(data.q(), data.m());
  if (!(p_a_ >= 0.0 && p_a_ <= 1.0)) throw DomainError("p_a must lie in [0, 1]");
  if (mode_ == IpwMode::complete_case && psm) throw ConfigError("complete case takes no PSM");
  if (mode_ != IpwMode::complete_case && !psm) throw ConfigError("IPW weighting needs a fitted PSM");
  if (psm) psm->spec.validate(data.q(), data.m());
  if (om) om->spec.validate(data.q(), data.m());

  clusters_.reserve(static_cast<std::size_t>(data.size()));
  all_index_.reserve(static_cast<std::size_t>(data.size()));
  for (const auto& cl : data.clusters()) {
    Cluster c;
    c.data = &cl;
    const long n = cl.n();
    if (psm) {
      const ClusterMoments mom = evaluate_moments(build_design(psm->spec, cl), psm->theta, cl.id());
      check_positivity(cl, mom.mu, positivity_floor);
      c.pi_r = mom.mu;
      c.sqrt_v_r = mom.sqrt_u;
      c.rho_r = mom.rho;
      c.inv_pi = mom.mu.cwiseInverse();
    } else {
      c.inv_pi = Eigen::VectorXd::Ones(n);
    }
    if (om) {
      for (int a = 0; a < 2; ++a) {
        const ClusterMoments mom = evaluate_moments(build_design(om->spec, cl, a), om->theta, cl.id());
        c.om_pi[a] = mom.mu;
        c.om_sqrt_v[a] = mom.sqrt_u;
        c.om_rho[a] = mom.rho;
      }
    }
    clusters_.push_back(std::move(c));
    all_index_.push_back(index_range(n));
  }
}

TmProblem::Arm TmProblem::arm(const ParameterVector& theta, int a) const {
  Arm out;
  const double eta = theta.beta[0] + theta.beta[1] * a;
  if (!std::isfinite(eta)) throw OverflowError("TM: non-finite mean linear predictor");
  out.pi = expit(eta);
  out.u = out.pi * (1.0 - out.pi);
  if (!(out.u > 0.0)) throw OverflowError("TM: mean linear predictor saturated");
  out.su = std::sqrt(out.u);
  const double lp = theta.alpha[0] + theta.alpha[1] * a;
  if (!std::isfinite(lp)) throw OverflowError("TM: non-finite correlation linear predictor");
  out.rho = std::tanh(lp);
  if (!(std::fabs(out.rho) < 1.0)) throw OverflowError("TM: correlation linear predictor saturated");
  out.drho = 1.0 - out.rho * out.rho;
  return out;
}

double TmProblem::pair_weight(const Cluster& c, int j, int k) const {
  switch (mode_) {
    case IpwMode::complete_case: return 1.0;
    case IpwMode::g1: return c.inv_pi[j] * c.inv_pi[k];
    case IpwMode::g2: break;
  }
  const double p1 = c.pi_r[j];
  const double p2 = c.pi_r[k];
  const double eta = p1 * p2 + c.rho_r * c.sqrt_v_r[j] * c.sqrt_v_r[k];
  const double lo = std::max(0.0, p1 + p2 - 1.0);
  const double hi = std::min(p1, p2);
  if (eta < lo - 1e-12 || eta > hi + 1e-12 || !(eta > 0.0)) {
    return 1.0 / joint_observation_prob(p1, p2, c.rho_r);  // throws with details
  }
  return 1.0 / eta;
}

void TmProblem::ipw_part(const Cluster& c, const Arm& ar, const std::vector<int>& members, double f1,
                         double f2, bool with_h, BlockScore& out) const {
  if (members.empty()) return;
  const ClusterData& cl = *c.data;
  const long n = cl.n();
  const int a = cl.a();
  const Eigen::Vector2d xa(1.0, a);
  const Eigen::VectorXd t = (static_cast<double>(n) * ar.su) * xa;
  const auto& y = cl.y_filled();
  const double pi = ar.pi;
  const Eigen::VectorXd* om_pi = dr_ ? &c.om_pi[a] : nullptr;

  auto resid1 = [&](int j) { return dr_ ? y[j] - (*om_pi)[j] : y[j] - pi; };
  detail::gee1_equicorrelated(
      n, ar.rho, t, members, [&](int) { return xa; }, [&](int) { return ar.su; },
      [&](int j) { return f1 * c.inv_pi[j]; }, resid1, out.g_beta, with_h ? &out.h_beta : nullptr);

  if (members.size() < 2) return;
  const double inv_u = 1.0 / ar.u;
  auto weight = [&](int j, int k) { return pair_weight(c, j, k); };
  if (!dr_) {
    const double rho = ar.rho;
    detail::gee2_identity(
        xa, ar.drho, members, f2, weight,
        [&](int j, int k) { return (y[j] - pi) * (y[k] - pi) * inv_u - rho; }, out.g_alpha,
        with_h ? &out.h_alpha : nullptr);
  } else {
    const auto& gp = *om_pi;
    const auto& h = c.om_sqrt_v[a];
    const double rb = c.om_rho[a];
    detail::gee2_identity(
        xa, ar.drho, members, f2, weight,
        [&](int j, int k) {
          return ((y[j] - pi) * (y[k] - pi) - (gp[j] - pi) * (gp[k] - pi) - rb * h[j] * h[k]) * inv_u;
        },
        out.g_alpha, with_h ? &out.h_alpha : nullptr);
  }
}

void TmProblem::zeta_part(const Cluster& c, const ParameterVector& theta,
                          const std::vector<int>& members, double f1, double f2, bool ipw_weights,
                          Eigen::VectorXd& g_beta, Eigen::VectorXd& g_alpha, Eigen::MatrixXd* h_beta,
                          Eigen::MatrixXd* h_alpha) const {
  if (members.empty()) return;
  const long n = c.data->n();
  for (int a = 0; a < 2; ++a) {
    const double pa = a == 1 ? p_a_ : 1.0 - p_a_;
    if (pa == 0.0) continue;
    const Arm ar = arm(theta, a);
    const Eigen::Vector2d xa(1.0, a);
    const Eigen::VectorXd t = (static_cast<double>(n) * ar.su) * xa;
    const auto& gp = c.om_pi[a];
    const auto& hv = c.om_sqrt_v[a];
    const double rb = c.om_rho[a];
    const double pi = ar.pi;

    Eigen::VectorXd gb = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd hb = Eigen::MatrixXd::Zero(2, 2);
    detail::gee1_equicorrelated(
        n, ar.rho, t, members, [&](int) { return xa; }, [&](int) { return ar.su; },
        [&](int j) { return ipw_weights ? f1 * c.inv_pi[j] : f1; },
        [&](int j) { return gp[j] - pi; }, gb, h_beta ? &hb : nullptr);
    g_beta += pa * gb;
    if (h_beta) *h_beta += pa * hb;

    if (members.size() < 2) continue;
    Eigen::VectorXd ga = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd ha = Eigen::MatrixXd::Zero(2, 2);
    const double inv_u = 1.0 / ar.u;
    const double rho = ar.rho;
    auto resid = [&](int j, int k) {
      return ((gp[j] - pi) * (gp[k] - pi) + rb * hv[j] * hv[k]) * inv_u - rho;
    };
    if (ipw_weights) {
      detail::gee2_identity(xa, ar.drho, members, f2,
                            [&](int j, int k) { return pair_weight(c, j, k); }, resid, ga,
                            h_alpha ? &ha : nullptr);
    } else {
      detail::gee2_identity(xa, ar.drho, members, f2, [](int, int) { return 1.0; }, resid, ga,
                            h_alpha ? &ha : nullptr);
    }
    g_alpha += pa * ga;
    if (h_alpha) *h_alpha += pa * ha;
  }
}

BlockScore TmProblem::cluster_score(long i, const ParameterVector& theta) const {
  const auto& c = clusters_[static_cast<std::size_t>(i)];
  BlockScore out = BlockScore::zeros(2, 2);
  const Arm ar = arm(theta, c.data->a());
  ipw_part(c, ar, c.data->observed_indices(), 1.0, 1.0, !dr_, out);
  if (dr_) {
    zeta_part(c, theta, all_index_[static_cast<std::size_t>(i)], 1.0, 1.0, false, out.g_beta,
              out.g_alpha, &out.h_beta, &out.h_alpha);
  }
  return out;
}

BlockScore TmProblem::score(const ParameterVector& theta) const {
  BlockScore out = BlockScore::zeros(2, 2);
  for (long i = 0; i < clusters(); ++i) out += cluster_score(i, theta);
  return out;
}

Eigen::MatrixXd TmProblem::psi(const ParameterVector& theta) const {
  Eigen::MatrixXd out(clusters(), dim());
  for (long i = 0; i < clusters(); ++i) {
    const BlockScore s = cluster_score(i, theta);
    out.row(i) << s.g_beta.transpose(), s.g_alpha.transpose();
  }
  return out;
}

BlockScore TmProblem::sampled_score(const ParameterVector& theta, double pi_s, std::mt19937_64& rng_s,
                                    std::mt19937_64& rng_sp, ZetaVariant variant) const {
  BlockScore out = BlockScore::zeros(2, 2);
  for (long i = 0; i < clusters(); ++i) {
    const auto& c = clusters_[static_cast<std::size_t>(i)];
    const auto& obs = c.data->observed_indices();
    const long m = static_cast<long>(obs.size());
    std::vector<int> s;
    double f1 = 0.0, f2 = 0.0;
    if (m > 0) {
      const long v = subsample_size(pi_s, m, true);
      s = srswor(obs, v, rng_s);
      f1 = static_cast<double>(m) / static_cast<double>(v);
      if (m >= 2) f2 = static_cast<double>(m * (m - 1)) / static_cast<double>(v * (v - 1));
      ipw_part(c, arm(theta, c.data->a()), s, f1, f2, !dr_, out);
    }
    if (!dr_) continue;

    const long n = c.data->n();
    const long vp = subsample_size(pi_s, n, true);
    const std::vector<int> sp = srswor(all_index_[static_cast<std::size_t>(i)], vp, rng_sp);
    const double f1p = static_cast<double>(n) / static_cast<double>(vp);
    const double f2p = n >= 2 ? static_cast<double>(n * (n - 1)) / static_cast<double>(vp * (vp - 1)) : 0.0;
    if (variant == ZetaVariant::z3) {
      zeta_part(c, theta, sp, f1p, f2p, false, out.g_beta, out.g_alpha, &out.h_beta, &out.h_alpha);
    } else {
      Eigen::VectorXd scratch_b = Eigen::VectorXd::Zero(2), scratch_a = Eigen::VectorXd::Zero(2);
      zeta_part(c, theta, sp, f1p, f2p, false, scratch_b, scratch_a, &out.h_beta, &out.h_alpha);
      zeta_part(c, theta, s, f1, f2, variant == ZetaVariant::z1, out.g_beta, out.g_alpha, nullptr,
                nullptr);
    }
  }
  return out;
}

Eigen::VectorXd TmProblem::zeta(long i, const ParameterVector& theta) const {
  if (!dr_) throw ConfigError("zeta is defined for doubly robust problems only");
  Eigen::VectorXd gb = Eigen::VectorXd::Zero(2), ga = Eigen::VectorXd::Zero(2);
  zeta_part(clusters_[static_cast<std::size_t>(i)], theta, all_index_[static_cast<std::size_t>(i)],
            1.0, 1.0, false, gb, ga, nullptr, nullptr);
  Eigen::VectorXd out(4);
  out << gb, ga;
  return out;
}

Eigen::VectorXd TmProblem::sampled_zeta(long i, const ParameterVector& theta, double pi_s,
                                        std::mt19937_64& rng_s, std::mt19937_64& rng_sp,
                                        ZetaVariant variant) const {
  if (!dr_) throw ConfigError("zeta is defined for doubly robust problems only");
  const auto& c = clusters_[static_cast<std::size_t>(i)];
  Eigen::VectorXd gb = Eigen::VectorXd::Zero(2), ga = Eigen::VectorXd::Zero(2);
  if (variant == ZetaVariant::z3) {
    const long n = c.data->n();
    const long vp = subsample_size(pi_s, n, true);
    const auto sp = srswor(all_index_[static_cast<std::size_t>(i)], vp, rng_sp);
    const double f1 = static_cast<double>(n) / static_cast<double>(vp);
    const double f2 = n >= 2 ? static_cast<double>(n * (n - 1)) / static_cast<double>(vp * (vp - 1)) : 0.0;
    zeta_part(c, theta, sp, f1, f2, false, gb, ga, nullptr, nullptr);
  } else {
    const auto& obs = c.data->observed_indices();
    const long m = static_cast<long>(obs.size());
    if (m > 0) {
      const long v = subsample_size(pi_s, m, true);
      const auto s = srswor(obs, v, rng_s);
      const double f1 = static_cast<double>(m) / static_cast<double>(v);
      const double f2 = m >= 2 ? static_cast<double>(m * (m - 1)) / static_cast<double>(v * (v - 1)) : 0.0;
      zeta_part(c, theta, s, f1, f2, variant == ZetaVariant::z1, gb, ga, nullptr, nullptr);
    }
  }
  Eigen::VectorXd out(4);
  out << gb, ga;
  return out;
}

bool TmProblem::admissible(const ParameterVector& theta) const {
  if (!theta.finite()) return false;
  try {
    long nmax[2] = {1, 1};
    long nall = 1;
    for (const auto& c : clusters_) {
      nmax[c.data->a()] = std::max(nmax[c.data->a()], c.data->n());
      nall = std::max(nall, c.data->n());
    }
    for (int a = 0; a < 2; ++a) {
      const Arm ar = arm(theta, a);
      (void)equicorrelation_inverse(dr_ ? nall : nmax[a], ar.rho);
    }
  } catch (const Error&) {
    return false;
  }
  return true;
}

void TmProblem::check_separation() const {
  bool seen[2] = {false, false};
  bool varies[2] = {false, false};
  double first[2] = {0.0, 0.0};
  for (const auto& c : clusters_) {
    const int a = c.data->a();
    for (int j : c.data->observed_indices()) {
      const double v = c.data->y_filled()[j];
      if (!seen[a]) {
        seen[a] = true;
        first[a] = v;
      } else if (v != first[a]) {
        varies[a] = true;
      }
    }
  }
  for (int a = 0; a < 2; ++a) {
    if (!seen[a] || !varies[a]) {
      throw SeparationError("TM: observed outcome is constant in arm " + std::to_string(a));
    }
  }
}

namespace {

FitResult fit_tm(const Dataset& data, const ModelSpec& tm, IpwMode mode,
                 const std::optional<NuisanceModel>& psm, const std::optional<NuisanceModel>& om,
                 const Controls& controls) {
  const auto t0 = Clock::now();
  data.require_both_arms();
  TmProblem prob(data, tm, mode, psm, om, data.p_a(), controls.positivity_floor);
  prob.check_separation();
  FitResult res = fisher_scoring([&](const ParameterVector& th) { return prob.score(th); },
                                 ParameterVector::zeros(tm), controls);
  res.spec = tm;
  res.seconds = seconds_since(t0);
  return res;
}

}  // namespace

FitResult fit_complete_case(const Dataset& data, const ModelSpec& tm, const Controls& controls) {
  return fit_tm(data, tm, IpwMode::complete_case, std::nullopt, std::nullopt, controls);
}

FitResult fit_ipw_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee, IpwMode mode,
                       const Controls& controls) {
  if (mode == IpwMode::complete_case) return fit_complete_case(data, tm, controls);
  return fit_tm(data, tm, mode, NuisanceModel{psee.spec, psee.theta}, std::nullopt, controls);
}

FitResult fit_dr_gee2(const Dataset& data, const ModelSpec& tm, const FitResult& psee,
                      const FitResult& omee, const Controls& controls, IpwMode mode) {
  return fit_tm(data, tm, mode, NuisanceModel{psee.spec, psee.theta},
                NuisanceModel{omee.spec, omee.theta}, controls);
}

Eigen::VectorXd augmentation_term(const ClusterData& cluster, const ModelSpec& tm,
                                  const ParameterVector& tm_theta, const NuisanceModel& om,
                                  double p_a) {
  // The augmentation does not involve W^R, so complete-case weights do.
  Dataset one({cluster}, p_a);
  TmProblem prob(one, tm, IpwMode::complete_case, std::nullopt, om, p_a);
  return prob.zeta(0, tm_theta);
}

}  // namespace iccgee
