#include "iccgee/inference.hpp"

#include "iccgee/errors.hpp"

#include <boost/math/distributions/normal.hpp>

#include <chrono>
#include <cmath>
#include <limits>

namespace iccgee {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double fd_step(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }

std::vector<std::string> prefixed_names(const std::string& prefix, const ModelSpec& spec) {
  std::vector<std::string> out;
  for (const auto& n : spec.mean_names()) out.push_back(prefix + n);
  for (const auto& n : spec.corr_names()) out.push_back(prefix + n);
  return out;
}

double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 0.0;
  const double lo = s[s.size() - 1];
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return s[0] / lo;
}

SandwichResult finish(Eigen::MatrixXd gamma, Eigen::MatrixXd delta, long clusters,
                      double threshold) {
  SandwichResult out;
  out.condition = condition_number(gamma);
  if (!std::isfinite(out.condition) || out.condition > threshold) {
    throw InferenceError("sandwich: Gamma is singular (condition " + std::to_string(out.condition) + ")",
                         out.condition);
  }
  const Eigen::MatrixXd ginv = gamma.fullPivLu().inverse();
  Eigen::MatrixXd cov = ginv * delta * ginv.transpose() / static_cast<double>(clusters);
  out.covariance = 0.5 * (cov + cov.transpose());
  out.gamma = std::move(gamma);
  out.delta = std::move(delta);
  return out;
}

}  // namespace

Eigen::VectorXd SandwichResult::tm_se() const {
  return tm_covariance().diagonal().cwiseMax(0.0).cwiseSqrt();
}

SandwichResult sandwich_variance(const Dataset& data, const StackedFits& fits,
                                 const SandwichOptions& options) {
  const long I = data.size();
  if (I < 1) throw ShapeError("sandwich: empty dataset");
  const bool use_psm = fits.psm.has_value();
  const bool use_om = fits.om.has_value() && fits.doubly_robust;

  const long d_tm = fits.tm_theta.size();
  const long d_r = use_psm ? fits.psm->theta.size() : 0;
  const long d_y = use_om ? fits.om->theta.size() : 0;
  const long d = d_tm + d_r + d_y;
  const long off_r = d_tm, off_y = d_tm + d_r;

  auto tm_psi = [&](const ParameterVector& th, const std::optional<NuisanceModel>& psm,
                    const std::optional<NuisanceModel>& om) {
    TmProblem prob(data, fits.tm, fits.mode, psm, fits.doubly_robust ? om : std::nullopt, fits.p_a,
                   fits.positivity_floor);
    return prob.psi(th);
  };

  std::optional<NuisanceProblem> psm_prob, om_prob;
  if (use_psm) psm_prob.emplace(data, fits.psm->spec);
  if (use_om) om_prob.emplace(data, fits.om->spec);

  Eigen::MatrixXd psi(I, d);
  psi.leftCols(d_tm) = tm_psi(fits.tm_theta, fits.psm, fits.om);
  if (use_psm) psi.middleCols(off_r, d_r) = psm_prob->psi(fits.psm->theta);
  if (use_om) psi.middleCols(off_y, d_y) = om_prob->psi(fits.om->theta);

  Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(d, d);

  // TM columns: only the TM rows depend on theta_TM.
  for (long j = 0; j < d_tm; ++j) {
    Eigen::VectorXd k = fits.tm_theta.stacked();
    const double h = fd_step(k[j]);
    k[j] += h;
    const Eigen::VectorXd up = tm_psi(ParameterVector::from_stacked(fits.tm, k), fits.psm, fits.om).colwise().sum();
    k[j] -= 2 * h;
    const Eigen::VectorXd dn = tm_psi(ParameterVector::from_stacked(fits.tm, k), fits.psm, fits.om).colwise().sum();
    gamma.block(0, j, d_tm, 1) = (up - dn) / (2 * h);
  }

  auto nuisance_columns = [&](const NuisanceModel& model, const NuisanceProblem& prob, long off,
                              bool is_psm) {
    const long dn_dim = model.theta.size();
    for (long j = 0; j < dn_dim; ++j) {
      Eigen::VectorXd k = model.theta.stacked();
      const double h = fd_step(k[j]);
      Eigen::VectorXd kp = k, km = k;
      kp[j] += h;
      km[j] -= h;
      const auto tp = ParameterVector::from_stacked(model.spec, kp);
      const auto tmn = ParameterVector::from_stacked(model.spec, km);
      gamma.block(off, off + j, dn_dim, 1) =
          (prob.psi(tp).colwise().sum() - prob.psi(tmn).colwise().sum()).transpose() / (2 * h);
      if (options.ignore_nuisance) continue;
      NuisanceModel mp{model.spec, tp}, mm{model.spec, tmn};
      Eigen::VectorXd up, dn;
      if (is_psm) {
        up = tm_psi(fits.tm_theta, mp, fits.om).colwise().sum();
        dn = tm_psi(fits.tm_theta, mm, fits.om).colwise().sum();
      } else {
        up = tm_psi(fits.tm_theta, fits.psm, mp).colwise().sum();
        dn = tm_psi(fits.tm_theta, fits.psm, mm).colwise().sum();
      }
      gamma.block(0, off + j, d_tm, 1) = (up - dn) / (2 * h);
    }
  };
  if (use_psm) nuisance_columns(*fits.psm, *psm_prob, off_r, true);
  if (use_om) nuisance_columns(*fits.om, *om_prob, off_y, false);

  gamma /= static_cast<double>(I);
  Eigen::MatrixXd delta = psi.transpose() * psi / static_cast<double>(I);
  SandwichResult out = finish(std::move(gamma), std::move(delta), I, options.condition_threshold);
  out.tm_dim = d_tm;
  out.names = prefixed_names("TM.", fits.tm);
  if (use_psm) {
    auto n = prefixed_names("PSM.", fits.psm->spec);
    out.names.insert(out.names.end(), n.begin(), n.end());
  }
  if (use_om) {
    auto n = prefixed_names("OM.", fits.om->spec);
    out.names.insert(out.names.end(), n.begin(), n.end());
  }
  return out;
}

SandwichResult sandwich_from_psi(const PsiFn& psi_fn, const Eigen::VectorXd& theta,
                                 double condition_threshold) {
  const Eigen::MatrixXd psi = psi_fn(theta);
  const long I = psi.rows();
  const long d = theta.size();
  if (psi.cols() != d) throw ShapeError("sandwich: psi columns do not match parameter length");
  Eigen::MatrixXd gamma(d, d);
  for (long j = 0; j < d; ++j) {
    Eigen::VectorXd k = theta;
    const double h = fd_step(k[j]);
    k[j] += h;
    const Eigen::VectorXd up = psi_fn(k).colwise().sum();
    k[j] -= 2 * h;
    const Eigen::VectorXd dn = psi_fn(k).colwise().sum();
    gamma.col(j) = (up - dn) / (2 * h);
  }
  gamma /= static_cast<double>(I);
  Eigen::MatrixXd delta = psi.transpose() * psi / static_cast<double>(I);
  SandwichResult out = finish(std::move(gamma), std::move(delta), I, condition_threshold);
  out.tm_dim = d;
  return out;
}

WaldResult wald(double estimate, double se, std::optional<long> reps) {
  if (!(se > 0.0)) throw DomainError("wald: standard error must be positive");
  WaldResult w;
  w.statistic = estimate / se;
  if (reps) {
    if (*reps < 1) throw DomainError("wald: replicate count must be positive");
    w.statistic *= std::sqrt(static_cast<double>(*reps));
  }
  w.p_value = std::erfc(std::abs(w.statistic) / std::sqrt(2.0));
  w.flagged = std::abs(w.statistic) > 2.0;
  return w;
}

Interval wald_interval(double estimate, double se, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("wald_interval: level must lie in (0, 1)");
  const double z = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
  return {estimate - z * se, estimate + z * se};
}

// ---------------------------------------------------------------------------

ModelSpec resolve_psm(const PipelineOptions& options, const Dataset& data) {
  ModelSpec s = options.psm ? *options.psm : ModelSpec::full(Target::psm, data.q(), data.m());
  s.target = Target::psm;
  s.validate(data.q(), data.m());
  return s;
}

ModelSpec resolve_om(const PipelineOptions& options, const Dataset& data) {
  ModelSpec s = options.om ? *options.om : ModelSpec::full(Target::om, data.q(), data.m());
  s.target = Target::om;
  s.validate(data.q(), data.m());
  return s;
}

namespace {

FitResult from_chain(const ModelSpec& spec, const ChainResult& c) {
  FitResult r;
  r.spec = spec;
  r.theta = c.theta;
  r.converged = c.converged;
  r.iterations = c.iterations;
  r.condition = c.condition;
  r.seconds = c.seconds;
  r.trace = c.trace;
  return r;
}

FitResult nuisance_stage(const Dataset& data, const ModelSpec& spec, const PipelineOptions& options,
                         Stage stage) {
  const auto t0 = Clock::now();
  FitResult res;
  try {
    if (options.choice.solver == SolverKind::deterministic) {
      res = stage == Stage::psm ? fit_psee(data, spec, options.controls)
                                : fit_omee(data, spec, options.controls);
    } else {
      const ChainResult c = s_fit_nuisance(data, spec, options.plan, options.controls);
      if (!c.converged) throw DivergenceError(c.divergence_reason);
      res = from_chain(spec, c);
    }
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.what());
  }
  if (!res.converged) throw StageError(stage, "Fisher scoring did not converge");
  res.seconds = seconds_since(t0);
  return res;
}

}  // namespace

FitResult run_psm_stage(const Dataset& data, const PipelineOptions& options) {
  return nuisance_stage(data, resolve_psm(options, data), options, Stage::psm);
}

FitResult run_om_stage(const Dataset& data, const PipelineOptions& options) {
  return nuisance_stage(data, resolve_om(options, data), options, Stage::om);
}

PipelineResult run_tm_stage(const Dataset& data, const PipelineOptions& options,
                            const FitResult* psee, const FitResult* omee) {
  const auto& choice = options.choice;
  PipelineResult out;
  out.choice = choice;
  out.p_a = data.p_a();
  if (choice.needs_psm() && !psee) throw ConfigError("TM stage needs a fitted PSM");
  if (choice.needs_om() && !omee) throw ConfigError("TM stage needs a fitted OM");
  if (psee && choice.needs_psm()) out.psee = *psee;
  if (omee && choice.needs_om()) out.omee = *omee;

  const auto t0 = Clock::now();
  try {
    options.tm.validate(data.q(), data.m());
    const IpwMode mode = choice.ipw_mode();
    if (choice.solver == SolverKind::deterministic) {
      switch (choice.kind) {
        case EstimatorKind::complete_case:
          out.tm = fit_complete_case(data, options.tm, options.controls);
          break;
        case EstimatorKind::ipw_g1:
        case EstimatorKind::ipw_g2:
          out.tm = fit_ipw_gee2(data, options.tm, *psee, mode, options.controls);
          break;
        case EstimatorKind::doubly_robust:
          out.tm = fit_dr_gee2(data, options.tm, *psee, *omee, options.controls);
          break;
      }
    } else if (choice.kind != EstimatorKind::doubly_robust) {
      if (choice.solver == SolverKind::parallel_stochastic) {
        throw ConfigError("the parallel solver is only defined for the doubly robust estimator");
      }
      FitResult dummy;
      const ChainResult c = s_ipw_gee2(data, options.tm, psee ? *psee : dummy, options.plan, mode,
                                       options.controls);
      out.chains.push_back(c);
      if (!c.converged) throw DivergenceError(c.divergence_reason);
      out.converged_chains = 1;
      out.tm = from_chain(options.tm, c);
    } else if (choice.solver == SolverKind::stochastic) {
      const ChainResult c = s_dr_gee2(data, options.tm, *psee, *omee, options.plan, options.controls);
      out.chains.push_back(c);
      if (!c.converged) throw DivergenceError(c.divergence_reason);
      out.converged_chains = 1;
      out.tm = from_chain(options.tm, c);
    } else {
      const ParallelResult p =
          par_sgee2(data, options.tm, *psee, *omee, options.plan, options.controls, options.threads);
      out.chains = p.chains;
      out.converged_chains = p.converged_chains;
      out.tm.spec = options.tm;
      out.tm.theta = p.theta;
      out.tm.converged = true;
      for (const auto& c : p.chains) {
        out.tm.iterations = std::max(out.tm.iterations, c.iterations);
        out.tm.condition = std::max(out.tm.condition, c.condition);
      }
    }
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(Stage::tm, e.what());
  }
  if (!out.tm.converged) throw StageError(Stage::tm, "Fisher scoring did not converge");
  out.tm.spec = options.tm;
  out.seconds.tm = seconds_since(t0);
  out.tm.seconds = out.seconds.tm;
  if (psee) out.seconds.psm = psee->seconds;
  if (omee) out.seconds.om = omee->seconds;

  if (options.sandwich) {
    const auto t1 = Clock::now();
    StackedFits fits;
    fits.tm = options.tm;
    fits.tm_theta = out.tm.theta;
    fits.mode = choice.ipw_mode();
    fits.doubly_robust = choice.needs_om();
    if (out.psee) fits.psm = NuisanceModel{out.psee->spec, out.psee->theta};
    if (out.omee) fits.om = NuisanceModel{out.omee->spec, out.omee->theta};
    fits.p_a = data.p_a();
    fits.positivity_floor = options.controls.positivity_floor;
    SandwichOptions so;
    so.ignore_nuisance = options.naive_sandwich;
    so.condition_threshold = options.controls.condition_threshold;
    out.sandwich = sandwich_variance(data, fits, so);
    out.tm.sandwich = out.sandwich->tm_covariance();
    out.tm_se = out.sandwich->tm_se();
    out.seconds.inference = seconds_since(t1);
  }
  return out;
}

PipelineResult run_pipeline(const Dataset& data, const PipelineOptions& options) {
  data.require_both_arms();
  std::optional<FitResult> psee, omee;
  if (options.choice.needs_psm()) psee = run_psm_stage(data, options);
  if (options.choice.needs_om()) omee = run_om_stage(data, options);
  return run_tm_stage(data, options, psee ? &*psee : nullptr, omee ? &*omee : nullptr);
}

}  // namespace iccgee
