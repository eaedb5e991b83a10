#include "iccgee/bench.hpp"
#include "iccgee/errors.hpp"
#include "iccgee/inference.hpp"
#include "iccgee/io.hpp"
#include "iccgee/simgen.hpp"
#include "iccgee/version.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace iccgee;

namespace {

constexpr int kExitParse = 2;
constexpr int kExitConvergence = 3;
constexpr int kExitConfig = 4;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> output;
  std::optional<double> pi_s;
  std::optional<int> omega_nuisance, omega_tm, chains;
  std::optional<std::string> estimator, solver;
};

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? default_config() : load_config(o.config);
  if (o.seed) {
    cfg.generation.seed = *o.seed;
    cfg.plan.seed = *o.seed;
    cfg.bench.seed = *o.seed;
  }
  if (o.threads) cfg.threads = *o.threads;
  if (o.output) cfg.output = *o.output;
  if (o.pi_s) cfg.plan.pi_s = *o.pi_s;
  if (o.omega_nuisance) cfg.plan.omega_nuisance = *o.omega_nuisance;
  if (o.omega_tm) cfg.plan.omega_tm = *o.omega_tm;
  if (o.chains) cfg.plan.chains = *o.chains;
  if (o.estimator) cfg.fit.estimator = parse_estimator(*o.estimator);
  if (o.solver) {
    cfg.fit.solver = parse_solver(*o.solver);
    cfg.simulate.solver = cfg.fit.solver;
  }
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  cfg.plan.validate();
  return cfg;
}

fs::path output_dir(const RunConfig& cfg) {
  fs::path dir(cfg.output);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + cfg.output + "'");
  return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

int cmd_truth(const RunConfig& cfg) {
  const Truth t = marginal_truth(cfg.generation);
  const auto j = truth_json(t, cfg.generation);
  write_json(output_dir(cfg) / "truth.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_fit(const RunConfig& cfg) {
  if (cfg.fit.input.empty()) throw ConfigError("fit: no input file (use --input or [fit] input)");
  const Dataset data = ingest_csv(cfg.fit.input, cfg.fit.p_a);
  PipelineOptions o;
  o.choice.kind = cfg.fit.estimator;
  o.choice.solver = cfg.fit.solver;
  o.psm = named_spec(cfg.fit.psm, Target::psm, data.q(), data.m());
  o.om = named_spec(cfg.fit.om, Target::om, data.q(), data.m());
  o.controls = cfg.controls;
  o.plan = cfg.plan;
  o.threads = cfg.threads;
  o.naive_sandwich = cfg.fit.naive_sandwich;
  const PipelineResult r = run_pipeline(data, o);
  const auto j = fit_report(r, data, cfg);
  write_json(output_dir(cfg) / "report.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_simulate(const RunConfig& cfg) {
  const Truth t = marginal_truth(cfg.generation);
  std::vector<EstimatorRun> runs;
  for (const auto& label : cfg.simulate.estimators) {
    runs.push_back(make_estimator_run(label, cfg.simulate.solver, cfg, cfg.generation.q(), cfg.generation.m()));
  }
  const auto summary = run_replicates(cfg.generation, runs, cfg.simulate.replicates, t.vec(), cfg.threads);
  const auto dir = output_dir(cfg);
  {
    std::ofstream out(dir / "summary.csv");
    if (!out) throw ConfigError("cannot write summary.csv");
    write_summary_csv(summary, out);
  }
  write_json(dir / "summary.json", summary_json(summary));
  write_summary_csv(summary, std::cout);
  return 0;
}

int cmd_bench(const RunConfig& cfg) {
  const BenchResult r = run_bench(cfg.bench);
  const auto dir = output_dir(cfg);
  {
    std::ofstream out(dir / "bench.csv");
    if (!out) throw ConfigError("cannot write bench.csv");
    write_bench_csv(r, out);
  }
  write_json(dir / "bench.json", bench_json(r));
  write_bench_csv(r, std::cout);
  for (const auto& s : r.slopes) std::cout << "slope," << s.label << "," << s.slope << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal means and ICCs for cluster-randomized binary outcomes with missing data"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);
  app.fallthrough();   // global flags may also follow the subcommand
  Overrides o;
  app.add_option("--config", o.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "RNG seed");
  app.add_option("--threads", o.threads, "worker threads");
  app.add_option("--output", o.output, "output directory");

  auto add_sampling = [&](CLI::App* sub) {
    sub->add_option("--pi-s", o.pi_s, "subsampling proportion");
    sub->add_option("--omega-nuisance", o.omega_nuisance, "stochastic iterations for PSM and OM");
    sub->add_option("--omega-tm", o.omega_tm, "stochastic iterations for the treatment model");
    sub->add_option("--chains", o.chains, "parallel chains K");
    sub->add_option("--solver", o.solver, "full | stochastic | parallel");
  };

  auto* truth = app.add_subcommand("truth", "marginal treatment-model truth by quadrature");
  std::optional<std::string> truth_method;
  truth->add_option("--method", truth_method, "parzen | random_intercept");

  auto* fit = app.add_subcommand("fit", "fit the PSM -> OM -> TM pipeline to a CSV file");
  std::optional<std::string> input, psm, om;
  std::optional<double> p_a;
  bool naive = false;
  fit->add_option("--input", input, "long-format CSV");
  fit->add_option("--estimator", o.estimator, "cc | g1 | g2 | dr");
  fit->add_option("--psm", psm, "full | main");
  fit->add_option("--om", om, "full | main");
  fit->add_option("--p-a", p_a, "known treatment probability");
  fit->add_flag("--naive-sandwich", naive, "ignore nuisance estimation in the sandwich");
  add_sampling(fit);

  auto* sim = app.add_subcommand("simulate", "replicate simulation with bias / SE summary");
  std::optional<long> replicates, clusters;
  std::optional<std::vector<std::string>> estimators;
  std::optional<std::string> y_method;
  sim->add_option("--replicates", replicates, "number of replicates");
  sim->add_option("--clusters", clusters, "clusters per replicate");
  sim->add_option("--estimators", estimators, "cc g1 g2 dr dr-mispsm dr-misom")->delimiter(',');
  sim->add_option("--y-method", y_method, "parzen | random_intercept");
  add_sampling(sim);

  auto* bench = app.add_subcommand("bench", "per-iteration complexity benchmark");
  std::optional<std::vector<long>> sizes;
  std::optional<int> reps;
  bench->add_option("--sizes", sizes, "cluster sizes")->delimiter(',');
  bench->add_option("--repetitions", reps, "timed repetitions per point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    RunConfig cfg = resolve(o);
    if (*truth) {
      if (truth_method) cfg.generation.y_method = parse_method(*truth_method);
      return cmd_truth(cfg);
    }
    if (*fit) {
      if (input) cfg.fit.input = *input;
      if (psm) cfg.fit.psm = *psm;
      if (om) cfg.fit.om = *om;
      if (p_a) cfg.fit.p_a = *p_a;
      if (naive) cfg.fit.naive_sandwich = true;
      return cmd_fit(cfg);
    }
    if (*sim) {
      if (replicates) cfg.simulate.replicates = *replicates;
      if (clusters) cfg.generation.clusters = *clusters;
      if (estimators) cfg.simulate.estimators = *estimators;
      if (y_method) cfg.generation.y_method = parse_method(*y_method);
      return cmd_simulate(cfg);
    }
    if (*bench) {
      if (sizes) cfg.bench.sizes = *sizes;
      if (reps) cfg.bench.repetitions = *reps;
      return cmd_bench(cfg);
    }
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitParse;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageError& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const DivergenceError& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const InferenceError& e) {
    std::cerr << "convergence error: " << e.what() << "\n";
    return kExitConvergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
