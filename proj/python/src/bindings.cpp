#include "iccgee/bench.hpp"
#include "iccgee/errors.hpp"
#include "iccgee/inference.hpp"
#include "iccgee/io.hpp"
#include "iccgee/simgen.hpp"
#include "iccgee/version.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace iccgee;

namespace {

// Results cross the boundary as JSON text; the Python side decodes them.
RunConfig config_from(const std::optional<std::string>& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = path ? load_config(*path) : default_config();
  if (seed) {
    cfg.generation.seed = *seed;
    cfg.plan.seed = *seed;
    cfg.bench.seed = *seed;
  }
  return cfg;
}

std::string truth(const std::optional<std::string>& config, const std::optional<std::string>& method) {
  RunConfig cfg = config_from(config, std::nullopt);
  if (method) cfg.generation.y_method = parse_method(*method);
  py::gil_scoped_release release;
  return truth_json(marginal_truth(cfg.generation), cfg.generation).dump();
}

long generate(const std::string& path, const std::optional<std::string>& config, std::optional<long> clusters,
              std::optional<long> n_min, std::optional<long> n_max, std::optional<std::uint64_t> seed,
              long replicate) {
  RunConfig cfg = config_from(config, seed);
  if (clusters) cfg.generation.clusters = *clusters;
  if (n_min) cfg.generation.n_min = *n_min;
  if (n_max) cfg.generation.n_max = *n_max;
  const Dataset d = generate_dataset(cfg.generation, replicate);
  write_csv(d, path);
  return d.size();
}

std::string fit(const std::string& path, const std::string& estimator, const std::string& solver,
                const std::string& psm, const std::string& om, std::optional<double> p_a,
                const std::optional<std::string>& config, std::optional<std::uint64_t> seed,
                std::optional<double> pi_s, bool sandwich, int threads) {
  RunConfig cfg = config_from(config, seed);
  cfg.fit.input = path;
  cfg.fit.estimator = parse_estimator(estimator);
  cfg.fit.solver = parse_solver(solver);
  cfg.fit.psm = psm;
  cfg.fit.om = om;
  if (p_a) cfg.fit.p_a = p_a;
  if (pi_s) cfg.plan.pi_s = *pi_s;
  cfg.plan.validate();
  const Dataset data = ingest_csv(path, cfg.fit.p_a);
  PipelineOptions o;
  o.choice.kind = cfg.fit.estimator;
  o.choice.solver = cfg.fit.solver;
  o.psm = named_spec(psm, Target::psm, data.q(), data.m());
  o.om = named_spec(om, Target::om, data.q(), data.m());
  o.controls = cfg.controls;
  o.plan = cfg.plan;
  o.threads = threads;
  o.sandwich = sandwich;
  py::gil_scoped_release release;
  return fit_report(run_pipeline(data, o), data, cfg).dump();
}

std::string simulate(const std::optional<std::string>& config, std::optional<long> replicates,
                     std::optional<long> clusters, std::optional<long> n_min, std::optional<long> n_max,
                     const std::optional<std::vector<std::string>>& estimators, const std::string& solver,
                     const std::optional<std::string>& y_method, std::optional<std::uint64_t> seed,
                     bool sandwich, int threads) {
  RunConfig cfg = config_from(config, seed);
  if (replicates) cfg.simulate.replicates = *replicates;
  if (clusters) cfg.generation.clusters = *clusters;
  if (n_min) cfg.generation.n_min = *n_min;
  if (n_max) cfg.generation.n_max = *n_max;
  if (estimators) cfg.simulate.estimators = *estimators;
  if (y_method) cfg.generation.y_method = parse_method(*y_method);
  const SolverKind sk = parse_solver(solver);
  std::vector<EstimatorRun> runs;
  for (const auto& label : cfg.simulate.estimators) {
    runs.push_back(make_estimator_run(label, sk, cfg, cfg.generation.q(), cfg.generation.m()));
    runs.back().options.sandwich = sandwich;
  }
  py::gil_scoped_release release;
  const Truth t = marginal_truth(cfg.generation);
  return summary_json(run_replicates(cfg.generation, runs, cfg.simulate.replicates, t.vec(), threads)).dump();
}

std::string bench(const std::optional<std::vector<long>>& sizes, std::optional<int> repetitions,
                  std::optional<long> upsilon, const std::optional<std::vector<std::string>>& structures) {
  BenchConfig b;
  if (sizes) b.sizes = *sizes;
  if (repetitions) b.repetitions = *repetitions;
  if (upsilon) b.upsilon = *upsilon;
  if (structures) {
    b.structures.clear();
    for (const auto& s : *structures) b.structures.push_back(parse_structure(s));
  }
  b.validate();
  py::gil_scoped_release release;
  return bench_json(run_bench(b)).dump();
}

}  // namespace

PYBIND11_MODULE(_iccgee, m) {
  m.doc() = "Marginal means and ICCs for cluster-randomized binary outcomes with missing data";
  m.attr("__version__") = kVersion;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<StageError>(m, "StageError", base.ptr());

  m.def("truth", &truth, py::arg("config") = py::none(), py::arg("method") = py::none());
  m.def("generate", &generate, py::arg("path"), py::arg("config") = py::none(), py::arg("clusters") = py::none(),
        py::arg("n_min") = py::none(), py::arg("n_max") = py::none(), py::arg("seed") = py::none(),
        py::arg("replicate") = 0);
  m.def("fit", &fit, py::arg("path"), py::arg("estimator") = "dr", py::arg("solver") = "full",
        py::arg("psm") = "full", py::arg("om") = "full", py::arg("p_a") = py::none(),
        py::arg("config") = py::none(), py::arg("seed") = py::none(), py::arg("pi_s") = py::none(),
        py::arg("sandwich") = true, py::arg("threads") = 1);
  m.def("simulate", &simulate, py::arg("config") = py::none(), py::arg("replicates") = py::none(),
        py::arg("clusters") = py::none(), py::arg("n_min") = py::none(), py::arg("n_max") = py::none(),
        py::arg("estimators") = py::none(), py::arg("solver") = "full", py::arg("y_method") = py::none(),
        py::arg("seed") = py::none(), py::arg("sandwich") = true, py::arg("threads") = 1);
  m.def("bench", &bench, py::arg("sizes") = py::none(), py::arg("repetitions") = py::none(),
        py::arg("upsilon") = py::none(), py::arg("structures") = py::none());
}
