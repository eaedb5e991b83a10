#pragma once

#include "iccgee/bench.hpp"
#include "iccgee/inference.hpp"
#include "iccgee/model.hpp"
#include "iccgee/simgen.hpp"

#include <json.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace iccgee {

// Long format, one row per subject: cluster_id, treat, y, z1..zq, x1..xm.
// An empty y field marks a missing outcome. Rows of a cluster need not be
// contiguous; clusters keep the order of first appearance.
Dataset read_csv(std::istream& in, std::optional<double> p_a = std::nullopt);
Dataset ingest_csv(const std::string& path, std::optional<double> p_a = std::nullopt);
void write_csv(const Dataset& data, std::ostream& out);
void write_csv(const Dataset& data, const std::string& path);

// ---------------------------------------------------------------------------
// INI configuration. Sections: [generation], [coefficients_y],
// [coefficients_r], [sampling], [controls], [fit], [simulate], [bench], [run].

struct FitSettings {
  std::string input;
  EstimatorKind estimator = EstimatorKind::doubly_robust;
  SolverKind solver = SolverKind::deterministic;
  std::string psm = "full";   // full | main
  std::string om = "full";
  std::optional<double> p_a;
  bool naive_sandwich = false;
};

struct SimulateSettings {
  long replicates = 200;
  std::vector<std::string> estimators{"cc", "g1", "g2", "dr", "dr-mispsm"};
  SolverKind solver = SolverKind::deterministic;
};

struct RunConfig {
  GenerationConfig generation;
  SamplingPlan plan;
  Controls controls;
  FitSettings fit;
  SimulateSettings simulate;
  BenchConfig bench;
  int threads = 1;
  std::string output = ".";
};

RunConfig default_config();
RunConfig load_config(const std::string& path);
RunConfig parse_config(std::istream& in);
std::vector<double> parse_list(const std::string& s);

// "full" or "main" (main effects only).
ModelSpec named_spec(const std::string& name, Target t, long q, long m);

// Estimator labels used by `simulate`: cc, g1, g2, dr, dr-mispsm, dr-misom.
EstimatorRun make_estimator_run(const std::string& label, SolverKind solver, const RunConfig& cfg,
                                long q, long m);

// ---------------------------------------------------------------------------
// Reports.

nlohmann::json fit_report(const PipelineResult& result, const Dataset& data, const RunConfig& cfg);
nlohmann::json summary_json(const ReplicateSummary& summary);
void write_summary_csv(const ReplicateSummary& summary, std::ostream& out);
nlohmann::json truth_json(const Truth& truth, const GenerationConfig& config);
void write_bench_csv(const BenchResult& result, std::ostream& out);
nlohmann::json bench_json(const BenchResult& result);

}  // namespace iccgee
