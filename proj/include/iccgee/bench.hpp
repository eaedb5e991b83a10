#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace iccgee {

enum class Structure { arbitrary, equicorrelated, independence, identity };
enum class Portion { gee1, gee2, overall };
enum class BenchSolver { full, stochastic };

const char* structure_name(Structure s);
const char* portion_name(Portion p);
const char* bench_solver_name(BenchSolver s);
Structure parse_structure(const std::string& s);

struct BenchConfig {
  std::vector<long> sizes{50, 100, 200, 400};
  int repetitions = 21;
  int warmup = 3;
  // pi_S = upsilon / n. The O(upsilon^2) pair work competes with the O(n)
  // GEE1 work on small grids; see the README before raising it.
  long upsilon = 5;
  int clusters = 4;
  std::vector<Structure> structures{Structure::arbitrary, Structure::equicorrelated,
                                    Structure::independence, Structure::identity};
  // Dense pair covariances beyond this many pairs are not timed.
  long arbitrary_pair_limit = 1300;
  double min_sample_seconds = 2e-4;
  std::uint64_t seed = 7;

  void validate() const;
};

struct BenchRow {
  Structure structure;
  BenchSolver solver;
  Portion portion;
  long n = 0;
  double seconds = 0.0;   // median per scoring iteration
  bool skipped = false;
};

struct BenchSlope {
  std::string label;
  Structure structure;
  BenchSolver solver;
  Portion portion;
  double slope = 0.0;
  int points = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<BenchSlope> slopes;

  // NaN when the combination was not timed on enough sizes.
  double slope(Structure s, BenchSolver v, Portion p) const;
};

// Least-squares slope of log(t) against log(n).
double loglog_slope(const std::vector<double>& n, const std::vector<double>& t);

BenchResult run_bench(const BenchConfig& config);

}  // namespace iccgee
