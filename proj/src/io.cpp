#include "iccgee/io.hpp"

#include "iccgee/errors.hpp"
#include "iccgee/version.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace iccgee {

using nlohmann::json;

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  boost::split(out, line, boost::is_any_of(","));
  for (auto& f : out) boost::trim(f);
  return out;
}

double parse_number(const std::string& s, long row, const std::string& column) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != end || !std::isfinite(v)) {
    throw ParseError("row " + std::to_string(row) + ": column '" + column + "' is not a number: '" + s + "'");
  }
  return v;
}

int parse_binary(const std::string& s, long row, const std::string& column) {
  const double v = parse_number(s, row, column);
  if (v != 0.0 && v != 1.0) {
    throw ParseError("row " + std::to_string(row) + ": column '" + column + "' must be 0 or 1");
  }
  return static_cast<int>(v);
}

// Index of a zk / xk column, or -1 when the name does not have that form.
long numbered(const std::string& name, char prefix) {
  if (name.size() < 2 || name[0] != prefix) return -1;
  long k = 0;
  const auto res = std::from_chars(name.data() + 1, name.data() + name.size(), k);
  if (res.ec != std::errc() || res.ptr != name.data() + name.size() || k < 1) return -1;
  return k - 1;
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

Dataset read_csv(std::istream& in, std::optional<double> p_a) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("row 1: missing header");
  const auto header = split_fields(line);
  long col_id = -1, col_a = -1, col_y = -1;
  std::map<long, long> zcols, xcols;
  for (long c = 0; c < static_cast<long>(header.size()); ++c) {
    const auto& h = header[static_cast<std::size_t>(c)];
    long k = -1;
    if (h == "cluster_id") col_id = c;
    else if (h == "treat") col_a = c;
    else if (h == "y") col_y = c;
    else if ((k = numbered(h, 'z')) >= 0) zcols[k] = c;
    else if ((k = numbered(h, 'x')) >= 0) xcols[k] = c;
    else throw ParseError("row 1: unknown column '" + h + "'");
  }
  if (col_id < 0 || col_a < 0 || col_y < 0) {
    throw ParseError("row 1: header must contain cluster_id, treat and y");
  }
  auto check_contiguous = [](const std::map<long, long>& m, char p) {
    long expect = 0;
    for (const auto& [k, c] : m) {
      if (k != expect++) throw ParseError("row 1: columns " + std::string(1, p) + "1.." + std::string(1, p) + "k must be consecutive");
    }
  };
  check_contiguous(zcols, 'z');
  check_contiguous(xcols, 'x');
  const long q = static_cast<long>(zcols.size());
  const long m = static_cast<long>(xcols.size());

  struct Building {
    int a;
    Eigen::VectorXd z;
    std::vector<Eigen::RowVectorXd> x;
    std::vector<std::optional<int>> y;
    long first_row;
  };
  std::vector<std::string> order;
  std::map<std::string, Building> clusters;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (boost::trim_copy(line).empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(f.size()));
    }
    const std::string& id = f[static_cast<std::size_t>(col_id)];
    if (id.empty()) throw ParseError("row " + std::to_string(row) + ": empty cluster_id");
    const int a = parse_binary(f[static_cast<std::size_t>(col_a)], row, "treat");
    Eigen::VectorXd z(q);
    for (const auto& [k, c] : zcols) z[k] = parse_number(f[static_cast<std::size_t>(c)], row, header[static_cast<std::size_t>(c)]);
    Eigen::RowVectorXd x(m);
    for (const auto& [k, c] : xcols) x[k] = parse_number(f[static_cast<std::size_t>(c)], row, header[static_cast<std::size_t>(c)]);
    const std::string& ys = f[static_cast<std::size_t>(col_y)];
    std::optional<int> y;
    if (!ys.empty()) y = parse_binary(ys, row, "y");

    auto it = clusters.find(id);
    if (it == clusters.end()) {
      order.push_back(id);
      clusters.emplace(id, Building{a, z, {x}, {y}, row});
      continue;
    }
    auto& b = it->second;
    if (b.a != a) {
      throw ParseError("row " + std::to_string(row) + ": treat varies within cluster '" + id + "'");
    }
    if (b.z != z) {
      throw ParseError("row " + std::to_string(row) + ": cluster-level covariates vary within cluster '" + id + "'");
    }
    b.x.push_back(x);
    b.y.push_back(y);
  }
  if (order.empty()) throw ParseError("row 2: no data rows");
  std::vector<ClusterData> out;
  for (const auto& id : order) {
    auto& b = clusters.at(id);
    Eigen::MatrixXd x(static_cast<long>(b.x.size()), m);
    for (std::size_t j = 0; j < b.x.size(); ++j) x.row(static_cast<long>(j)) = b.x[j];
    out.emplace_back(id, b.a, b.z, std::move(x), b.y);
  }
  return Dataset(std::move(out), p_a);
}

Dataset ingest_csv(const std::string& path, std::optional<double> p_a) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return read_csv(in, p_a);
}

void write_csv(const Dataset& data, std::ostream& out) {
  out << "cluster_id,treat,y";
  for (long k = 0; k < data.q(); ++k) out << ",z" << k + 1;
  for (long k = 0; k < data.m(); ++k) out << ",x" << k + 1;
  out << "\n";
  for (const auto& c : data.clusters()) {
    for (long j = 0; j < c.n(); ++j) {
      out << c.id() << "," << c.a() << ",";
      if (auto y = c.y(j)) out << *y;
      for (long k = 0; k < data.q(); ++k) out << "," << format_double(c.z()[k]);
      for (long k = 0; k < data.m(); ++k) out << "," << format_double(c.x()(j, k));
      out << "\n";
    }
  }
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_csv(data, out);
}

// ---------------------------------------------------------------------------

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::string t = s;
  boost::replace_all(t, ";", ",");
  for (auto& f : split_fields(t)) {
    if (f.empty()) continue;
    out.push_back(parse_number(f, 0, "list"));
  }
  return out;
}

namespace {

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

std::vector<long> to_longs(const std::vector<double>& v) {
  std::vector<long> out;
  for (double d : v) {
    if (d != std::floor(d)) throw ConfigError("expected integers, got " + std::to_string(d));
    out.push_back(static_cast<long>(d));
  }
  return out;
}

bool parse_bool(const std::string& s) {
  const auto t = boost::to_lower_copy(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("expected a boolean, got '" + s + "'");
}

ZetaVariant parse_zeta(const std::string& s) {
  if (s == "z1") return ZetaVariant::z1;
  if (s == "z2") return ZetaVariant::z2;
  if (s == "z3") return ZetaVariant::z3;
  throw ConfigError("unknown augmentation variant '" + s + "'");
}

void read_coefficients(const boost::property_tree::ptree& sec, Coefficients& c) {
  for (const auto& [key, node] : sec) {
    const std::string v = node.data();
    if (key == "b0") c.b0 = parse_list(v).at(0);
    else if (key == "b_a") c.b_a = parse_list(v).at(0);
    else if (key == "a0") c.a0 = parse_list(v).at(0);
    else if (key == "a_a") c.a_a = parse_list(v).at(0);
    else if (key == "bz") c.bz = to_vector(parse_list(v));
    else if (key == "bz_a") c.bz_a = to_vector(parse_list(v));
    else if (key == "bx") c.bx = to_vector(parse_list(v));
    else if (key == "bx_a") c.bx_a = to_vector(parse_list(v));
    else if (key == "az") c.az = to_vector(parse_list(v));
    else if (key == "az_a") c.az_a = to_vector(parse_list(v));
    else throw ConfigError("unknown coefficient key '" + key + "'");
  }
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

RunConfig parse_config(std::istream& in) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg = default_config();
  bool r_coefficients_set = false;
  for (const auto& [section, sec] : pt) {
    if (sec.empty() && !sec.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    auto each = [&](auto&& handle) {
      for (const auto& [key, node] : sec) {
        const std::string v = node.data();
        try {
          if (!handle(key, v)) throw ConfigError("unknown key");
        } catch (const ConfigError& e) {
          throw ConfigError("config [" + section + "] " + key + ": " + e.what());
        } catch (const ParseError& e) {
          throw ConfigError("config [" + section + "] " + key + ": " + e.what());
        } catch (const std::exception& e) {
          throw ConfigError("config [" + section + "] " + key + ": invalid value '" + v + "'");
        }
      }
    };
    if (section == "generation") {
      auto& g = cfg.generation;
      each([&](const std::string& k, const std::string& v) {
        if (k == "y_method") g.y_method = parse_method(v);
        else if (k == "r_method") g.r_method = parse_method(v);
        else if (k == "missingness") g.missingness = parse_bool(v);
        else if (k == "clusters") g.clusters = std::stol(v);
        else if (k == "n_min") g.n_min = std::stol(v);
        else if (k == "n_max") g.n_max = std::stol(v);
        else if (k == "x_min") g.x_min = to_vector(parse_list(v));
        else if (k == "x_max") g.x_max = to_vector(parse_list(v));
        else if (k == "z_min") g.z_min = to_longs(parse_list(v));
        else if (k == "z_max") g.z_max = to_longs(parse_list(v));
        else if (k == "p_a") g.p_a = std::stod(v);
        else if (k == "seed") g.seed = std::stoull(v);
        else return false;
        return true;
      });
    } else if (section == "coefficients_y") {
      read_coefficients(sec, cfg.generation.y);
    } else if (section == "coefficients_r") {
      read_coefficients(sec, cfg.generation.r);
      r_coefficients_set = true;
    } else if (section == "sampling") {
      auto& p = cfg.plan;
      each([&](const std::string& k, const std::string& v) {
        if (k == "pi_s") p.pi_s = std::stod(v);
        else if (k == "omega_nuisance") p.omega_nuisance = std::stoi(v);
        else if (k == "omega_tm") p.omega_tm = std::stoi(v);
        else if (k == "chains") p.chains = std::stoi(v);
        else if (k == "second_round") p.second_round = parse_bool(v);
        else if (k == "zeta") p.zeta = parse_zeta(v);
        else if (k == "seed") p.seed = std::stoull(v);
        else return false;
        return true;
      });
    } else if (section == "controls") {
      auto& c = cfg.controls;
      each([&](const std::string& k, const std::string& v) {
        if (k == "tol") c.tol = std::stod(v);
        else if (k == "max_iter") c.max_iter = std::stoi(v);
        else if (k == "condition_threshold") c.condition_threshold = std::stod(v);
        else if (k == "max_halvings") c.max_halvings = std::stoi(v);
        else if (k == "positivity_floor") c.positivity_floor = std::stod(v);
        else return false;
        return true;
      });
    } else if (section == "fit") {
      auto& f = cfg.fit;
      each([&](const std::string& k, const std::string& v) {
        if (k == "input") f.input = v;
        else if (k == "estimator") f.estimator = parse_estimator(v);
        else if (k == "solver") f.solver = parse_solver(v);
        else if (k == "psm") f.psm = v;
        else if (k == "om") f.om = v;
        else if (k == "p_a") f.p_a = std::stod(v);
        else if (k == "naive_sandwich") f.naive_sandwich = parse_bool(v);
        else return false;
        return true;
      });
    } else if (section == "simulate") {
      auto& s = cfg.simulate;
      each([&](const std::string& k, const std::string& v) {
        if (k == "replicates") s.replicates = std::stol(v);
        else if (k == "solver") s.solver = parse_solver(v);
        else if (k == "estimators") {
          s.estimators.clear();
          std::string t = v;
          boost::replace_all(t, ";", ",");
          for (auto& e : split_fields(t)) if (!e.empty()) s.estimators.push_back(e);
        } else return false;
        return true;
      });
    } else if (section == "bench") {
      auto& b = cfg.bench;
      each([&](const std::string& k, const std::string& v) {
        if (k == "sizes") b.sizes = to_longs(parse_list(v));
        else if (k == "repetitions") b.repetitions = std::stoi(v);
        else if (k == "upsilon") b.upsilon = std::stol(v);
        else if (k == "clusters") b.clusters = std::stoi(v);
        else if (k == "arbitrary_pair_limit") b.arbitrary_pair_limit = std::stol(v);
        else if (k == "seed") b.seed = std::stoull(v);
        else if (k == "structures") {
          b.structures.clear();
          for (auto& e : split_fields(v)) if (!e.empty()) b.structures.push_back(parse_structure(e));
        } else return false;
        return true;
      });
    } else if (section == "run") {
      each([&](const std::string& k, const std::string& v) {
        if (k == "threads") cfg.threads = std::stoi(v);
        else if (k == "output") cfg.output = v;
        else return false;
        return true;
      });
    } else {
      throw ConfigError("config: unknown section [" + section + "]");
    }
  }
  // Missingness shares the outcome coefficients unless given separately.
  if (!r_coefficients_set) cfg.generation.r = cfg.generation.y;
  cfg.generation.validate();
  cfg.plan.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

ModelSpec named_spec(const std::string& name, Target t, long q, long m) {
  if (name == "full") return ModelSpec::full(t, q, m);
  if (name == "main") return ModelSpec::main_effects(t, q, m);
  throw ConfigError("unknown model specification '" + name + "' (expected full or main)");
}

EstimatorRun make_estimator_run(const std::string& label, SolverKind solver, const RunConfig& cfg,
                                long q, long m) {
  std::vector<std::string> parts;
  boost::split(parts, label, boost::is_any_of("-"));
  EstimatorRun run;
  run.label = label;
  auto& o = run.options;
  o.choice.kind = parse_estimator(parts.at(0));
  o.choice.solver = solver;
  o.controls = cfg.controls;
  o.plan = cfg.plan;
  o.psm = ModelSpec::full(Target::psm, q, m);
  o.om = ModelSpec::full(Target::om, q, m);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    if (parts[k] == "mispsm") o.psm = ModelSpec::main_effects(Target::psm, q, m);
    else if (parts[k] == "misom") o.om = ModelSpec::main_effects(Target::om, q, m);
    else throw ConfigError("unknown estimator modifier '" + parts[k] + "' in '" + label + "'");
  }
  return run;
}

// ---------------------------------------------------------------------------

namespace {

json named_values(const std::vector<std::string>& names, const Eigen::VectorXd& v) {
  json out = json::object();
  for (std::size_t k = 0; k < names.size() && static_cast<long>(k) < v.size(); ++k) {
    out[names[k]] = v[static_cast<long>(k)];
  }
  return out;
}

std::vector<std::string> stacked_names(const ModelSpec& s) {
  std::vector<std::string> out;
  for (const auto& n : s.mean_names()) out.push_back("beta." + n);
  for (const auto& n : s.corr_names()) out.push_back("alpha." + n);
  return out;
}

json nuisance_json(const FitResult& f) {
  return {{"spec", stacked_names(f.spec)},
          {"estimates", named_values(stacked_names(f.spec), f.theta.stacked())},
          {"converged", f.converged},
          {"iterations", f.iterations},
          {"condition", f.condition},
          {"seconds", f.seconds}};
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

json nan_safe(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

const char* kTmLabels[4] = {"beta0", "beta_A", "alpha0", "alpha_A"};

}  // namespace

json fit_report(const PipelineResult& r, const Dataset& data, const RunConfig& cfg) {
  json tm = json::object();
  const Eigen::VectorXd est = r.tm.theta.stacked();
  const auto names = stacked_names(r.tm.spec);
  json params = json::array();
  for (long k = 0; k < est.size(); ++k) {
    json p = {{"name", names[static_cast<std::size_t>(k)]}, {"estimate", est[k]}};
    if (r.tm_se.size() == est.size() && r.tm_se[k] > 0.0) {
      const auto w = wald(est[k], r.tm_se[k]);
      const auto ci = wald_interval(est[k], r.tm_se[k]);
      p["se"] = r.tm_se[k];
      p["z"] = w.statistic;
      p["p_value"] = w.p_value;
      p["ci95"] = {ci.lower, ci.upper};
    }
    params.push_back(p);
  }
  tm["parameters"] = params;
  tm["converged"] = r.tm.converged;
  tm["iterations"] = r.tm.iterations;
  tm["condition"] = r.tm.condition;
  tm["seconds"] = r.seconds.tm;
  if (r.tm.theta.alpha.size() >= 2) {
    // ICC per arm on the correlation scale.
    tm["icc"] = {{"control", std::tanh(r.tm.theta.alpha[0])},
                 {"treated", std::tanh(r.tm.theta.alpha[0] + r.tm.theta.alpha[1])}};
  }
  if (r.sandwich) {
    tm["covariance"] = json::array();
    const Eigen::MatrixXd c = r.sandwich->tm_covariance();
    for (long i = 0; i < c.rows(); ++i) {
      json row = json::array();
      for (long j = 0; j < c.cols(); ++j) row.push_back(c(i, j));
      tm["covariance"].push_back(row);
    }
    tm["gamma_condition"] = r.sandwich->condition;
  }

  json stages = {{"tm", tm}};
  if (r.psee) stages["psm"] = nuisance_json(*r.psee);
  if (r.omee) stages["om"] = nuisance_json(*r.omee);

  json report = {
      {"provenance",
       {{"version", kVersion},
        {"seed", cfg.plan.seed},
        {"config",
         {{"input", cfg.fit.input},
          {"estimator", estimator_name(r.choice.kind)},
          {"solver", solver_name(r.choice.solver)},
          {"psm", cfg.fit.psm},
          {"om", cfg.fit.om},
          {"naive_sandwich", cfg.fit.naive_sandwich},
          {"pi_s", cfg.plan.pi_s},
          {"omega_nuisance", cfg.plan.omega_nuisance},
          {"omega_tm", cfg.plan.omega_tm},
          {"chains", cfg.plan.chains},
          {"tol", cfg.controls.tol},
          {"max_iter", cfg.controls.max_iter}}}}},
      {"data",
       {{"clusters", data.size()},
        {"subjects", data.subjects()},
        {"p_a", r.p_a}}},
      {"estimator", estimator_name(r.choice.kind)},
      {"solver", solver_name(r.choice.solver)},
      {"stages", stages},
      {"seconds",
       {{"psm", r.seconds.psm}, {"om", r.seconds.om}, {"tm", r.seconds.tm}, {"inference", r.seconds.inference}}}};
  if (!r.chains.empty()) {
    std::vector<double> times;
    for (const auto& c : r.chains) if (c.converged) times.push_back(c.seconds);
    report["chains"] = {{"count", r.chains.size()},
                        {"converged", r.converged_chains},
                        {"median_seconds_converged", median_of(times)}};
  }
  return report;
}

json summary_json(const ReplicateSummary& s) {
  json rows = json::array();
  for (const auto& r : s.rows) {
    json params = json::array();
    for (int p = 0; p < 4; ++p) {
      params.push_back({{"name", kTmLabels[p]},
                        {"truth", s.truth[p]},
                        {"bias", nan_safe(r.bias[p])},
                        {"replicate_se", nan_safe(r.replicate_se[p])},
                        {"sandwich_se", nan_safe(r.sandwich_se[p])},
                        {"wald", nan_safe(r.wald[p])},
                        {"coverage", nan_safe(r.coverage[p])}});
    }
    rows.push_back({{"estimator", r.label},
                    {"runs", r.runs},
                    {"converged", r.converged},
                    {"errors",
                     {{"psm_only", r.psm_only},
                      {"om_only", r.om_only},
                      {"both_nuisance", r.both_nuisance},
                      {"tm", r.tm_errors},
                      {"inference", r.inference_errors}}},
                    {"parameters", params},
                    {"mean_seconds", {{"psm", r.mean_seconds.psm}, {"om", r.mean_seconds.om}, {"tm", r.mean_seconds.tm}}},
                    {"median_seconds", {{"psm", r.median_seconds.psm}, {"om", r.median_seconds.om}, {"tm", r.median_seconds.tm}}}});
  }
  return {{"version", kVersion}, {"replicates", s.replicates}, {"rows", rows}};
}

void write_summary_csv(const ReplicateSummary& s, std::ostream& out) {
  out << "estimator,parameter,truth,bias,replicate_se,sandwich_se,wald,coverage,runs,converged,"
         "psm_only,om_only,both_nuisance,tm_errors,inference_errors,median_tm_seconds\n";
  out << std::setprecision(10);
  for (const auto& r : s.rows) {
    for (int p = 0; p < 4; ++p) {
      out << r.label << "," << kTmLabels[p] << "," << s.truth[p] << "," << r.bias[p] << ","
          << r.replicate_se[p] << "," << r.sandwich_se[p] << "," << r.wald[p] << "," << r.coverage[p]
          << "," << r.runs << "," << r.converged << "," << r.psm_only << "," << r.om_only << ","
          << r.both_nuisance << "," << r.tm_errors << "," << r.inference_errors << ","
          << r.median_seconds.tm << "\n";
    }
  }
}

json truth_json(const Truth& t, const GenerationConfig& config) {
  return {{"version", kVersion},
          {"method", method_name(config.y_method)},
          {"beta0", t.beta0},
          {"beta_A", t.beta_a},
          {"alpha0", t.alpha0},
          {"alpha_A", t.alpha_a},
          {"quadrature_change", t.achieved_error}};
}

void write_bench_csv(const BenchResult& r, std::ostream& out) {
  out << "structure,solver,portion,n,median_seconds\n";
  out << std::setprecision(8);
  for (const auto& row : r.rows) {
    out << structure_name(row.structure) << "," << bench_solver_name(row.solver) << ","
        << portion_name(row.portion) << "," << row.n << ",";
    if (row.skipped) out << "skipped"; else out << row.seconds;
    out << "\n";
  }
}

json bench_json(const BenchResult& r) {
  json slopes = json::array();
  for (const auto& s : r.slopes) {
    slopes.push_back({{"label", s.label}, {"slope", nan_safe(s.slope)}, {"points", s.points}});
  }
  return {{"version", kVersion}, {"slopes", slopes}};
}

}  // namespace iccgee
