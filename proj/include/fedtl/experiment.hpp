#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtl/estimators.hpp"
#include "fedtl/federation.hpp"
#include "fedtl/metrics.hpp"
#include "fedtl/simulation.hpp"

namespace fedtl {

enum class Method { target_only, source_only, combined, proposed, proposed_T1, proposed_T3, pooled };
enum class TuningMode { theory_formula, cv };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::target_only: return "target_only";
    case Method::source_only: return "source_only";
    case Method::combined: return "combined";
    case Method::proposed: return "proposed";
    case Method::proposed_T1: return "proposed_T1";
    case Method::proposed_T3: return "proposed_T3";
    case Method::pooled: return "pooled";
  }
  return "?";
}

inline std::optional<Method> method_from_string(const std::string& s) {
  for (auto m : {Method::target_only, Method::source_only, Method::combined, Method::proposed, Method::proposed_T1,
                 Method::proposed_T3, Method::pooled})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

/// Rate constant used when none is configured. Logistic curvature is at most
/// 1/4, so its constant is smaller than the gaussian one.
inline double default_rate_constant(FamilyTag family) { return family == FamilyTag::logistic ? 0.3 : 1.0; }

inline const char* to_string(TuningMode t) { return t == TuningMode::theory_formula ? "theory_formula" : "cv"; }

struct ExperimentConfig {
  SimConfig scenario = SimConfig::desk();
  std::string scenario_path;  // serialized scenario directory; reused by every replication
  std::vector<Method> methods{Method::target_only, Method::source_only, Method::combined,
                              Method::proposed_T1, Method::proposed_T3, Method::pooled};
  int replications = 1;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // explicit per-replication scenario seeds
  std::string output_dir = "results";
  TuningMode tuning = TuningMode::theory_formula;
  int T = 3;  // rounds for the federated baselines and the `proposed` method
  EstimatorConfig estimator;  // estimator.c0 is ignored; see `c0`
  std::optional<double> c0;   // rate constant of every lambda; unset picks the family default
  bool aggregation = true;
  int cv_folds = 5;
  int jobs = 1;
  bool timing = false;  // wall_ms stays 0 unless enabled, keeping outputs byte-stable

  void validate() const {
    if (T < 1) throw ConfigError("T must be ≥ 1");
    if (methods.empty()) throw ConfigError("methods must be nonempty");
    if (replications < 1) throw ConfigError("replications must be ≥ 1");
    if (!seeds.empty() && static_cast<int>(seeds.size()) != replications)
      throw ConfigError("seeds must list exactly `replications` entries");
    if (jobs < 1) throw ConfigError("jobs must be ≥ 1");
    if (cv_folds < 2) throw ConfigError("cv_folds must be ≥ 2");
    if (c0 && !(*c0 > 0.0)) throw ConfigError("estimator.c0 must be > 0");
    if (scenario_path.empty()) scenario.validate();
    auto est = estimator;
    est.T = 1;
    est.validate();
  }

  /// Scenario seed of replication r.
  std::uint64_t replication_seed(int r) const {
    if (!seeds.empty()) return seeds[static_cast<std::size_t>(r)];
    return derive_seed(seed, static_cast<std::uint64_t>(r), 0, Stream::replication);
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : c.methods) methods.push_back(to_string(m));
  nlohmann::json est{{"algorithm", to_string(c.estimator.algorithm)},
                     {"init", to_string(c.estimator.init_strategy)},
                     {"c0", c.c0 ? nlohmann::json(*c.c0) : nlohmann::json(nullptr)},
                     {"h_assumed", c.estimator.h_assumed},
                     {"alg2_rho", c.estimator.alg2_rho},
                     {"tol", c.estimator.solver.tol},
                     {"max_iter", c.estimator.solver.max_iter}};
  est["c_n"] = c.estimator.c_n ? nlohmann::json(*c.estimator.c_n) : nlohmann::json(nullptr);
  nlohmann::json j{{"methods", methods},
                   {"replications", c.replications},
                   {"seed", c.seed},
                   {"output_dir", c.output_dir},
                   {"family", to_string(c.scenario.family)},
                   {"tuning", to_string(c.tuning)},
                   {"T", c.T},
                   {"estimator", est},
                   {"aggregation", c.aggregation},
                   {"cv_folds", c.cv_folds},
                   {"jobs", c.jobs},
                   {"timing", c.timing}};
  if (c.scenario_path.empty())
    j["scenario"] = to_json(c.scenario);
  else
    j["scenario_path"] = c.scenario_path;
  if (!c.seeds.empty()) j["seeds"] = c.seeds;
  return j;
}

/// Strict parse: unknown keys and ill-typed values throw ConfigError naming
/// the field. Range checks happen in `validate`.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "",
                     {"scenario", "scenario_path", "methods", "replications", "seed", "seeds", "output_dir", "family",
                      "tuning", "T", "estimator", "aggregation", "cv_folds", "jobs", "timing"});
  ExperimentConfig c;
  if (j.contains("scenario") && j.contains("scenario_path"))
    throw ConfigError("give either 'scenario' or 'scenario_path', not both");
  if (j.contains("scenario")) c.scenario = sim_config_from_json(j.at("scenario"), "scenario");
  detail::read_field(j, "scenario_path", "", c.scenario_path);
  if (j.contains("methods")) {
    const auto& ms = j.at("methods");
    if (!ms.is_array()) throw ConfigError("invalid value for 'methods' (expected an array)");
    c.methods.clear();
    for (const auto& m : ms) {
      const auto parsed = m.is_string() ? method_from_string(m.get<std::string>()) : std::nullopt;
      if (!parsed) throw ConfigError("invalid value in 'methods': " + m.dump());
      if (std::find(c.methods.begin(), c.methods.end(), *parsed) == c.methods.end()) c.methods.push_back(*parsed);
    }
  }
  detail::read_field(j, "replications", "", c.replications);
  detail::read_field(j, "seed", "", c.seed);
  detail::read_field(j, "seeds", "", c.seeds);
  detail::read_field(j, "output_dir", "", c.output_dir);
  if (j.contains("family")) {
    std::string f;
    detail::read_field(j, "family", "", f);
    try {
      c.scenario.family = family_from_string(f);
    } catch (const std::exception&) {
      throw ConfigError("invalid value for 'family' (expected logistic or gaussian)");
    }
  }
  if (j.contains("tuning")) {
    std::string t;
    detail::read_field(j, "tuning", "", t);
    if (t == "theory_formula")
      c.tuning = TuningMode::theory_formula;
    else if (t == "cv")
      c.tuning = TuningMode::cv;
    else
      throw ConfigError("invalid value for 'tuning' (expected theory_formula or cv)");
  }
  detail::read_field(j, "T", "", c.T);
  if (j.contains("estimator")) {
    const auto& e = j.at("estimator");
    detail::check_keys(e, "estimator", {"algorithm", "init", "c0", "c_n", "h_assumed", "alg2_rho", "tol", "max_iter"});
    if (e.contains("algorithm")) {
      std::string a;
      detail::read_field(e, "algorithm", "estimator", a);
      if (a == "alg1")
        c.estimator.algorithm = Algorithm::alg1;
      else if (a == "alg2")
        c.estimator.algorithm = Algorithm::alg2;
      else
        throw ConfigError("invalid value for 'estimator.algorithm' (expected alg1 or alg2)");
    }
    if (e.contains("init")) {
      std::string s;
      detail::read_field(e, "init", "estimator", s);
      if (s == "single_site")
        c.estimator.init_strategy = InitStrategy::single_site;
      else if (s == "multi_site")
        c.estimator.init_strategy = InitStrategy::multi_site;
      else
        throw ConfigError("invalid value for 'estimator.init' (expected single_site or multi_site)");
    }
    if (e.contains("c0") && !e.at("c0").is_null()) {
      double c0 = 0.0;
      detail::read_field(e, "c0", "estimator", c0);
      c.c0 = c0;
    }
    if (e.contains("c_n") && !e.at("c_n").is_null()) {
      int cn = 0;
      detail::read_field(e, "c_n", "estimator", cn);
      c.estimator.c_n = cn;
    }
    detail::read_field(e, "h_assumed", "estimator", c.estimator.h_assumed);
    detail::read_field(e, "alg2_rho", "estimator", c.estimator.alg2_rho);
    detail::read_field(e, "tol", "estimator", c.estimator.solver.tol);
    detail::read_field(e, "max_iter", "estimator", c.estimator.solver.max_iter);
  }
  detail::read_field(j, "aggregation", "", c.aggregation);
  detail::read_field(j, "cv_folds", "", c.cv_folds);
  detail::read_field(j, "jobs", "", c.jobs);
  detail::read_field(j, "timing", "", c.timing);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

/// Resolved config plus the penalty formulas evaluated at the configured
/// sample sizes.
inline nlohmann::json describe(const ExperimentConfig& c) {
  c.validate();
  nlohmann::json out{{"config", to_json(c)}};
  if (!c.scenario_path.empty()) return out;
  const auto& s = c.scenario;
  const Index dim = s.p + 1;
  Index n0 = 0, n1 = 0;
  for (int v : s.n_target) n0 += v;
  for (int v : s.n_source) n1 += v;
  const double c0 = c.c0.value_or(default_rate_constant(s.family));
  nlohmann::json lam{{"design_dim", dim}, {"N0", n0}, {"N1", n1}};
  if (n0 > 0) {
    const auto pen = theory_penalties(c0, dim, {{0, n0}, {1, n1}}, c.estimator.h_assumed);
    lam["lambda_source"] = {{"formula", "c0 * sqrt(log p / N1)"},
                            {"value", pen.source.count(1) ? nlohmann::json(pen.source.at(1)) : nlohmann::json(nullptr)}};
    lam["lambda_delta"] = {{"formula", "c0 * sqrt(log p / N0)"}, {"value", pen.delta}};
    lam["lambda_beta"] = {{"formula", "c0 * sqrt(log p / (N0 + N1)) + h_assumed * log p / N0"}, {"value", pen.beta}};
    lam["lambda_target_only"] = {{"formula", "c0 * sqrt(log p / N0)"}, {"value", lasso_rate(c0, dim, n0)}};
    lam["delta_threshold"] = {{"formula", "floor(sqrt(N0 / log p))"}, {"value", delta_threshold_budget(n0, dim)}};
  }
  lam["c0"] = c0;
  lam["c0_source"] = c.tuning == TuningMode::cv ? "cross-validated at the leading site"
                     : c.c0                     ? "configured"
                                                : "family default";
  out["penalties"] = lam;
  return out;
}

// ---------------------------------------------------------------------------
// One replication

struct MethodFit {
  Vector beta;
  std::uint64_t gradient_bytes = 0;
  std::uint64_t hessian_bytes = 0;
  int rounds = 0;
  int aggregation_selected = -1;  // 0 target-only, 1 transfer; -1 when not aggregated
  std::optional<CoefficientSet> transfer;
};

struct ReplicationOutcome {
  std::uint64_t seed = 0;
  std::vector<ReplicationReport> reports;
  std::map<Method, MethodFit> fits;
  double c0 = 1.0;
  std::string header_log;
};

namespace detail {

/// c0 such that c0 sqrt(log p / n) equals the CV-selected lambda of a lasso on
/// the leading site's target rows.
inline double cross_validated_c0(const Scenario& sc, const GlmFamily& family, const ExperimentConfig& cfg,
                                 std::uint64_t seed) {
  const int lead = sc.config.leading_site;
  std::vector<Index> rows(sc.train.cell(lead, 0).begin(), sc.train.cell(lead, 0).end());
  const auto local = sc.train.subset(rows);
  const auto n = static_cast<double>(local.rows());
  std::vector<Index> all(static_cast<std::size_t>(local.rows()));
  std::iota(all.begin(), all.end(), Index{0});
  const double lmax = lambda_max(GlmLoss::from_rows(family, local, all, 1.0 / n));
  const auto grid = lambda_grid(lmax);
  const auto opts = cfg.estimator.solver;
  FitFunction fit = [&](double lambda, const PartitionedDataset& train) {
    std::vector<Index> idx(static_cast<std::size_t>(train.rows()));
    std::iota(idx.begin(), idx.end(), Index{0});
    const auto loss = GlmLoss::from_rows(family, train, idx, 1.0 / static_cast<double>(train.rows()));
    return solve_l1(loss, lambda, Vector::Zero(train.dim()), opts).coef;
  };
  const auto cv = cross_validate_lambda(fit, local, family, cfg.cv_folds, grid, seed);
  return cv.lambda / std::sqrt(std::log(static_cast<double>(local.dim())) / n);
}

inline void add_ledger(MethodFit& f, const Federation& fed) {
  const auto t = ledger_totals(fed.ledger());
  f.gradient_bytes = t.gradient_bytes;
  f.hessian_bytes = t.hessian_bytes;
  f.rounds = fed.rounds();
}

}  // namespace detail

/// Fits one method on a prepared scenario. Each call opens a fresh
/// federation session so the communication totals are per method.
inline MethodFit fit_method(Method method, const Scenario& sc, const Federation& base, const ExperimentConfig& cfg,
                            double c0, std::ostream* header_log = nullptr) {
  const GlmFamily family = base.family();
  EstimatorConfig est = cfg.estimator;
  est.c0 = c0;
  est.leading_site = sc.config.leading_site;
  est.T = cfg.T;
  MethodFit out;
  Federation fed = base.session(header_log);
  const Index dim = fed.dim();

  auto baseline = [&](const std::set<int>& pops) {
    Index n = 0;
    for (int k : pops) n += fed.population_count(k);
    if (n == 0) throw EmptyPopulationError("no training rows for the requested populations");
    const Vector init = init_local_lasso(fed, pops, c0, est.solver);
    int best_local = 0;
    for (int m : fed.site_ids()) {
      Index local = 0;
      for (int k : pops) local += fed.count(m, k);
      best_local = std::max(best_local, static_cast<int>(local));
    }
    const int c_n = est.c_n.value_or(default_c_n(best_local, dim));
    return fed_lasso(fed, pops, lasso_rate(c0, dim, n), cfg.T, c_n, init, est.solver);
  };

  switch (method) {
    case Method::target_only:
    case Method::source_only:
    case Method::combined: {
      const std::set<int> pops = method == Method::target_only   ? std::set<int>{0}
                                 : method == Method::source_only ? std::set<int>{1}
                                                                 : std::set<int>{0, 1};
      const auto fit = baseline(pops);
      if (fit.aborted) throw SolverDivergence("federated lasso diverged");
      out.beta = fit.beta;
      detail::add_ledger(out, fed);
      break;
    }
    case Method::proposed:
    case Method::proposed_T1:
    case Method::proposed_T3: {
      est.T = method == Method::proposed_T1 ? 1 : (method == Method::proposed_T3 ? 3 : cfg.T);
      const auto init = initialize(fed, est);
      auto transfer = fed_transfer(fed, est, init);
      if (transfer.aborted && transfer.round == 0) throw SolverDivergence("transfer estimator diverged in round 1");
      out.beta = transfer.beta;
      if (cfg.aggregation && sc.validation.rows() > 0) {
        const auto target = baseline({0});
        const auto agg = aggregate(transfer.beta, target.beta, sc.validation, family);
        out.beta = agg.beta_agg;
        out.aggregation_selected = agg.selected;
      }
      out.transfer = std::move(transfer);
      detail::add_ledger(out, fed);
      break;
    }
    case Method::pooled: {
      const auto counts = detail::population_counts(fed);
      const Penalties pen =
          est.penalties ? *est.penalties : theory_penalties(c0, dim, counts, est.h_assumed);
      auto fit = pooled_transfer(sc.train, family, pen, est.solver);
      out.beta = fit.beta;
      out.transfer = std::move(fit);
      break;
    }
  }
  return out;
}

inline ReplicationReport evaluate_fit(Method method, std::uint64_t seed, const MethodFit& fit, const Scenario& sc,
                                      const GlmFamily& family) {
  ReplicationReport r;
  r.method = to_string(method);
  r.seed = seed;
  const Vector slopes = fit.beta.tail(fit.beta.size() - 1);
  r.mse = mse(slopes, sc.beta_slopes());
  r.sse = sse(slopes, sc.beta_slopes());
  if (family.tag == FamilyTag::logistic && sc.test_x.rows() > 0) {
    const Vector scores = sc.test_x * fit.beta;
    try {
      r.auc = auc(scores, sc.test_y);
    } catch (const MetricError&) {
    }
    try {
      r.odds_ratio = odds_ratio_quintiles(scores, sc.test_y);
    } catch (const MetricError&) {
    }
  }
  r.comm_gradient_bytes = fit.gradient_bytes;
  r.comm_hessian_bytes = fit.hessian_bytes;
  r.rounds = fit.rounds;
  return r;
}

inline Scenario load_or_build_scenario(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (!cfg.scenario_path.empty()) return prepare(read_scenario(cfg.scenario_path));
  SimConfig sim = cfg.scenario;
  sim.seed = seed;
  return build_federated_scenario(sim);
}

/// Scenario from the replication seed, every configured method, metrics on
/// the held-out target test set. A failing method yields a row carrying the
/// error text; the remaining methods still run.
inline ReplicationOutcome run_replication(const ExperimentConfig& cfg, int r, bool capture_headers = false) {
  ReplicationOutcome out;
  out.seed = cfg.replication_seed(r);
  const Scenario sc = load_or_build_scenario(cfg, out.seed);
  const GlmFamily family =
      sc.config.family == FamilyTag::logistic ? GlmFamily::logistic() : GlmFamily::gaussian();
  const Federation base(split_by_site(sc.train, family));
  out.c0 = cfg.c0.value_or(default_rate_constant(sc.config.family));
  if (cfg.tuning == TuningMode::cv)
    out.c0 = detail::cross_validated_c0(sc, family, cfg, derive_seed(out.seed, 0, 0, Stream::folds));
  std::ostringstream headers;
  for (Method m : cfg.methods) {
    const auto start = std::chrono::steady_clock::now();
    ReplicationReport report;
    try {
      if (capture_headers) headers << "{\"method\":\"" << to_string(m) << "\",\"seed\":" << out.seed << "}\n";
      auto fit = fit_method(m, sc, base, cfg, out.c0, capture_headers ? &headers : nullptr);
      report = evaluate_fit(m, out.seed, fit, sc, family);
      out.fits[m] = std::move(fit);
    } catch (const std::exception& e) {
      report = ReplicationReport{};
      report.method = to_string(m);
      report.seed = out.seed;
      report.error = e.what();
    }
    if (cfg.timing)
      report.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.reports.push_back(std::move(report));
  }
  out.header_log = headers.str();
  return out;
}

/// Runs replications on `jobs` workers; results come back in replication order.
inline std::vector<ReplicationOutcome> run_replications(const ExperimentConfig& cfg, bool capture_headers = false) {
  std::vector<ReplicationOutcome> results(static_cast<std::size_t>(cfg.replications));
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (int r = next++; r < cfg.replications; r = next++) {
      try {
        results[static_cast<std::size_t>(r)] = run_replication(cfg, r, capture_headers);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const int jobs = std::min(cfg.jobs, cfg.replications);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);
  return results;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct ExperimentSummary {
  std::vector<ReplicationReport> reports;
  nlohmann::json summary;
  std::vector<std::filesystem::path> files;
};

inline std::string file_digest(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  const std::string content{std::istreambuf_iterator<char>(is), {}};
  const auto bytes = std::as_bytes(std::span(content.data(), content.size()));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

/// Writes results.csv, summary.json, manifest.json (and headers.jsonl when
/// requested) under cfg.output_dir.
inline ExperimentSummary run_experiment(const ExperimentConfig& cfg, bool write_headers = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);

  const auto outcomes = run_replications(cfg, write_headers);
  ExperimentSummary out;
  {
    std::ofstream csv(dir / "results.csv", std::ios::binary);
    if (!csv) throw ConfigError("output directory is not writable: " + dir.string());
    csv << csv_header() << '\n';
    for (const auto& o : outcomes)
      for (const auto& r : o.reports) {
        write_csv_row(csv, r);
        out.reports.push_back(r);
      }
  }
  out.files.push_back(dir / "results.csv");
  if (write_headers) {
    std::ofstream hl(dir / "headers.jsonl", std::ios::binary);
    for (const auto& o : outcomes) hl << o.header_log;
    out.files.push_back(dir / "headers.jsonl");
  }

  nlohmann::json seeds = nlohmann::json::array();
  nlohmann::json c0s = nlohmann::json::array();
  for (const auto& o : outcomes) {
    seeds.push_back(o.seed);
    c0s.push_back(o.c0);
  }
  out.summary = {{"replications", cfg.replications},
                 {"mse_normalization", "squared error over the p genotype coefficients divided by p"},
                 {"methods", summarize_reports(out.reports)}};
  {
    std::ofstream js(dir / "summary.json", std::ios::binary);
    js << out.summary.dump(2) << '\n';
  }
  out.files.push_back(dir / "summary.json");

  nlohmann::json files = nlohmann::json::object();
  for (const auto& f : out.files) files[f.filename().string()] = {{"fnv1a64", file_digest(f)}, {"bytes", fs::file_size(f)}};
  const nlohmann::json manifest{{"config", to_json(cfg)}, {"seeds", seeds}, {"c0", c0s}, {"files", files}};
  std::ofstream mf(dir / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << '\n';
  return out;
}

}  // namespace fedtl
