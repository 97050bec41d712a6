#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedtl/federation.hpp"
#include "fedtl/glm.hpp"
#include "fedtl/solver.hpp"

namespace fedtl {

// ---------------------------------------------------------------------------
// Configuration

enum class Algorithm { pooled, alg1, alg2 };
enum class InitStrategy { single_site, multi_site };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::pooled: return "pooled";
    case Algorithm::alg1: return "alg1";
    case Algorithm::alg2: return "alg2";
  }
  return "?";
}
inline const char* to_string(InitStrategy s) { return s == InitStrategy::single_site ? "single_site" : "multi_site"; }

/// Penalty levels for one transfer fit: lambda^(k) per source population,
/// lambda_delta for the contrasts, lambda_beta for the joint step.
struct Penalties {
  std::map<int, double> source;
  double delta = 0.0;
  double beta = 0.0;
};

/// lambda^(k) = c0 sqrt(log p / N^(k)), lambda_delta = c0 sqrt(log p / N^(0)),
/// lambda_beta = c0 sqrt(log p / N) + h log p / N^(0).
/// `counts` maps population -> sample size; population 0 must be present.
inline Penalties theory_penalties(double c0, Index p, const std::map<int, Index>& counts, double h = 0.0) {
  detail::require(p >= 2, "theory penalties need p >= 2");
  auto it0 = counts.find(0);
  detail::require(it0 != counts.end() && it0->second > 0, "theory penalties need target samples");
  const double lp = std::log(static_cast<double>(p));
  Penalties pen;
  double total = 0.0;
  for (const auto& [k, n] : counts) {
    total += static_cast<double>(n);
    if (k != 0 && n > 0) pen.source[k] = c0 * std::sqrt(lp / static_cast<double>(n));
  }
  const double n0 = static_cast<double>(it0->second);
  pen.delta = c0 * std::sqrt(lp / n0);
  pen.beta = c0 * std::sqrt(lp / total) + h * lp / n0;
  return pen;
}

inline double lasso_rate(double c0, Index p, Index n) {
  detail::require(n > 0, "lasso rate needs n > 0");
  return c0 * std::sqrt(std::log(static_cast<double>(p)) / static_cast<double>(n));
}

/// floor(sqrt(N^(0) / log p)), at least 1 and at most p.
inline int delta_threshold_budget(Index n0, Index p) {
  const double v = std::floor(std::sqrt(static_cast<double>(n0) / std::log(static_cast<double>(p))));
  return static_cast<int>(std::clamp(v, 1.0, static_cast<double>(p)));
}

/// round(c0 sqrt(n_init / log p)), clamped to [1, p].
inline int default_c_n(Index n_init, Index p, double c0 = 1.0) {
  const double v = std::round(c0 * std::sqrt(static_cast<double>(n_init) / std::log(static_cast<double>(p))));
  return static_cast<int>(std::clamp(v, 1.0, static_cast<double>(p)));
}

struct EstimatorConfig {
  int T = 1;
  Algorithm algorithm = Algorithm::alg1;
  InitStrategy init_strategy = InitStrategy::single_site;
  int leading_site = 1;
  double c0 = 1.0;                     // rate constant in every lambda formula
  double h_assumed = 0.0;              // h in lambda_beta; unknown in practice
  std::optional<Penalties> penalties;  // overrides the theory formulas
  std::optional<int> c_n;              // anchor hard-threshold budget
  double alg2_rho = 0.5;               // geometric decay of the local-Hessian schedule
  SolveOptions solver;

  void validate() const {
    if (T < 1) throw ConfigError("T must be ≥ 1");
    if (c0 <= 0.0) throw ConfigError("c0 must be > 0");
    if (c_n && *c_n < 1) throw ConfigError("c_n must be >= 1");
    if (!(alg2_rho > 0.0 && alg2_rho < 1.0)) throw ConfigError("alg2_rho must be in (0, 1)");
    if (leading_site < 1) throw ConfigError("leading_site must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Results

struct CoefficientSet {
  Vector beta;
  std::map<int, Vector> w;              // source fits w^(k)
  std::map<int, Vector> delta;          // contrast estimates before thresholding
  std::map<int, Vector> delta_checked;  // after the hard threshold
  int round = 0;
  bool converged = true;  // every subproblem met the KKT tolerance
  bool aborted = false;   // a round hit SolverDivergence; outputs are from the last good round
  std::vector<Vector> beta_history;      // beta_hat_t, t = 1..round
  std::vector<std::map<int, Vector>> anchors;  // transmitted anchors per round
  std::vector<std::string> warnings;
};

struct InitialValues {
  Vector beta;
  std::map<int, Vector> w;
  int c_n_hint = 1;  // default c_n implied by the initialization sample sizes
};

// ---------------------------------------------------------------------------
// Pooled transfer learning (individual-level access)

namespace detail {

inline Vector lasso_on_rows(const GlmFamily& family, const PartitionedDataset& data, std::span<const Index> rows,
                            double lambda, const SolveOptions& opts, bool* converged = nullptr) {
  auto loss = GlmLoss::from_rows(family, data, rows, 1.0 / static_cast<double>(rows.size()));
  auto res = solve_l1(loss, lambda, Vector::Zero(data.dim()), opts);
  if (converged) *converged = *converged && res.converged;
  return res.coef;
}

/// Swaps population labels 0 and k.
inline PartitionedDataset with_target(const PartitionedDataset& data, int k) {
  if (k == 0) return data;
  std::vector<int> pops = data.population_ids();
  for (int& v : pops) v = v == 0 ? k : (v == k ? 0 : v);
  return {data.x(), data.y(), data.site_ids(), pops};
}

}  // namespace detail

/// Source fits, contrast adjustment and the joint step on pooled rows:
///   w_k     = argmin (1/N_k) L_k(b) + lambda_k |b|_1
///   delta_k = argmin (1/N_0) L_0(w_k + b) + lambda_delta |b|_1, then H_budget
///   beta    = argmin (1/N)[L_0(b) + sum_k L_k(b - delta_k)] + lambda_beta |b|_1
/// delta_k estimates beta - w_k under this sign convention.
inline CoefficientSet pooled_transfer(const PartitionedDataset& data, const GlmFamily& family,
                                      const Penalties& penalties, const SolveOptions& opts = {}) {
  const Index p = data.dim();
  const auto target_rows = data.population_rows(0);
  if (target_rows.empty()) throw EmptyPopulationError("pooled_transfer: target population is empty");
  const auto n0 = static_cast<Index>(target_rows.size());

  CoefficientSet out;
  out.round = 1;
  std::vector<GlmLoss> joint;
  double n_total = static_cast<double>(n0);
  std::vector<std::pair<std::vector<Index>, Vector>> source_terms;

  for (int k = 1; k < data.num_populations(); ++k) {
    const auto rows = data.population_rows(k);
    if (rows.empty()) {
      out.warnings.push_back("source population " + std::to_string(k) + " is empty and was dropped");
      continue;
    }
    auto lam = penalties.source.find(k);
    detail::require(lam != penalties.source.end(), "no lambda for source population " + std::to_string(k));
    const Vector w = detail::lasso_on_rows(family, data, rows, lam->second, opts, &out.converged);

    auto target_loss = GlmLoss::from_rows(family, data, target_rows, 1.0 / static_cast<double>(n0), &w);
    auto dres = solve_l1(target_loss, penalties.delta, Vector::Zero(p), opts);
    out.converged = out.converged && dres.converged;
    const Vector checked = hard_threshold_topk(dres.coef, delta_threshold_budget(n0, p));

    out.w[k] = w;
    out.delta[k] = dres.coef;
    out.delta_checked[k] = checked;
    n_total += static_cast<double>(rows.size());
    source_terms.emplace_back(rows, checked);
  }

  joint.push_back(GlmLoss::from_rows(family, data, target_rows, 1.0 / n_total));
  for (const auto& [rows, checked] : source_terms) {
    const Vector shift = -checked;
    joint.push_back(GlmLoss::from_rows(family, data, rows, 1.0 / n_total, &shift));
  }
  GlmLossSum objective(std::move(joint));
  auto bres = solve_l1(objective, penalties.beta, Vector::Zero(p), opts);
  out.converged = out.converged && bres.converged;
  out.beta = bres.coef;
  out.beta_history.push_back(out.beta);
  return out;
}

/// Penalized objective of the pooled joint step at b; used to compare
/// federated and pooled solutions on the same scale.
inline double pooled_joint_objective(const PartitionedDataset& data, const GlmFamily& family,
                                     const std::map<int, Vector>& delta_checked, double lambda_beta,
                                     const Vector& b) {
  const auto target_rows = data.population_rows(0);
  double n_total = static_cast<double>(target_rows.size());
  for (const auto& [k, _] : delta_checked) n_total += static_cast<double>(data.population_count(k));
  double v = neg_log_lik(family, data, target_rows, b);
  for (const auto& [k, d] : delta_checked) v += neg_log_lik(family, data, data.population_rows(k), b - d);
  double l1 = 0.0;
  for (Index j = 1; j < b.size(); ++j) l1 += std::abs(b(j));
  return v / n_total + lambda_beta * l1;
}

// ---------------------------------------------------------------------------
// Federated estimators

namespace detail {

inline std::map<int, Index> population_counts(const Federation& fed) {
  std::map<int, Index> counts;
  for (int k = 0; k < fed.num_populations(); ++k) counts[k] = fed.population_count(k);
  return counts;
}

inline std::map<int, Index> site_counts(const Federation& fed, int site) {
  std::map<int, Index> counts;
  for (int k = 0; k < fed.num_populations(); ++k) counts[k] = fed.count(site, k);
  return counts;
}

inline std::vector<int> nonempty_sources(const Federation& fed) {
  std::vector<int> out;
  for (int k = 1; k < fed.num_populations(); ++k)
    if (fed.population_count(k) > 0) out.push_back(k);
  return out;
}

/// Site holding the most rows of population k; ties go to the lowest id.
inline int largest_site(const Federation& fed, int k) {
  int best = -1;
  Index best_n = 0;
  for (int m : fed.site_ids())
    if (fed.count(m, k) > best_n) {
      best = m;
      best_n = fed.count(m, k);
    }
  return best;
}

inline Penalties federation_penalties(const Federation& fed, const EstimatorConfig& cfg) {
  if (cfg.penalties) return *cfg.penalties;
  return theory_penalties(cfg.c0, fed.dim(), population_counts(fed), cfg.h_assumed);
}

inline double scheduled(double lam_inf, double lam_0, double rho, int t) {
  return std::max(lam_inf, lam_0 * std::pow(rho, t));
}

}  // namespace detail

/// Per-round penalties for the local-Hessian algorithm:
/// lambda_t = max(lambda_inf, lambda_0 rho^t), with lambda_inf the fixed
/// theory values and lambda_0 the same formulas at the leading site's
/// sample sizes.
inline Penalties alg2_penalties(const Federation& fed, const EstimatorConfig& cfg, int t) {
  const Penalties inf = detail::federation_penalties(fed, cfg);
  const Penalties zero = theory_penalties(cfg.c0, fed.dim(), detail::site_counts(fed, cfg.leading_site), cfg.h_assumed);
  Penalties out;
  for (const auto& [k, v] : inf.source) {
    auto z = zero.source.find(k);
    out.source[k] = z == zero.source.end() ? v : detail::scheduled(v, z->second, cfg.alg2_rho, t);
  }
  out.delta = detail::scheduled(inf.delta, zero.delta, cfg.alg2_rho, t);
  out.beta = detail::scheduled(inf.beta, zero.beta, cfg.alg2_rho, t);
  return out;
}

/// Strategy 1: the pooled transfer fit on the leading site's own rows.
inline InitialValues init_single_site(const Federation& fed, const EstimatorConfig& cfg) {
  const auto& site = fed.site(cfg.leading_site);
  const auto counts = detail::site_counts(fed, cfg.leading_site);
  for (int k = 0; k < fed.num_populations(); ++k)
    if (fed.population_count(k) > 0 && site.count(k) == 0)
      throw ConfigError("single-site initialization: leading site " + std::to_string(cfg.leading_site) +
                        " has no rows from population " + std::to_string(k) + "; use multi_site initialization");
  const Penalties pen = theory_penalties(cfg.c0, fed.dim(), counts, cfg.h_assumed);
  const auto fit = pooled_transfer(site.data, site.family, pen, cfg.solver);
  InitialValues init{fit.beta, fit.w, 1};
  Index n_init = fit.w.empty() ? site.count(0) : std::numeric_limits<Index>::max();
  for (const auto& [k, _] : fit.w) n_init = std::min(n_init, site.count(k));
  init.c_n_hint = default_c_n(n_init, fed.dim());
  return init;
}

/// Strategy 2: each population is initialized at the site holding most of its
/// rows. Where that population makes up under 20% of the site's rows the
/// pooled transfer fit is run there with the population as target; otherwise
/// a plain lasso on its own rows.
inline InitialValues init_multi_site(const Federation& fed, const EstimatorConfig& cfg) {
  InitialValues init;
  Index n_min = std::numeric_limits<Index>::max();
  for (int k = 0; k < fed.num_populations(); ++k) {
    if (k > 0 && fed.population_count(k) == 0) continue;
    const int site_id = detail::largest_site(fed, k);
    if (site_id < 0) throw EmptyPopulationError("population " + std::to_string(k) + " is empty at every site");
    const auto& site = fed.site(site_id);
    const Index nk = site.count(k);
    n_min = std::min(n_min, nk);
    const double share = static_cast<double>(nk) / static_cast<double>(site.data.rows());
    Vector est;
    if (share < 0.2) {
      const auto relabeled = detail::with_target(site.data, k);
      std::map<int, Index> counts;
      for (int j = 0; j < relabeled.num_populations(); ++j) counts[j] = relabeled.count(site_id, j);
      est = pooled_transfer(relabeled, site.family, theory_penalties(cfg.c0, fed.dim(), counts), cfg.solver).beta;
    } else {
      est = detail::lasso_on_rows(site.family, site.data, site.data.cell(site_id, k),
                                  lasso_rate(cfg.c0, fed.dim(), nk), cfg.solver);
    }
    if (k == 0)
      init.beta = est;
    else
      init.w[k] = est;
  }
  init.c_n_hint = default_c_n(n_min, fed.dim());
  return init;
}

inline InitialValues initialize(const Federation& fed, const EstimatorConfig& cfg) {
  return cfg.init_strategy == InitStrategy::single_site ? init_single_site(fed, cfg) : init_multi_site(fed, cfg);
}

/// Federated transfer learning. Each round thresholds the current estimates
/// to c_n entries, collects gradients (and Hessians) at those anchors, and
/// solves the three surrogate subproblems. With Algorithm::alg2 only the
/// leading site sends Hessians and penalties follow `alg2_penalties`.
inline CoefficientSet fed_transfer(Federation& fed, const EstimatorConfig& cfg, const InitialValues& init) {
  cfg.validate();
  detail::require(cfg.algorithm != Algorithm::pooled, "fed_transfer: use pooled_transfer for Algorithm::pooled");
  const bool local = cfg.algorithm == Algorithm::alg2;
  const Index p = fed.dim();
  const auto sources = detail::nonempty_sources(fed);
  const Index n0 = fed.population_count(0);
  if (n0 == 0) throw EmptyPopulationError("fed_transfer: target population is empty");
  if (local) {
    for (int k = 0; k < fed.num_populations(); ++k)
      if (fed.population_count(k) > 0 && fed.count(cfg.leading_site, k) == 0)
        throw ConfigError("local-Hessian algorithm: leading site " + std::to_string(cfg.leading_site) +
                          " has no rows from population " + std::to_string(k));
  }
  double n_total = static_cast<double>(n0);
  for (int k : sources) n_total += static_cast<double>(fed.population_count(k));
  const int c_n = cfg.c_n.value_or(init.c_n_hint);
  const int budget = delta_threshold_budget(n0, p);

  CoefficientSet out;
  out.beta = init.beta;
  for (int k : sources) {
    auto it = init.w.find(k);
    detail::require(it != init.w.end(), "fed_transfer: no initial value for source " + std::to_string(k));
    out.w[k] = it->second;
  }

  for (int t = 1; t <= cfg.T; ++t) {
    const Penalties pen = local ? alg2_penalties(fed, cfg, t) : detail::federation_penalties(fed, cfg);
    RoundRequest req;
    req.anchors[0] = hard_threshold_topk(out.beta, std::min<Index>(c_n, p));
    for (int k : sources) req.anchors[k] = hard_threshold_topk(out.w[k], std::min<Index>(c_n, p));
    req.hessians = local ? HessianPolicy::leading_site_only : HessianPolicy::all_sites;
    req.leading_site = cfg.leading_site;
    req.partial = true;
    const auto msgs = fed.exchange(req);

    std::map<int, QuadraticSurrogate> surrogate;
    for (const auto& [k, anchor] : req.anchors) surrogate[k] = combine_surrogate(messages_for(msgs, k), anchor);

    try {
      bool conv = true;
      std::map<int, Vector> w_next, d_hat, d_checked;
      std::vector<std::pair<double, QuadraticSurrogate>> joint{
          {static_cast<double>(n0) / n_total, surrogate.at(0)}};
      for (int k : sources) {
        const auto wres = solve_l1(as_objective(surrogate.at(k)), pen.source.at(k), out.w[k], cfg.solver);
        // R0(w_k + delta): the target surrogate shifted by w_k
        const auto dres =
            solve_l1(as_objective(surrogate.at(0).shifted(wres.coef)), pen.delta, Vector::Zero(p), cfg.solver);
        conv = conv && wres.converged && dres.converged;
        w_next[k] = wres.coef;
        d_hat[k] = dres.coef;
        d_checked[k] = hard_threshold_topk(dres.coef, budget);
        joint.emplace_back(static_cast<double>(fed.population_count(k)) / n_total,
                           surrogate.at(k).shifted(-d_checked[k]));
      }
      const auto bres = solve_l1(weighted_sum(joint), pen.beta, out.beta, cfg.solver);
      conv = conv && bres.converged;

      out.beta = bres.coef;
      out.w = std::move(w_next);
      out.delta = std::move(d_hat);
      out.delta_checked = std::move(d_checked);
      out.converged = out.converged && conv;
      out.round = t;
      out.beta_history.push_back(out.beta);
      out.anchors.push_back(req.anchors);
    } catch (const SolverDivergence& e) {
      out.aborted = true;
      out.warnings.push_back("round " + std::to_string(t) + " aborted: " + e.what());
      break;
    }
  }
  return out;
}

inline CoefficientSet fed_transfer_alg1(Federation& fed, EstimatorConfig cfg, const InitialValues& init) {
  cfg.algorithm = Algorithm::alg1;
  return fed_transfer(fed, cfg, init);
}

inline CoefficientSet fed_transfer_alg2(Federation& fed, EstimatorConfig cfg, const InitialValues& init) {
  cfg.algorithm = Algorithm::alg2;
  return fed_transfer(fed, cfg, init);
}

struct LassoFit {
  Vector beta;
  std::vector<Vector> history;  // per round
  bool converged = true;
  bool aborted = false;
};

/// Lasso on the union of `populations` started at the site holding most of
/// those rows, with lambda = c0 sqrt(log p / n_local).
inline Vector init_local_lasso(const Federation& fed, const std::set<int>& populations, double c0,
                               const SolveOptions& opts = {}) {
  int best = -1;
  Index best_n = 0;
  for (int m : fed.site_ids()) {
    Index n = 0;
    for (int k : populations) n += fed.count(m, k);
    if (n > best_n) {
      best = m;
      best_n = n;
    }
  }
  if (best < 0) throw EmptyPopulationError("init_local_lasso: no rows in the requested populations");
  const auto& site = fed.site(best);
  std::vector<Index> rows;
  for (Index i = 0; i < site.data.rows(); ++i)
    if (populations.count(site.data.pop_of(i))) rows.push_back(i);
  return detail::lasso_on_rows(site.family, site.data, rows, lasso_rate(c0, fed.dim(), best_n), opts);
}

/// Federated lasso over the pooled rows of `populations` (population labels
/// ignored): each round thresholds the anchor to c_n entries, collects
/// gradients/Hessians from every site, and solves the merged surrogate.
inline LassoFit fed_lasso(Federation& fed, const std::set<int>& populations, double lambda, int rounds, int c_n,
                          const Vector& init, const SolveOptions& opts = {}) {
  detail::require(rounds >= 1, "T must be ≥ 1");
  const Index p = fed.dim();
  LassoFit out;
  out.beta = init;
  for (int t = 1; t <= rounds; ++t) {
    const Vector anchor = hard_threshold_topk(out.beta, std::min<Index>(c_n, p));
    RoundRequest req;
    for (int k : populations) req.anchors[k] = anchor;
    req.partial = true;
    const auto msgs = fed.exchange(req);
    std::vector<QuadraticSurrogate> parts;
    for (int k : populations) {
      auto mk = messages_for(msgs, k);
      if (!mk.empty()) parts.push_back(combine_surrogate(mk, anchor));
    }
    if (parts.empty()) throw EmptyPopulationError("fed_lasso: requested populations are empty");
    try {
      const auto res = solve_l1(as_objective(merge_surrogates(parts)), lambda, out.beta, opts);
      out.converged = out.converged && res.converged;
      out.beta = res.coef;
      out.history.push_back(out.beta);
    } catch (const SolverDivergence&) {
      out.aborted = true;
      break;
    }
  }
  return out;
}

/// Federated target-only estimator: fed_lasso on population 0 with
/// lambda_tar = c0 sqrt(log p / N^(0)).
inline LassoFit fed_target_only(Federation& fed, const EstimatorConfig& cfg, const Vector& init) {
  cfg.validate();
  const Index n0 = fed.population_count(0);
  if (n0 == 0) throw EmptyPopulationError("fed_target_only: target population is empty");
  const int c_n = cfg.c_n.value_or(default_c_n(fed.count(detail::largest_site(fed, 0), 0), fed.dim()));
  return fed_lasso(fed, {0}, lasso_rate(cfg.c0, fed.dim(), n0), cfg.T, c_n, init, cfg.solver);
}

// ---------------------------------------------------------------------------
// Aggregation

/// Columns of B are (target-only, transfer); `selected` is 0 for e1 and 1 for
/// e2. The chosen column maximizes the validation log-likelihood; ties pick
/// the target-only column.
struct AggregationChoice {
  Matrix b_hat;
  int selected = 0;
  double loglik[2] = {0.0, 0.0};
  Vector beta_agg;
  std::vector<std::string> warnings;
};

inline double validation_loglik(const GlmFamily& family, const PartitionedDataset& validation, const Vector& b) {
  std::vector<Index> rows(static_cast<std::size_t>(validation.rows()));
  for (Index i = 0; i < validation.rows(); ++i) rows[static_cast<std::size_t>(i)] = i;
  return -neg_log_lik(family, validation, rows, b);
}

inline AggregationChoice aggregate(const Vector& beta_transfer, const Vector& beta_target,
                                   const PartitionedDataset& validation, const GlmFamily& family) {
  if (validation.rows() == 0) throw ContractViolation("aggregate: validation set is empty");
  detail::require(beta_transfer.size() == beta_target.size() && beta_target.size() == validation.dim(),
                  "aggregate: dimension mismatch");
  AggregationChoice out;
  out.b_hat.resize(beta_target.size(), 2);
  out.b_hat.col(0) = beta_target;
  out.b_hat.col(1) = beta_transfer;
  if (family.tag == FamilyTag::logistic) {
    const double s = validation.y().sum();
    if (s == 0.0 || s == static_cast<double>(validation.rows()))
      out.warnings.push_back("validation outcomes contain a single class");
  }
  out.loglik[0] = validation_loglik(family, validation, beta_target);
  out.loglik[1] = validation_loglik(family, validation, beta_transfer);
  out.selected = out.loglik[1] > out.loglik[0] ? 1 : 0;
  out.beta_agg = out.b_hat.col(out.selected);
  return out;
}

}  // namespace fedtl
