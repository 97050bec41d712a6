#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fedtl/estimators.hpp"

using namespace fedtl;

namespace {

// Rows are dealt to (site, population) cells by `layout[site-1][pop]` counts.
PartitionedDataset make_transfer_data(std::uint64_t seed, bool logistic, int p,
                                      const std::vector<std::vector<int>>& layout) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  Vector beta = Vector::Zero(p);
  for (int j = 1; j <= std::min(4, p - 1); ++j) beta(j) = j % 2 ? 0.8 : -0.6;
  int n = 0;
  for (const auto& row : layout)
    for (int c : row) n += c;
  Matrix x(n, p);
  Vector y(n);
  std::vector<int> s, k;
  int i = 0;
  for (std::size_t m = 0; m < layout.size(); ++m)
    for (std::size_t pop = 0; pop < layout[m].size(); ++pop)
      for (int r = 0; r < layout[m][pop]; ++r, ++i) {
        Vector b = beta;
        if (pop > 0) b(p - 1) += 0.3 * static_cast<double>(pop);
        x(i, 0) = 1.0;
        for (int j = 1; j < p; ++j) x(i, j) = nd(rng);
        const double eta = x.row(i).dot(b);
        y(i) = logistic ? (ud(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0) : eta + nd(rng);
        s.push_back(static_cast<int>(m) + 1);
        k.push_back(static_cast<int>(pop));
      }
  return {x, y, s, k};
}

Federation make_fed(const PartitionedDataset& d, const GlmFamily& f) { return Federation(split_by_site(d, f)); }

SolveOptions tight() {
  SolveOptions o;
  o.tol = 1e-10;
  o.max_iter = 200000;
  return o;
}

}  // namespace

TEST(Penalties, TheoryFormulas) {
  const auto pen = theory_penalties(2.0, 100, {{0, 50}, {1, 200}, {2, 0}}, 0.5);
  const double lp = std::log(100.0);
  EXPECT_DOUBLE_EQ(pen.source.at(1), 2.0 * std::sqrt(lp / 200.0));
  EXPECT_EQ(pen.source.count(2), 0u);
  EXPECT_DOUBLE_EQ(pen.delta, 2.0 * std::sqrt(lp / 50.0));
  EXPECT_DOUBLE_EQ(pen.beta, 2.0 * std::sqrt(lp / 250.0) + 0.5 * lp / 50.0);
  EXPECT_THROW(theory_penalties(1.0, 100, {{1, 10}}), ContractViolation);
}

TEST(Penalties, Budgets) {
  EXPECT_EQ(delta_threshold_budget(100, 200), static_cast<int>(std::floor(std::sqrt(100.0 / std::log(200.0)))));
  EXPECT_EQ(delta_threshold_budget(1, 1000), 1);
  EXPECT_EQ(delta_threshold_budget(1000000, 3), 3);
  EXPECT_EQ(default_c_n(500, 200), static_cast<int>(std::round(std::sqrt(500.0 / std::log(200.0)))));
}

TEST(Config, RejectsZeroRounds) {
  EstimatorConfig cfg;
  cfg.T = 0;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("T must be"), std::string::npos);
  }
}

TEST(Pooled, NoSourcesIsTargetLasso) {
  const auto d = make_transfer_data(1, false, 8, {{60}});
  const auto f = GlmFamily::gaussian();
  Penalties pen;
  pen.beta = 0.05;
  const auto fit = pooled_transfer(d, f, pen, tight());
  const auto rows = d.population_rows(0);
  const auto lasso = solve_l1(GlmLoss::from_rows(f, d, rows, 1.0 / 60.0), 0.05, Vector::Zero(8), tight());
  EXPECT_LT((fit.beta - lasso.coef).norm(), 1e-8);
  EXPECT_TRUE(fit.w.empty());
}

TEST(Pooled, EmptyTargetThrows) {
  const auto d = make_transfer_data(2, false, 5, {{0, 30}});
  EXPECT_THROW(pooled_transfer(d, GlmFamily::gaussian(), theory_penalties(1.0, 5, {{0, 1}, {1, 30}})),
               EmptyPopulationError);
}

TEST(Pooled, EmptySourceDroppedWithWarning) {
  const auto d = make_transfer_data(3, false, 5, {{40, 0, 60}});
  const auto pen = theory_penalties(1.0, 5, {{0, 40}, {2, 60}});
  const auto fit = pooled_transfer(d, GlmFamily::gaussian(), pen);
  EXPECT_EQ(fit.w.count(1), 0u);
  EXPECT_EQ(fit.w.count(2), 1u);
  ASSERT_EQ(fit.warnings.size(), 1u);
}

TEST(Pooled, ContrastThresholdBudget) {
  const auto d = make_transfer_data(4, false, 30, {{50, 300}});
  const auto pen = theory_penalties(0.2, 30, {{0, 50}, {1, 300}});
  const auto fit = pooled_transfer(d, GlmFamily::gaussian(), pen);
  const Index nz = (fit.delta_checked.at(1).array() != 0.0).count();
  EXPECT_LE(nz, delta_threshold_budget(50, 30));
}

TEST(Pooled, JointStepIsOptimalForItsObjective) {
  const auto d = make_transfer_data(5, true, 10, {{80, 200}});
  const auto f = GlmFamily::logistic();
  const auto pen = theory_penalties(0.5, 10, {{0, 80}, {1, 200}});
  const auto fit = pooled_transfer(d, f, pen, tight());
  const double at = pooled_joint_objective(d, f, fit.delta_checked, pen.beta, fit.beta);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (int r = 0; r < 20; ++r) {
    Vector b = fit.beta;
    for (Index j = 0; j < b.size(); ++j) b(j) += nd(rng);
    EXPECT_LE(at, pooled_joint_objective(d, f, fit.delta_checked, pen.beta, b) + 1e-12);
  }
}

// Gaussian surrogates are exact, so one federated round reproduces the pooled
// estimator from any initial value.
TEST(FedTransfer, GaussianOneRoundMatchesPooled) {
  const auto d = make_transfer_data(6, false, 12, {{40, 100}, {30, 150}, {20, 0}});
  const auto f = GlmFamily::gaussian();
  auto fed = make_fed(d, f);
  EstimatorConfig cfg;
  cfg.solver = tight();
  cfg.c_n = 3;
  const auto pen = detail::federation_penalties(fed, cfg);
  const auto pooled = pooled_transfer(d, f, pen, tight());
  InitialValues init{Vector::Zero(12), {{1, Vector::Constant(12, 0.3)}}, 3};
  const auto fit = fed_transfer_alg1(fed, cfg, init);
  EXPECT_EQ(fit.round, 1);
  EXPECT_TRUE(fit.converged);
  EXPECT_LT((fit.w.at(1) - pooled.w.at(1)).norm(), 1e-7);
  EXPECT_LT((fit.delta.at(1) - pooled.delta.at(1)).norm(), 1e-7);
  EXPECT_LT((fit.beta - pooled.beta).norm(), 1e-7);
}

// With one site the leading site holds everything: same Hessians, same
// penalties, so both algorithms coincide.
TEST(FedTransfer, SingleSiteAlg2EqualsAlg1) {
  const auto d = make_transfer_data(7, true, 10, {{80, 200}});
  const auto f = GlmFamily::logistic();
  EstimatorConfig cfg;
  cfg.T = 3;
  auto fed1 = make_fed(d, f);
  const auto init = init_single_site(fed1, cfg);
  const auto a1 = fed_transfer_alg1(fed1, cfg, init);
  auto fed2 = make_fed(d, f);
  const auto a2 = fed_transfer_alg2(fed2, cfg, init);
  ASSERT_EQ(a1.beta_history.size(), 3u);
  ASSERT_EQ(a2.beta_history.size(), 3u);
  for (int t = 0; t < 3; ++t) EXPECT_LT((a1.beta_history[t] - a2.beta_history[t]).norm(), 1e-12);
}

// Without anchor thresholding, repeated rounds are proximal Newton steps on
// each source lasso.
TEST(FedTransfer, LogisticSourceFitsConvergeToPooled) {
  const auto d = make_transfer_data(8, true, 8, {{60, 150}, {40, 150}});
  const auto f = GlmFamily::logistic();
  auto fed = make_fed(d, f);
  EstimatorConfig cfg;
  cfg.T = 15;
  cfg.c_n = 8;
  cfg.solver = tight();
  const auto pen = detail::federation_penalties(fed, cfg);
  const auto pooled = pooled_transfer(d, f, pen, tight());
  const auto fit = fed_transfer_alg1(fed, cfg, init_multi_site(fed, cfg));
  EXPECT_LT((fit.w.at(1) - pooled.w.at(1)).norm(), 1e-6);
}

TEST(FedTransfer, Alg2SendsHessiansOnlyFromLeadingSite) {
  const auto d = make_transfer_data(9, true, 6, {{40, 80}, {30, 90}, {20, 60}});
  auto fed = make_fed(d, GlmFamily::logistic());
  EstimatorConfig cfg;
  cfg.T = 2;
  cfg.leading_site = 2;
  std::ostringstream log;
  Federation logged = fed.session(&log);
  fed_transfer_alg2(logged, cfg, init_single_site(logged, cfg));
  // Hessians stay at the leading site: decoded for the coordinator, never ledgered
  std::size_t hessian_lines = 0, pos = 0;
  while ((pos = log.str().find("\"type\":\"hessian\"", pos)) != std::string::npos) ++hessian_lines, ++pos;
  EXPECT_EQ(hessian_lines, 2u * 2u);
  EXPECT_EQ(log.str().find("\"type\":\"hessian\",\"site_id\":1"), std::string::npos);
  const auto totals = ledger_totals(logged.ledger());
  EXPECT_EQ(totals.hessian_messages, 0u);
  EXPECT_EQ(totals.hessian_bytes, 0u);
  EXPECT_EQ(totals.gradient_messages, 2u * 6u);
}

TEST(FedTransfer, Alg2ScheduleDecaysToTheory) {
  const auto d = make_transfer_data(10, true, 6, {{40, 80}, {30, 90}});
  auto fed = make_fed(d, GlmFamily::logistic());
  EstimatorConfig cfg;
  const auto inf = detail::federation_penalties(fed, cfg);
  const auto p1 = alg2_penalties(fed, cfg, 1);
  const auto p50 = alg2_penalties(fed, cfg, 50);
  EXPECT_GE(p1.beta, inf.beta);
  EXPECT_DOUBLE_EQ(p50.beta, inf.beta);
  EXPECT_DOUBLE_EQ(p50.delta, inf.delta);
}

TEST(FedTransfer, Alg2RequiresAllPopulationsAtLeadingSite) {
  const auto d = make_transfer_data(11, true, 6, {{40, 0}, {30, 90}});
  auto fed = make_fed(d, GlmFamily::logistic());
  EstimatorConfig cfg;
  InitialValues init{Vector::Zero(6), {{1, Vector::Zero(6)}}, 2};
  EXPECT_THROW(fed_transfer_alg2(fed, cfg, init), ConfigError);
  EXPECT_THROW(init_single_site(fed, cfg), ConfigError);
}

TEST(FedTransfer, DivergenceAbortsAndFlags) {
  const auto d = make_transfer_data(12, false, 6, {{40, 80}});
  auto fed = make_fed(d, GlmFamily::gaussian());
  EstimatorConfig cfg;
  cfg.T = 2;
  Vector bad = Vector::Zero(6);
  bad(1) = std::numeric_limits<double>::quiet_NaN();
  InitialValues init{bad, {{1, bad}}, 6};
  const auto fit = fed_transfer_alg1(fed, cfg, init);
  EXPECT_TRUE(fit.aborted);
  EXPECT_EQ(fit.round, 0);
  EXPECT_FALSE(fit.warnings.empty());
}

TEST(Init, MultiSitePicksLargestCell) {
  // population 1 is largest at site 2 (share 75%): local lasso there
  const auto d = make_transfer_data(13, false, 6, {{50, 20}, {10, 150}});
  const auto f = GlmFamily::gaussian();
  auto fed = make_fed(d, f);
  EstimatorConfig cfg;
  cfg.solver = tight();
  const auto init = init_multi_site(fed, cfg);
  const auto& s2 = fed.site(2);
  const auto expect = solve_l1(GlmLoss::from_rows(f, s2.data, s2.data.cell(2, 1), 1.0 / 150.0),
                               lasso_rate(1.0, 6, 150), Vector::Zero(6), tight());
  EXPECT_LT((init.w.at(1) - expect.coef).norm(), 1e-9);
  EXPECT_EQ(init.c_n_hint, default_c_n(50, 6));
}

TEST(Init, MultiSiteSmallShareUsesTransfer) {
  // target share at site 1 is 10/110 < 20%
  const auto d = make_transfer_data(14, false, 6, {{10, 100}, {5, 30}});
  auto fed = make_fed(d, GlmFamily::gaussian());
  EstimatorConfig cfg;
  const auto init = init_multi_site(fed, cfg);
  const auto& s1 = fed.site(1);
  const auto expect =
      pooled_transfer(s1.data, s1.family, theory_penalties(1.0, 6, {{0, 10}, {1, 100}}), cfg.solver).beta;
  EXPECT_LT((init.beta - expect).norm(), 1e-12);
}

TEST(TargetOnly, GaussianOneRoundMatchesLasso) {
  const auto d = make_transfer_data(15, false, 10, {{30, 50}, {40, 50}});
  const auto f = GlmFamily::gaussian();
  auto fed = make_fed(d, f);
  EstimatorConfig cfg;
  cfg.solver = tight();
  const auto fit = fed_target_only(fed, cfg, Vector::Zero(10));
  const auto rows = d.population_rows(0);
  const auto lasso =
      solve_l1(GlmLoss::from_rows(f, d, rows, 1.0 / 70.0), lasso_rate(1.0, 10, 70), Vector::Zero(10), tight());
  EXPECT_LT((fit.beta - lasso.coef).norm(), 1e-7);
  // only target cells are contacted
  for (const auto& e : fed.ledger().entries()) EXPECT_EQ(e.population_id, 0);
}

TEST(FedLasso, CombinedPoolsPopulations) {
  const auto d = make_transfer_data(16, false, 8, {{30, 50}, {40, 60}});
  const auto f = GlmFamily::gaussian();
  auto fed = make_fed(d, f);
  const auto fit = fed_lasso(fed, {0, 1}, 0.05, 1, 8, Vector::Zero(8), tight());
  std::vector<Index> all(static_cast<std::size_t>(d.rows()));
  for (Index i = 0; i < d.rows(); ++i) all[static_cast<std::size_t>(i)] = i;
  const auto lasso = solve_l1(GlmLoss::from_rows(f, d, all, 1.0 / 180.0), 0.05, Vector::Zero(8), tight());
  EXPECT_LT((fit.beta - lasso.coef).norm(), 1e-7);
}

TEST(Aggregate, PicksHigherLikelihoodAndTiesToTarget) {
  const auto v = make_transfer_data(17, true, 5, {{200}});
  const auto f = GlmFamily::logistic();
  Vector good = Vector::Zero(5);
  good(1) = 0.8;
  good(2) = -0.6;
  good(3) = 0.8;
  good(4) = -0.6;
  const Vector zero = Vector::Zero(5);
  const auto a = aggregate(good, zero, v, f);
  EXPECT_EQ(a.selected, 1);
  EXPECT_EQ(a.beta_agg, good);
  EXPECT_GT(a.loglik[1], a.loglik[0]);
  const auto b = aggregate(good, good, v, f);
  EXPECT_EQ(b.selected, 0);
  const auto c = aggregate(zero, good, v, f);
  EXPECT_EQ(c.selected, 0);
  EXPECT_EQ(c.b_hat.cols(), 2);
}

TEST(Aggregate, EmptyValidationThrows) {
  PartitionedDataset empty(Matrix(0, 3), Vector(0), {}, {});
  EXPECT_THROW(aggregate(Vector::Zero(3), Vector::Zero(3), empty, GlmFamily::logistic()), ContractViolation);
}
