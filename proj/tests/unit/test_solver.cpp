#include <random>

#include <gtest/gtest.h>

#include "fedtl/solver.hpp"
#include "oracles.hpp"

using namespace fedtl;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

FunctionObjective half_sq_distance(const Vector& z) {
  return {z.size(), [z](const Vector& b) { return 0.5 * (b - z).squaredNorm(); },
          [z](const Vector& b) { return Vector(b - z); }};
}

struct Instance {
  Matrix x;
  Vector y;
};

Instance logistic_instance(std::mt19937_64& rng, int n, int p) {
  std::normal_distribution<double> nd;
  Matrix x(n, p);
  Vector beta(p);
  for (int j = 0; j < p; ++j) beta(j) = j < 3 ? nd(rng) : 0.0;
  Vector y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    for (int j = 1; j < p; ++j) x(i, j) = nd(rng);
    const double mu = 1.0 / (1.0 + std::exp(-x.row(i).dot(beta)));
    y(i) = std::uniform_real_distribution<double>(0, 1)(rng) < mu ? 1.0 : 0.0;
  }
  return {x, y};
}

PartitionedDataset as_dataset(const Matrix& x, const Vector& y) {
  const auto n = static_cast<std::size_t>(x.rows());
  return {x, y, std::vector<int>(n, 1), std::vector<int>(n, 0)};
}

}  // namespace

TEST(SoftThreshold, Examples) {
  EXPECT_TRUE(soft_threshold(vec({2, -0.5, 0.1}), 0.5).isApprox(vec({1.5, 0, 0})));
  const Vector v = vec({0.3, -7, 0});
  EXPECT_EQ(soft_threshold(v, 0.0), v);
  EXPECT_EQ(soft_threshold(vec({-3, 3}), 1.0), vec({-2, 2}));
}

TEST(HardThreshold, Examples) {
  EXPECT_EQ(hard_threshold_topk(vec({3, -1, 0.5, 2}), 2), vec({3, 0, 0, 2}));
  const Vector v = vec({1, 2, -3});
  EXPECT_EQ(hard_threshold_topk(v, 3), v);
  EXPECT_EQ(hard_threshold_topk(vec({1, -1, 1}), 2), vec({1, -1, 0}));
  EXPECT_EQ(hard_threshold_topk(v, 0), Vector::Zero(3));
  EXPECT_THROW(hard_threshold_topk(v, 4), ContractViolation);
}

TEST(HardThreshold, AfterSoftKeepsLargestMagnitudes) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 200; ++rep) {
    Vector v(15);
    for (int j = 0; j < 15; ++j) v(j) = nd(rng);
    const Index k = rep % 16;
    const Vector s = soft_threshold(v, 0.3);
    const Vector h = hard_threshold_topk(s, k);
    Index nnz = 0;
    double min_kept = std::numeric_limits<double>::infinity(), max_dropped = 0.0;
    for (Index j = 0; j < 15; ++j) {
      if (h(j) != 0.0) {
        ++nnz;
        EXPECT_EQ(h(j), s(j));
        min_kept = std::min(min_kept, std::abs(h(j)));
      } else {
        max_dropped = std::max(max_dropped, std::abs(s(j)));
      }
    }
    EXPECT_LE(nnz, k);
    if (nnz > 0) EXPECT_GE(min_kept, max_dropped);
  }
}

TEST(SolveL1, ProxClosedForm) {
  PenaltyConfig pen;
  pen.lambda = 0.5;
  pen.penalize_intercept = true;
  auto res = solve_l1(half_sq_distance(vec({2, -0.5})), pen, Vector::Zero(2));
  ASSERT_TRUE(res.converged);
  EXPECT_NEAR(res.coef(0), 1.5, 1e-7);
  EXPECT_EQ(res.coef(1), 0.0);
}

TEST(SolveL1, UnpenalizedInterceptCoordinate) {
  PenaltyConfig pen;
  pen.lambda = 5.0;
  auto res = solve_l1(half_sq_distance(vec({2, -0.5, 1})), pen, Vector::Zero(3));
  EXPECT_NEAR(res.coef(0), 2.0, 1e-7);
  EXPECT_EQ(res.coef(1), 0.0);
  EXPECT_EQ(res.coef(2), 0.0);
}

TEST(SolveL1, OrthonormalDesignMatchesSoftThresholdedOls) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd;
  const int n = 60, p = 8;
  for (int rep = 0; rep < 10; ++rep) {
    // columns scaled so X'X / n = I
    const Matrix x = std::sqrt(static_cast<double>(n)) * oracle::random_orthonormal(n, p, rng);
    Vector y(n);
    for (int i = 0; i < n; ++i) y(i) = nd(rng);
    const double lambda = 0.05 + 0.02 * rep;
    GlmLoss loss(GlmFamily::gaussian(), x, y, 1.0 / n);
    PenaltyConfig pen;
    pen.lambda = lambda;
    pen.penalize_intercept = true;
    auto res = solve_l1(loss, pen, Vector::Zero(p));
    const Vector ols = x.transpose() * y / n;
    EXPECT_LT((res.coef - oracle::soft_vec(ols, lambda)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(SolveL1, LogisticMatchesCoordinateDescentOracle) {
  std::mt19937_64 rng(41);
  auto inst = logistic_instance(rng, 40, 5);
  for (bool pen_first : {true, false}) {
    GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 40);
    PenaltyConfig pen;
    pen.lambda = 0.1;
    pen.penalize_intercept = pen_first;
    auto res = solve_l1(loss, pen, Vector::Zero(5));
    ASSERT_TRUE(res.converged);
    const Vector cd = oracle::coordinate_descent(true, inst.x, inst.y, 0.1, pen_first);
    const double ours = oracle::penalized_objective(true, inst.x, inst.y, res.coef, 0.1, pen_first);
    const double ref = oracle::penalized_objective(true, inst.x, inst.y, cd, 0.1, pen_first);
    EXPECT_LT(std::abs(ours - ref), 1e-6);
    EXPECT_NEAR(res.objective, ours, 1e-12);
  }
}

TEST(SolveL1, KktResidualAtSolution) {
  std::mt19937_64 rng(43);
  auto inst = logistic_instance(rng, 80, 12);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 80);
  PenaltyConfig pen;
  pen.lambda = 0.03;
  auto res = solve_l1(loss, pen, Vector::Zero(12));
  ASSERT_TRUE(res.converged);
  Vector g(12);
  loss.value_and_gradient(res.coef, g);
  EXPECT_LE(kkt_residual(res.coef, g, pen), 1e-7);
  EXPECT_LE(std::abs(g(0)), 1e-7);
}

TEST(SolveL1, MonotoneObjectiveWithBacktracking) {
  std::mt19937_64 rng(44);
  auto inst = logistic_instance(rng, 50, 20);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 50);
  PenaltyConfig pen;
  pen.lambda = 0.01;
  double last = std::numeric_limits<double>::infinity();
  int violations = 0;
  SolveOptions opts;
  opts.on_iterate = [&](int, double f) {
    if (f > last) ++violations;
    last = f;
  };
  solve_l1(loss, pen, Vector::Zero(20), opts);
  EXPECT_EQ(violations, 0);
}

// Near the optimum a rejected step must not be retried verbatim forever.
TEST(SolveL1, TightToleranceReachedWithoutStalling) {
  std::mt19937_64 rng(47);
  auto inst = logistic_instance(rng, 280, 10);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 280);
  SolveOptions opts;
  opts.tol = 1e-11;
  opts.max_iter = 20000;
  const auto res = solve_l1(loss, 0.02, Vector::Zero(10), opts);
  EXPECT_TRUE(res.converged);
  EXPECT_LT(res.iterations, 5000);
}

TEST(SolveL1, InvariantToInitialization) {
  std::mt19937_64 rng(45);
  auto inst = logistic_instance(rng, 60, 10);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 60);
  PenaltyConfig pen;
  pen.lambda = 0.05;
  SolveOptions opts;
  const double base = solve_l1(loss, pen, Vector::Zero(10), opts).objective;
  std::normal_distribution<double> nd;
  for (int start = 0; start < 3; ++start) {
    Vector init(10);
    for (int j = 0; j < 10; ++j) init(j) = 2.0 * nd(rng);
    EXPECT_NEAR(solve_l1(loss, pen, init, opts).objective, base, 10 * opts.tol);
  }
}

TEST(SolveL1, ScalingObjectiveAndPenaltyTogether) {
  std::mt19937_64 rng(46);
  auto inst = logistic_instance(rng, 60, 8);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 60);
  PenaltyConfig pen;
  pen.lambda = 0.04;
  const Vector base = solve_l1(loss, pen, Vector::Zero(8)).coef;
  for (double c : {0.25, 3.0}) {
    ScaledObjective<GlmLoss> scaled{loss, c};
    PenaltyConfig sp = pen;
    sp.lambda = c * pen.lambda;
    SolveOptions opts;
    opts.tol = 1e-7 * c;
    EXPECT_LT((solve_l1(scaled, sp, Vector::Zero(8), opts).coef - base).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(SolveL1, NonConvergenceFlagged) {
  std::mt19937_64 rng(47);
  auto inst = logistic_instance(rng, 60, 8);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 60);
  PenaltyConfig pen;
  pen.lambda = 0.001;
  SolveOptions opts;
  opts.max_iter = 2;
  auto res = solve_l1(loss, pen, Vector::Zero(8), opts);
  EXPECT_FALSE(res.converged);
  EXPECT_EQ(res.iterations, 2);
  EXPECT_EQ(res.coef.size(), 8);
}

TEST(SolveL1, NonFiniteObjectiveThrows) {
  FunctionObjective bad{2, [](const Vector& b) { return b(0) > 0.1 ? std::nan("") : 0.5 * b.squaredNorm() - b(0); },
                        [](const Vector& b) { return Vector(b - Vector::Unit(2, 0)); }};
  PenaltyConfig pen;
  pen.lambda = 0.0;
  EXPECT_THROW(solve_l1(bad, pen, Vector::Zero(2)), SolverDivergence);
}

// singular curvature with a linear pull along its null space larger than lambda
TEST(SolveL1, UnboundedObjectiveThrows) {
  QuadraticObjective q{Matrix::Zero(2, 2), Vector::Zero(2)};
  q.a(0, 0) = 1.0;
  q.linear(1) = -1.0;
  SolveOptions opts;
  opts.divergence_bound = 1e4;
  EXPECT_THROW(solve_l1(q, 0.5, Vector::Zero(2), opts, true), SolverDivergence);
  const auto bounded = solve_l1(q, 1.5, Vector::Zero(2), {}, true);
  EXPECT_TRUE(bounded.converged);
  EXPECT_EQ(bounded.coef(1), 0.0);
}

TEST(LambdaGrid, MaxGivesAllZeroSolution) {
  std::mt19937_64 rng(48);
  auto inst = logistic_instance(rng, 80, 6);
  GlmLoss loss(GlmFamily::logistic(), inst.x, inst.y, 1.0 / 80);
  const double lm = lambda_max(loss);
  PenaltyConfig pen;
  pen.lambda = lm * 1.0001;
  auto res = solve_l1(loss, pen, Vector::Zero(6));
  for (Index j = 1; j < 6; ++j) EXPECT_EQ(res.coef(j), 0.0);
  pen.lambda = lm * 0.9;
  res = solve_l1(loss, pen, Vector::Zero(6));
  EXPECT_GT(res.coef.tail(5).cwiseAbs().maxCoeff(), 0.0);

  auto grid = lambda_grid(lm);
  ASSERT_EQ(grid.size(), 20u);
  EXPECT_DOUBLE_EQ(grid.front(), lm);
  EXPECT_NEAR(grid.back(), 0.01 * lm, 1e-15);
}

namespace {

FitFunction lasso_fit(const GlmFamily& fam) {
  return [fam](double lambda, const PartitionedDataset& train) {
    std::vector<Index> rows(static_cast<std::size_t>(train.rows()));
    for (Index i = 0; i < train.rows(); ++i) rows[static_cast<std::size_t>(i)] = i;
    auto loss = GlmLoss::from_rows(fam, train, rows, 1.0 / static_cast<double>(train.rows()));
    SolveOptions opts;
    opts.tol = 1e-6;
    return solve_l1(loss, lambda, Vector::Zero(train.dim()), opts).coef;
  };
}

}  // namespace

TEST(CrossValidation, SingleGridValue) {
  std::mt19937_64 rng(50);
  auto inst = logistic_instance(rng, 30, 3);
  auto res = cross_validate_lambda(lasso_fit(GlmFamily::logistic()), as_dataset(inst.x, inst.y),
                                   GlmFamily::logistic(), 3, {0.2}, 1);
  EXPECT_EQ(res.lambda, 0.2);
}

TEST(CrossValidation, RejectsBadArguments) {
  std::mt19937_64 rng(51);
  auto inst = logistic_instance(rng, 30, 3);
  auto d = as_dataset(inst.x, inst.y);
  auto fit = lasso_fit(GlmFamily::logistic());
  EXPECT_THROW(cross_validate_lambda(fit, d, GlmFamily::logistic(), 1, {0.2}, 1), ContractViolation);
  EXPECT_THROW(cross_validate_lambda(fit, d, GlmFamily::logistic(), 3, {}, 1), ContractViolation);
  EXPECT_THROW(cross_validate_lambda(fit, d, GlmFamily::logistic(), 3, {0.1, 0.2}, 1), ContractViolation);
}

TEST(CrossValidation, SingleClassFoldErrors) {
  Matrix x = Matrix::Ones(10, 2);
  for (int i = 0; i < 10; ++i) x(i, 1) = i;
  Vector y = Vector::Zero(10);
  y(0) = 1.0;  // only one positive: some fold is always single-class
  EXPECT_THROW(cross_validate_lambda(lasso_fit(GlmFamily::logistic()), as_dataset(x, y), GlmFamily::logistic(), 3,
                                     {0.2, 0.1}, 5),
               ContractViolation);
}

TEST(CrossValidation, PureNoisePrefersSparseEnd) {
  int sparse_picks = 0;
  const int seeds = 50;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> nd;
    const int n = 100, p = 10;
    Matrix x(n, p);
    Vector y(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      for (int j = 1; j < p; ++j) x(i, j) = nd(rng);
      y(i) = nd(rng);
    }
    auto d = as_dataset(x, y);
    GlmLoss full(GlmFamily::gaussian(), x, y, 1.0 / n);
    auto grid = lambda_grid(lambda_max(full));
    auto res = cross_validate_lambda(lasso_fit(GlmFamily::gaussian()), d, GlmFamily::gaussian(), 5, grid,
                                     static_cast<std::uint64_t>(seed));
    const auto pos = std::find(grid.begin(), grid.end(), res.lambda) - grid.begin();
    if (pos < static_cast<long>(grid.size() / 2)) ++sparse_picks;
  }
  EXPECT_GE(sparse_picks, 40);
}

TEST(CrossValidation, StrongSignalRecoversSupport) {
  int covered = 0;
  const int seeds = 50;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    std::normal_distribution<double> nd;
    const int n = 200, p = 10;
    Matrix x(n, p);
    Vector y(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      for (int j = 1; j < p; ++j) x(i, j) = nd(rng);
      y(i) = 1.0 * x(i, 2) - 1.0 * x(i, 5) + nd(rng);
    }
    auto d = as_dataset(x, y);
    GlmLoss full(GlmFamily::gaussian(), x, y, 1.0 / n);
    auto grid = lambda_grid(lambda_max(full));
    auto fit = lasso_fit(GlmFamily::gaussian());
    auto res = cross_validate_lambda(fit, d, GlmFamily::gaussian(), 5, grid, static_cast<std::uint64_t>(seed));
    const Vector b = fit(res.lambda, d);
    if (b(2) != 0.0 && b(5) != 0.0) ++covered;
  }
  EXPECT_GE(covered, 45);
}
