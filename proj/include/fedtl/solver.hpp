#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedtl/glm.hpp"

namespace fedtl {

/// Anything with a dimension, a value, and a value+gradient evaluation.
/// Objectives may also provide `hessian_vector(b, v)`; the solver uses it to
/// estimate the initial step size and falls back to gradient differences.
template <class F>
concept SmoothObjective = requires(const F& f, const Vector& b, Vector& g) {
  { f.dim() } -> std::convertible_to<Index>;
  { f.value(b) } -> std::convertible_to<double>;
  { f.value_and_gradient(b, g) } -> std::convertible_to<double>;
};

/// L1 penalty settings plus the thresholding constants that travel with them.
struct PenaltyConfig {
  double lambda = 0.0;
  double c0 = 1.0;
  double c1 = 1.0;
  int c_n = 1;
  // Column 0 is the intercept; it is left out of the L1 term unless this is set.
  bool penalize_intercept = false;
};

struct SparsityBudget {
  int s = 1;
  int h = 0;
};

struct SolveOptions {
  double tol = 1e-7;
  int max_iter = 10000;
  bool backtracking = true;
  int power_iterations = 20;
  // Iterates beyond this max-norm mean the objective is unbounded below.
  double divergence_bound = 1e10;
  // Called after every iteration with the current penalized objective.
  std::function<void(int, double)> on_iterate;
};

struct SolveResult {
  Vector coef;
  bool converged = false;
  int iterations = 0;
  double objective = 0.0;  // smooth part + penalty
  double kkt_residual = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Thresholding operators

inline Vector soft_threshold(const Vector& v, double tau) {
  Vector out(v.size());
  for (Index j = 0; j < v.size(); ++j) {
    const double mag = std::abs(v(j)) - tau;
    out(j) = mag > 0.0 ? std::copysign(mag, v(j)) : 0.0;
  }
  return out;
}

/// Keeps the k largest-magnitude entries (ties: lowest index first), zeroes
/// the rest.
inline Vector hard_threshold_topk(const Vector& v, Index k) {
  detail::require(k >= 0 && k <= v.size(), "hard threshold budget exceeds dimension");
  if (k == v.size()) return v;
  std::vector<Index> order(static_cast<std::size_t>(v.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return std::abs(v(a)) > std::abs(v(b)); });
  Vector out = Vector::Zero(v.size());
  for (Index r = 0; r < k; ++r) out(order[static_cast<std::size_t>(r)]) = v(order[static_cast<std::size_t>(r)]);
  return out;
}

// ---------------------------------------------------------------------------
// Concrete objectives

/// scale * sum_i [psi(x_i'b + o_i) - y_i (x_i'b + o_i)] over a contiguous copy
/// of rows. The offset o encodes evaluation at shifted arguments, e.g.
/// L(w + b) uses o = X w.
class GlmLoss {
 public:
  GlmLoss(GlmFamily family, Matrix x, Vector y, double scale, Vector offset = {})
      : family_(family), x_(std::move(x)), y_(std::move(y)), scale_(scale), offset_(std::move(offset)) {
    if (offset_.size() == 0) offset_ = Vector::Zero(x_.rows());
    detail::require(y_.size() == x_.rows() && offset_.size() == x_.rows(),
                    "GlmLoss: row count mismatch");
  }

  /// Loss over data rows `subset`, scaled by `scale`, evaluated at b + shift.
  static GlmLoss from_rows(const GlmFamily& family, const PartitionedDataset& data,
                           std::span<const Index> subset, double scale,
                           const Vector* shift = nullptr) {
    Matrix x = detail::gather_rows(data.x(), subset);
    Vector y(static_cast<Index>(subset.size()));
    for (std::size_t r = 0; r < subset.size(); ++r) y(static_cast<Index>(r)) = data.y()(subset[r]);
    Vector offset = shift ? Vector(x * *shift) : Vector::Zero(x.rows());
    return {family, std::move(x), std::move(y), scale, std::move(offset)};
  }

  Index dim() const { return x_.cols(); }
  Index rows() const { return x_.rows(); }

  double value(const Vector& b) const {
    const Vector eta = x_ * b + offset_;
    double total = 0.0;
    for (Index i = 0; i < eta.size(); ++i) total += family_.psi(eta(i)) - y_(i) * eta(i);
    return scale_ * total;
  }

  double value_and_gradient(const Vector& b, Vector& g) const {
    const Vector eta = x_ * b + offset_;
    Vector resid(eta.size());
    double total = 0.0;
    for (Index i = 0; i < eta.size(); ++i) {
      total += family_.psi(eta(i)) - y_(i) * eta(i);
      resid(i) = family_.psi_dot(eta(i)) - y_(i);
    }
    g.noalias() = scale_ * (x_.transpose() * resid);
    return scale_ * total;
  }

  Vector hessian_vector(const Vector& b, const Vector& v) const {
    const Vector eta = x_ * b + offset_;
    Vector xv = x_ * v;
    for (Index i = 0; i < eta.size(); ++i) xv(i) *= family_.psi_ddot(eta(i));
    return scale_ * (x_.transpose() * xv);
  }

 private:
  GlmFamily family_;
  Matrix x_;
  Vector y_;
  double scale_;
  Vector offset_;
};

/// Sum of GLM losses, each with its own rows, scale and offset.
class GlmLossSum {
 public:
  explicit GlmLossSum(std::vector<GlmLoss> terms) : terms_(std::move(terms)) {
    detail::require(!terms_.empty(), "GlmLossSum needs at least one term");
    for (const auto& t : terms_) detail::require(t.dim() == terms_.front().dim(), "GlmLossSum: dimension mismatch");
  }
  Index dim() const { return terms_.front().dim(); }
  double value(const Vector& b) const {
    double v = 0.0;
    for (const auto& t : terms_) v += t.value(b);
    return v;
  }
  double value_and_gradient(const Vector& b, Vector& g) const {
    g = Vector::Zero(dim());
    Vector gi(dim());
    double v = 0.0;
    for (const auto& t : terms_) {
      v += t.value_and_gradient(b, gi);
      g += gi;
    }
    return v;
  }
  Vector hessian_vector(const Vector& b, const Vector& v) const {
    Vector out = Vector::Zero(dim());
    for (const auto& t : terms_) out += t.hessian_vector(b, v);
    return out;
  }

 private:
  std::vector<GlmLoss> terms_;
};

/// 0.5 b'Ab + l'b + c with A symmetric positive semi-definite.
struct QuadraticObjective {
  Matrix a;
  Vector linear;
  double constant = 0.0;

  Index dim() const { return linear.size(); }
  double value(const Vector& b) const { return 0.5 * b.dot(a * b) + linear.dot(b) + constant; }
  double value_and_gradient(const Vector& b, Vector& g) const {
    const Vector ab = a * b;
    g = ab + linear;
    return 0.5 * b.dot(ab) + linear.dot(b) + constant;
  }
  Vector hessian_vector(const Vector&, const Vector& v) const { return a * v; }
};

/// Type-erased objective built from callables; handy in tests.
struct FunctionObjective {
  Index p = 0;
  std::function<double(const Vector&)> f;
  std::function<Vector(const Vector&)> grad;

  Index dim() const { return p; }
  double value(const Vector& b) const { return f(b); }
  double value_and_gradient(const Vector& b, Vector& g) const {
    g = grad(b);
    return f(b);
  }
};

/// Multiplies an objective by a positive constant.
template <SmoothObjective F>
struct ScaledObjective {
  const F& base;
  double factor;
  Index dim() const { return base.dim(); }
  double value(const Vector& b) const { return factor * base.value(b); }
  double value_and_gradient(const Vector& b, Vector& g) const {
    const double v = base.value_and_gradient(b, g);
    g *= factor;
    return factor * v;
  }
};

// ---------------------------------------------------------------------------
// Solver

namespace detail {

inline bool coordinate_penalized(const PenaltyConfig& pen, Index j) {
  return j != 0 || pen.penalize_intercept;
}

inline double l1_norm(const PenaltyConfig& pen, const Vector& b) {
  double s = 0.0;
  for (Index j = 0; j < b.size(); ++j)
    if (coordinate_penalized(pen, j)) s += std::abs(b(j));
  return s;
}

inline Vector prox(const PenaltyConfig& pen, const Vector& v, double tau) {
  Vector out = soft_threshold(v, tau);
  if (!pen.penalize_intercept && v.size() > 0) out(0) = v(0);
  return out;
}

template <SmoothObjective F>
Vector hessian_vector(const F& obj, const Vector& b, const Vector& v) {
  if constexpr (requires { obj.hessian_vector(b, v); }) {
    return obj.hessian_vector(b, v);
  } else {
    const double eps = 1e-6;
    Vector g1(obj.dim()), g0(obj.dim());
    obj.value_and_gradient(b + eps * v, g1);
    obj.value_and_gradient(b, g0);
    return (g1 - g0) / eps;
  }
}

}  // namespace detail

/// Max-norm violation of the lasso optimality conditions at b given the
/// smooth-part gradient g.
inline double kkt_residual(const Vector& b, const Vector& g, const PenaltyConfig& pen) {
  double worst = 0.0;
  for (Index j = 0; j < b.size(); ++j) {
    double r;
    if (!detail::coordinate_penalized(pen, j)) {
      r = std::abs(g(j));
    } else if (b(j) != 0.0) {
      r = std::abs(g(j) + pen.lambda * (b(j) > 0 ? 1.0 : -1.0));
    } else {
      r = std::max(std::abs(g(j)) - pen.lambda, 0.0);
    }
    worst = std::max(worst, r);
  }
  return worst;
}

/// Power-iteration estimate of the largest Hessian eigenvalue at b.
template <SmoothObjective F>
double estimate_curvature(const F& obj, const Vector& b, int iterations) {
  const Index p = obj.dim();
  Vector v = Vector::Constant(p, 1.0 / std::sqrt(static_cast<double>(p)));
  double est = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Vector hv = detail::hessian_vector(obj, b, v);
    const double norm = hv.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) break;
    est = norm;
    v = hv / norm;
  }
  return est;
}

/// Minimizes obj(b) + lambda * ||b||_1 with monotone accelerated proximal
/// gradient and backtracking. Stops once the KKT residual is <= tol.
///
/// The momentum is reset whenever a step fails to improve the objective, so
/// the reported iterates decrease monotonically. Non-convergence returns the
/// best iterate with `converged = false`; NaN/Inf or an iterate beyond
/// `divergence_bound` throws SolverDivergence.
template <SmoothObjective F>
SolveResult solve_l1(const F& obj, const PenaltyConfig& pen, const Vector& init,
                     const SolveOptions& opts = {}) {
  const Index p = obj.dim();
  detail::require(init.size() == p, "solve_l1: init has wrong dimension");
  detail::require(pen.lambda >= 0.0, "solve_l1: lambda must be >= 0");
  detail::require(opts.tol > 0.0, "solve_l1: tol must be > 0");

  auto penalized = [&](double smooth, const Vector& b) { return smooth + pen.lambda * detail::l1_norm(pen, b); };
  auto check_finite = [](double v) {
    if (!std::isfinite(v)) throw SolverDivergence("objective became non-finite");
  };

  SolveResult res;
  Vector x = init;
  Vector gx(p);
  double fx = obj.value_and_gradient(x, gx);
  check_finite(fx);
  double big_fx = penalized(fx, x);
  res.kkt_residual = kkt_residual(x, gx, pen);
  if (res.kkt_residual <= opts.tol) {
    res.coef = x;
    res.converged = true;
    res.objective = big_fx;
    return res;
  }

  double lip = estimate_curvature(obj, x, opts.power_iterations);
  if (!(lip > 0.0) || !std::isfinite(lip)) lip = 1.0;
  if (!opts.backtracking) lip *= 1.05;

  Vector y = x, x_prev = x, gy(p), z(p), gz(p);
  double t = 1.0;
  bool from_x = true;  // y == x

  for (int k = 1; k <= opts.max_iter; ++k) {
    res.iterations = k;
    const double fy = obj.value_and_gradient(y, gy);
    check_finite(fy);

    double fz = 0.0;
    for (int bt = 0; bt < 60; ++bt) {
      z = detail::prox(pen, y - gy / lip, pen.lambda / lip);
      fz = obj.value_and_gradient(z, gz);
      check_finite(fz);
      if (!opts.backtracking) break;
      const Vector d = z - y;
      const double model = fy + gy.dot(d) + 0.5 * lip * d.squaredNorm();
      if (fz <= model + 1e-12 * std::max(1.0, std::abs(fy))) break;
      lip *= 2.0;
    }

    const double big_fz = penalized(fz, z);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    x_prev = x;
    if (big_fz <= big_fx) {
      x = z;
      gx = gz;
      big_fx = big_fz;
      y = x + ((t - 1.0) / t_next) * (x - x_prev);
      t = t_next;
      from_x = false;
    } else if (from_x) {
      // a plain proximal step from x cannot increase the objective beyond rounding
      x = z;
      gx = gz;
      y = x;
      t = 1.0;
    } else {
      // restart from the best point
      y = x;
      t = 1.0;
      from_x = true;
    }

    if (x.size() > 0 && !(x.cwiseAbs().maxCoeff() <= opts.divergence_bound))
      throw SolverDivergence("iterates unbounded; the objective has no minimizer");
    if (opts.on_iterate) opts.on_iterate(k, big_fx);
    res.kkt_residual = kkt_residual(x, gx, pen);
    if (res.kkt_residual <= opts.tol) {
      res.converged = true;
      break;
    }
  }
  res.coef = x;
  res.objective = penalized(obj.value(x), x);
  return res;
}

template <SmoothObjective F>
SolveResult solve_l1(const F& obj, double lambda, const Vector& init, const SolveOptions& opts = {},
                     bool penalize_intercept = false) {
  PenaltyConfig pen;
  pen.lambda = lambda;
  pen.penalize_intercept = penalize_intercept;
  return solve_l1(obj, pen, init, opts);
}

// ---------------------------------------------------------------------------
// Penalty grids and cross-validation

/// Smallest lambda whose solution has every penalized coordinate at zero.
/// With an unpenalized intercept the gradient is taken at the intercept-only
/// fit rather than at 0.
template <SmoothObjective F>
double lambda_max(const F& obj, bool penalize_intercept = false) {
  const Index p = obj.dim();
  Vector b = Vector::Zero(p);
  if (!penalize_intercept && p > 0) {
    PenaltyConfig huge;
    huge.lambda = 1e12;
    b = solve_l1(obj, huge, b, SolveOptions{1e-10, 2000}).coef;
  }
  Vector g(p);
  obj.value_and_gradient(b, g);
  double m = 0.0;
  for (Index j = (penalize_intercept ? 0 : 1); j < p; ++j) m = std::max(m, std::abs(g(j)));
  return m;
}

/// `count` log-spaced values from lam_max down to ratio * lam_max.
inline std::vector<double> lambda_grid(double lam_max, int count = 20, double ratio = 0.01) {
  detail::require(count >= 1, "lambda grid needs at least one point");
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(count));
  if (count == 1) return {lam_max};
  for (int i = 0; i < count; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(count - 1);
    grid.push_back(lam_max * std::pow(ratio, frac));
  }
  return grid;
}

/// Fits a model for one penalty on the given training rows.
using FitFunction = std::function<Vector(double lambda, const PartitionedDataset& train)>;

struct CrossValidationResult {
  double lambda = 0.0;
  std::vector<double> mean_loss;  // per grid point, held-out NLL per row
};

/// K-fold selection of lambda by mean held-out negative log-likelihood.
/// Ties go to the larger lambda. For the logistic family every held-out fold
/// must contain both classes; the assignment is redrawn once, then it throws.
inline CrossValidationResult cross_validate_lambda(const FitFunction& fit, const PartitionedDataset& data,
                                                   const GlmFamily& family, int folds,
                                                   const std::vector<double>& grid, std::uint64_t seed) {
  detail::require(folds >= 2, "cross-validation needs folds >= 2");
  detail::require(!grid.empty(), "lambda grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i)
    detail::require(grid[i] < grid[i - 1], "lambda grid must be strictly decreasing");
  detail::require(data.rows() >= folds, "fewer rows than folds");

  CrossValidationResult out;
  if (grid.size() == 1) {
    out.lambda = grid.front();
    out.mean_loss = {0.0};
    return out;
  }

  const auto n = static_cast<std::size_t>(data.rows());
  std::mt19937_64 rng(seed);
  std::vector<int> fold_of(n);
  auto assign = [&] {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t r = 0; r < n; ++r) fold_of[perm[r]] = static_cast<int>(r % static_cast<std::size_t>(folds));
  };
  auto folds_ok = [&] {
    if (family.tag != FamilyTag::logistic) return true;
    for (int f = 0; f < folds; ++f) {
      bool has0 = false, has1 = false;
      for (std::size_t i = 0; i < n; ++i)
        if (fold_of[i] == f) (data.y()(static_cast<Index>(i)) > 0.5 ? has1 : has0) = true;
      if (!(has0 && has1)) return false;
    }
    return true;
  };
  assign();
  if (!folds_ok()) {
    assign();
    if (!folds_ok()) throw ContractViolation("cross-validation fold with a single outcome class");
  }

  out.mean_loss.assign(grid.size(), 0.0);
  for (int f = 0; f < folds; ++f) {
    std::vector<Index> train_rows, test_rows;
    for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test_rows : train_rows).push_back(static_cast<Index>(i));
    const PartitionedDataset train = data.subset(train_rows);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const Vector b = fit(grid[g], train);
      out.mean_loss[g] += neg_log_lik(family, data, test_rows, b);
    }
  }
  std::size_t best = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    out.mean_loss[g] /= static_cast<double>(n);
    if (out.mean_loss[g] < out.mean_loss[best]) best = g;
  }
  out.lambda = grid[best];
  return out;
}

}  // namespace fedtl
