#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedtl/error.hpp"

namespace fedtl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class FamilyTag { gaussian, logistic };

inline const char* to_string(FamilyTag tag) {
  return tag == FamilyTag::gaussian ? "gaussian" : "logistic";
}

inline FamilyTag family_from_string(const std::string& s) {
  if (s == "gaussian") return FamilyTag::gaussian;
  if (s == "logistic") return FamilyTag::logistic;
  throw ContractViolation("unknown family '" + s + "'");
}

/// Canonical-link GLM described by its cumulant function psi and the first
/// two derivatives (mean and variance functions).
///
/// The logistic cumulant log(1 + e^t) is evaluated with a +-35 cutoff and the
/// mean is clamped to [1e-15, 1 - 1e-15], so every member stays finite for
/// any finite linear predictor.
struct GlmFamily {
  FamilyTag tag = FamilyTag::gaussian;

  static constexpr double kLogisticCutoff = 35.0;
  static constexpr double kMeanClamp = 1e-15;

  static GlmFamily gaussian() { return {FamilyTag::gaussian}; }
  static GlmFamily logistic() { return {FamilyTag::logistic}; }

  double psi(double t) const {
    if (tag == FamilyTag::gaussian) return 0.5 * t * t;
    if (t > kLogisticCutoff) return t;
    if (t < -kLogisticCutoff) return std::exp(t);
    return std::log1p(std::exp(t));
  }

  double psi_dot(double t) const {
    if (tag == FamilyTag::gaussian) return t;
    const double mu = 1.0 / (1.0 + std::exp(-t));
    return std::clamp(mu, kMeanClamp, 1.0 - kMeanClamp);
  }

  double psi_ddot(double t) const {
    if (tag == FamilyTag::gaussian) return 1.0;
    const double mu = psi_dot(t);
    return mu * (1.0 - mu);
  }

  bool operator==(const GlmFamily&) const = default;
};

/// Rows of a design matrix tagged with the site that stores them and the
/// population they come from. Sites are numbered 1..M, populations 0..K
/// (0 is the target). Column 0 of X is the intercept by convention.
///
/// Row index sets are kept in ascending order; `population_rows` returns rows
/// site-major (sites ascending, then rows ascending), which is the canonical
/// summation order used by every federated/pooled comparison.
class PartitionedDataset {
 public:
  PartitionedDataset() = default;

  PartitionedDataset(Matrix x, Vector y, std::vector<int> site_of,
                     std::vector<int> pop_of)
      : x_(std::move(x)),
        y_(std::move(y)),
        site_of_(std::move(site_of)),
        pop_of_(std::move(pop_of)) {
    const auto n = static_cast<std::size_t>(x_.rows());
    detail::require(x_.cols() >= 1, "dataset needs p >= 1 columns");
    detail::require(static_cast<std::size_t>(y_.size()) == n,
                    "y length does not match X rows");
    detail::require(site_of_.size() == n, "site_of length does not match X rows");
    detail::require(pop_of_.size() == n, "pop_of length does not match X rows");
    for (std::size_t i = 0; i < n; ++i) {
      detail::require(site_of_[i] >= 1, "site ids must be >= 1");
      detail::require(pop_of_[i] >= 0, "population ids must be >= 0");
      num_sites_ = std::max(num_sites_, site_of_[i]);
      num_populations_ = std::max(num_populations_, pop_of_[i] + 1);
      cells_[{site_of_[i], pop_of_[i]}].push_back(static_cast<Index>(i));
    }
  }

  Index rows() const { return x_.rows(); }
  Index dim() const { return x_.cols(); }
  const Matrix& x() const { return x_; }
  const Vector& y() const { return y_; }
  int site_of(Index i) const { return site_of_[static_cast<std::size_t>(i)]; }
  int pop_of(Index i) const { return pop_of_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& site_ids() const { return site_of_; }
  const std::vector<int>& population_ids() const { return pop_of_; }

  /// Largest site id present (M).
  int num_sites() const { return num_sites_; }
  /// Largest population id present plus one (K + 1).
  int num_populations() const { return num_populations_; }

  /// Rows of cell (site, population), ascending. Empty if absent.
  std::span<const Index> cell(int site, int population) const {
    auto it = cells_.find({site, population});
    if (it == cells_.end()) return {};
    return it->second;
  }

  Index count(int site, int population) const {
    return static_cast<Index>(cell(site, population).size());
  }

  /// N^(k).
  Index population_count(int population) const {
    Index total = 0;
    for (int m = 1; m <= num_sites_; ++m) total += count(m, population);
    return total;
  }

  /// Rows of population k across all sites, site-major.
  std::vector<Index> population_rows(int population) const {
    std::vector<Index> out;
    for (int m = 1; m <= num_sites_; ++m) {
      auto c = cell(m, population);
      out.insert(out.end(), c.begin(), c.end());
    }
    return out;
  }

  /// Rows held by one site, ascending.
  std::vector<Index> site_rows(int site) const {
    std::vector<Index> out;
    for (Index i = 0; i < rows(); ++i)
      if (site_of(i) == site) out.push_back(i);
    return out;
  }

  /// Copy of the given rows with their labels.
  PartitionedDataset subset(std::span<const Index> idx) const {
    Matrix x(static_cast<Index>(idx.size()), dim());
    Vector y(static_cast<Index>(idx.size()));
    std::vector<int> s, k;
    s.reserve(idx.size());
    k.reserve(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      x.row(static_cast<Index>(r)) = x_.row(idx[r]);
      y(static_cast<Index>(r)) = y_(idx[r]);
      s.push_back(site_of(idx[r]));
      k.push_back(pop_of(idx[r]));
    }
    return {std::move(x), std::move(y), std::move(s), std::move(k)};
  }

  /// Throws unless outcomes are valid for the family (binary for logistic,
  /// finite for gaussian).
  void validate_outcomes(const GlmFamily& family) const {
    for (Index i = 0; i < y_.size(); ++i) {
      const double v = y_(i);
      if (!std::isfinite(v)) throw ContractViolation("non-finite outcome");
      if (family.tag == FamilyTag::logistic && v != 0.0 && v != 1.0)
        throw ContractViolation("logistic outcomes must be 0 or 1");
    }
  }

 private:
  Matrix x_;
  Vector y_;
  std::vector<int> site_of_;
  std::vector<int> pop_of_;
  int num_sites_ = 0;
  int num_populations_ = 0;
  std::map<std::pair<int, int>, std::vector<Index>> cells_;
};

namespace detail {

inline void check_subset(const PartitionedDataset& data, std::span<const Index> subset,
                         const Vector& b) {
  require(b.size() == data.dim(), "coefficient length " + std::to_string(b.size()) +
                                      " does not match p = " + std::to_string(data.dim()));
  for (Index i : subset) require(i >= 0 && i < data.rows(), "row index out of range");
}

// Splits `subset` into runs of equal site id so that sums are formed per site
// and then added in run order. A sum over several sites is then bit-identical
// to adding the per-site sums one after another.
template <class Fn>
void for_each_site_run(const PartitionedDataset& data, std::span<const Index> subset, Fn&& fn) {
  std::size_t start = 0;
  while (start < subset.size()) {
    std::size_t end = start + 1;
    const int site = data.site_of(subset[start]);
    while (end < subset.size() && data.site_of(subset[end]) == site) ++end;
    fn(subset.subspan(start, end - start));
    start = end;
  }
}

inline Matrix gather_rows(const Matrix& x, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

}  // namespace detail

/// Sum over `subset` of psi(x_i'b) - y_i x_i'b. Empty subset gives 0.
inline double neg_log_lik(const GlmFamily& family, const PartitionedDataset& data,
                          std::span<const Index> subset, const Vector& b) {
  detail::check_subset(data, subset, b);
  double total = 0.0;
  detail::for_each_site_run(data, subset, [&](std::span<const Index> run) {
    double part = 0.0;
    for (Index i : run) {
      const double eta = data.x().row(i).dot(b);
      part += family.psi(eta) - data.y()(i) * eta;
    }
    total += part;
  });
  return total;
}

/// Unnormalized gradient sum_i x_i (psi'(x_i'b) - y_i).
inline Vector gradient(const GlmFamily& family, const PartitionedDataset& data,
                       std::span<const Index> subset, const Vector& b) {
  detail::check_subset(data, subset, b);
  Vector total = Vector::Zero(data.dim());
  detail::for_each_site_run(data, subset, [&](std::span<const Index> run) {
    const Matrix xs = detail::gather_rows(data.x(), run);
    Vector resid(xs.rows());
    for (Index r = 0; r < xs.rows(); ++r)
      resid(r) = family.psi_dot(xs.row(r).dot(b)) - data.y()(run[static_cast<std::size_t>(r)]);
    total += xs.transpose() * resid;
  });
  return total;
}

/// Unnormalized Hessian sum_i x_i x_i' psi''(x_i'b); exactly symmetric.
inline Matrix hessian(const GlmFamily& family, const PartitionedDataset& data,
                      std::span<const Index> subset, const Vector& b) {
  detail::check_subset(data, subset, b);
  const Index p = data.dim();
  Matrix total = Matrix::Zero(p, p);
  detail::for_each_site_run(data, subset, [&](std::span<const Index> run) {
    const Matrix xs = detail::gather_rows(data.x(), run);
    Vector w(xs.rows());
    for (Index r = 0; r < xs.rows(); ++r) w(r) = family.psi_ddot(xs.row(r).dot(b));
    Matrix part = Matrix::Zero(p, p);
    part.selfadjointView<Eigen::Lower>().rankUpdate(xs.transpose() * w.cwiseSqrt().asDiagonal());
    total += part;
  });
  Matrix full = total.selfadjointView<Eigen::Lower>();
  return full;
}

}  // namespace fedtl
