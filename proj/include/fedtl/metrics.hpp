#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtl/error.hpp"
#include "fedtl/glm.hpp"

namespace fedtl {

/// ||estimate - truth||^2 / p
inline double mse(const Vector& estimate, const Vector& truth) {
  detail::require(estimate.size() == truth.size(), "mse: dimension mismatch");
  detail::require(estimate.size() > 0, "mse: empty vectors");
  return (estimate - truth).squaredNorm() / static_cast<double>(truth.size());
}

inline double sse(const Vector& estimate, const Vector& truth) {
  detail::require(estimate.size() == truth.size(), "sse: dimension mismatch");
  return (estimate - truth).squaredNorm();
}

namespace detail {

inline void check_labels(const Vector& scores, const Vector& labels, const char* who) {
  require(scores.size() == labels.size(), std::string(who) + ": scores and labels differ in length");
  for (Index i = 0; i < labels.size(); ++i)
    require(labels(i) == 0.0 || labels(i) == 1.0, std::string(who) + ": labels must be 0 or 1");
}

}  // namespace detail

/// Mann-Whitney AUC: share of (positive, negative) pairs ordered correctly,
/// ties counting one half. Depends on the scores only through their ranks.
inline double auc(const Vector& scores, const Vector& labels) {
  detail::check_labels(scores, labels, "auc");
  const Index n = scores.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return scores(a) < scores(b); });
  // twice the rank sum of positives, using mid-ranks for ties (integer valued)
  std::int64_t twice_rank_sum = 0;
  std::int64_t n_pos = 0;
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j < n && scores(order[static_cast<std::size_t>(j)]) == scores(order[static_cast<std::size_t>(i)])) ++j;
    const std::int64_t twice_mid = static_cast<std::int64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (Index r = i; r < j; ++r)
      if (labels(order[static_cast<std::size_t>(r)]) == 1.0) {
        twice_rank_sum += twice_mid;
        ++n_pos;
      }
    i = j;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("auc: labels contain a single class");
  const std::int64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Odds of y = 1 in the top fifth of scores over the odds in the bottom
/// fifth (floor(n / 5) rows each, boundary ties resolved by input order).
/// Adds 0.5 to every cell when any cell is zero.
inline double odds_ratio_quintiles(const Vector& scores, const Vector& labels) {
  detail::check_labels(scores, labels, "odds_ratio_quintiles");
  const Index n = scores.size();
  if (n < 10) throw MetricError("odds_ratio_quintiles: needs at least 10 samples");
  const double pos = labels.sum();
  if (pos == 0.0 || pos == static_cast<double>(n)) throw MetricError("odds_ratio_quintiles: single class");
  const Index g = n / 5;
  if (g == 0) throw MetricError("odds_ratio_quintiles: empty quintile group");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores(a) < scores(b); });
  double top_pos = 0, bottom_pos = 0;
  for (Index r = 0; r < g; ++r) {
    bottom_pos += labels(order[static_cast<std::size_t>(r)]);
    top_pos += labels(order[static_cast<std::size_t>(n - 1 - r)]);
  }
  double a = top_pos, b = static_cast<double>(g) - top_pos;
  double c = bottom_pos, d = static_cast<double>(g) - bottom_pos;
  if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) {
    a += 0.5;
    b += 0.5;
    c += 0.5;
    d += 0.5;
  }
  return (a / b) / (c / d);
}

// ---------------------------------------------------------------------------
// Replication reports

struct ReplicationReport {
  std::string method;
  std::uint64_t seed = 0;
  double mse = std::numeric_limits<double>::quiet_NaN();
  double sse = std::numeric_limits<double>::quiet_NaN();
  double auc = std::numeric_limits<double>::quiet_NaN();
  double odds_ratio = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t comm_gradient_bytes = 0;
  std::uint64_t comm_hessian_bytes = 0;
  int rounds = 0;
  double wall_ms = 0.0;
  std::string error;  // empty when the fit and metrics succeeded

  bool ok() const { return error.empty(); }
};

inline const char* csv_header() {
  return "method,seed,mse,sse,auc,odds_ratio,comm_gradient_bytes,comm_hessian_bytes,rounds,wall_ms,error";
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

}  // namespace detail

inline void write_csv_row(std::ostream& os, const ReplicationReport& r) {
  os << detail::csv_escape(r.method) << ',' << r.seed << ',' << detail::fmt_double(r.mse) << ','
     << detail::fmt_double(r.sse) << ',' << detail::fmt_double(r.auc) << ',' << detail::fmt_double(r.odds_ratio)
     << ',' << r.comm_gradient_bytes << ',' << r.comm_hessian_bytes << ',' << r.rounds << ','
     << detail::fmt_double(r.wall_ms) << ',' << detail::csv_escape(r.error) << '\n';
}

struct Summary {
  std::size_t n = 0;  // finite values only
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();  // sample SD / sqrt(n); needs n >= 2
};

/// Mean, median and standard error of the finite entries, summed in input order.
inline Summary summarize(const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

inline nlohmann::json to_json(const Summary& s) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return {{"n", s.n}, {"mean", num(s.mean)}, {"median", num(s.median)}, {"se", num(s.se)}};
}

/// Per-method summaries of every metric; failed replications are counted, not averaged.
inline nlohmann::json summarize_reports(const std::vector<ReplicationReport>& reports) {
  std::vector<std::string> methods;
  for (const auto& r : reports)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  nlohmann::json out = nlohmann::json::object();
  for (const auto& m : methods) {
    std::vector<double> mse_v, sse_v, auc_v, or_v, grad_v, hess_v;
    std::size_t failures = 0, total = 0;
    for (const auto& r : reports) {
      if (r.method != m) continue;
      ++total;
      if (!r.ok()) {
        ++failures;
        continue;
      }
      mse_v.push_back(r.mse);
      sse_v.push_back(r.sse);
      auc_v.push_back(r.auc);
      or_v.push_back(r.odds_ratio);
      grad_v.push_back(static_cast<double>(r.comm_gradient_bytes));
      hess_v.push_back(static_cast<double>(r.comm_hessian_bytes));
    }
    out[m] = {{"replications", total},
              {"failures", failures},
              {"mse", to_json(summarize(mse_v))},
              {"sse", to_json(summarize(sse_v))},
              {"auc", to_json(summarize(auc_v))},
              {"odds_ratio", to_json(summarize(or_v))},
              {"comm_gradient_bytes", to_json(summarize(grad_v))},
              {"comm_hessian_bytes", to_json(summarize(hess_v))}};
  }
  return out;
}

}  // namespace fedtl
