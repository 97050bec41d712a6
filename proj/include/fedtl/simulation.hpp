#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <boost/math/distributions/normal.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>
#include <nlohmann/json.hpp>

#include "fedtl/error.hpp"
#include "fedtl/glm.hpp"

namespace fedtl {

// ---------------------------------------------------------------------------
// Seed streams

/// Stage tags for seed derivation.
enum class Stream : std::uint64_t {
  coefficients = 1,
  mafs = 2,
  genotypes = 3,
  outcomes = 4,
  holdout = 5,
  replication = 6,
  folds = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// seed = f(f(f(f(root) ^ site) ^ population) ^ tag) with f = splitmix64.
/// Site 0 denotes the held-out test set.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t site, std::uint64_t population, Stream tag) {
  std::uint64_t s = splitmix64(root);
  s = splitmix64(s ^ site);
  s = splitmix64(s ^ population);
  return splitmix64(s ^ static_cast<std::uint64_t>(tag));
}

using Rng = boost::random::mt19937_64;

// ---------------------------------------------------------------------------
// Configuration

enum class Setting { S1, S2 };

inline const char* to_string(Setting s) { return s == Setting::S1 ? "S1" : "S2"; }

struct CovarianceSpec {
  int blocks = 1;
  int block_size = 1;
  double rho = 0.0;
  bool operator==(const CovarianceSpec&) const = default;
};

struct SimConfig {
  int M = 3;
  std::vector<int> n_target{100, 100, 100};  // per site
  std::vector<int> n_source{500, 500, 500};  // per site
  int p = 200;
  int s = 20;
  int h = 5;
  double delta = 0.5;
  Setting setting = Setting::S1;
  bool delta_is_variance = false;  // S2 draws N(0, delta) with delta a variance instead of an SD
  CovarianceSpec target_cov{40, 5, 0.3};
  CovarianceSpec source_cov{20, 10, 0.5};
  FamilyTag family = FamilyTag::logistic;
  double noise_sd = 1.0;  // gaussian outcomes only
  std::uint64_t seed = 1;
  int test_size = 1000;
  int leading_site = 1;
  double validation_fraction = 0.5;  // validation rows = ceil(fraction * leading-site target rows)
  bool standardize = true;

  static SimConfig desk() { return {}; }

  static SimConfig paper() {
    SimConfig c;
    c.M = 5;
    c.n_target.assign(5, 400);
    c.n_source.assign(5, 2000);
    c.p = 2000;
    c.s = 100;
    c.h = 10;
    c.target_cov = {40, 50, 0.3};
    c.source_cov = {20, 100, 0.5};
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (M < 1) fail("M must be >= 1");
    if (static_cast<int>(n_target.size()) != M) fail("n_target must have M entries");
    if (static_cast<int>(n_source.size()) != M) fail("n_source must have M entries");
    for (int n : n_target)
      if (n < 0) fail("n_target entries must be >= 0");
    for (int n : n_source)
      if (n < 0) fail("n_source entries must be >= 0");
    if (p < 2) fail("p must be >= 2");
    if (s < 0 || s > p) fail("s must be in [0, p]");
    if (h < 0 || h > p) fail("h must be in [0, p]");
    if (delta < 0.0) fail("delta must be >= 0");
    for (const auto& [name, cov] : {std::pair{"target_cov", target_cov}, std::pair{"source_cov", source_cov}}) {
      const std::string n(name);
      if (cov.blocks < 1 || cov.block_size < 1) fail(n + ".blocks and " + n + ".block_size must be >= 1");
      if (cov.blocks * cov.block_size != p)
        fail(n + ".blocks * " + n + ".block_size = " + std::to_string(cov.blocks * cov.block_size) +
             " does not equal p = " + std::to_string(p));
      if (!(cov.rho >= 0.0 && cov.rho < 1.0)) fail(n + ".rho must be in [0, 1)");
    }
    if (noise_sd <= 0.0) fail("noise_sd must be > 0");
    if (test_size < 0) fail("test_size must be >= 0");
    if (leading_site < 1 || leading_site > M) fail("leading_site must be in [1, M]");
    if (!(validation_fraction >= 0.0 && validation_fraction <= 1.0)) fail("validation_fraction must be in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Generators

/// Block-diagonal AR(1): entry (i, j) in a block is rho^|i-j|.
inline Matrix gen_covariance(int blocks, int block_size, double rho, int p = -1) {
  detail::require(blocks >= 1 && block_size >= 1, "gen_covariance: blocks and block_size must be >= 1");
  if (p >= 0 && blocks * block_size != p)
    throw ContractViolation("gen_covariance: blocks * block_size must equal p");
  const Index dim = static_cast<Index>(blocks) * block_size;
  Matrix sigma = Matrix::Zero(dim, dim);
  for (int b = 0; b < blocks; ++b) {
    const Index o = static_cast<Index>(b) * block_size;
    for (int i = 0; i < block_size; ++i)
      for (int j = 0; j < block_size; ++j) sigma(o + i, o + j) = std::pow(rho, std::abs(i - j));
  }
  return sigma;
}

inline Matrix cholesky_factor(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) throw ContractViolation("covariance is not positive definite (Cholesky failed)");
  return llt.matrixL();
}

/// Genotype cutpoints (lo, hi): x = 0 below lo, 2 above hi, else 1.
inline std::pair<double, double> hwe_cutpoints(double maf) {
  detail::require(maf > 0.0 && maf <= 0.5, "minor allele frequency must be in (0, 0.5]");
  const boost::math::normal std_normal;
  // upper-tail masses: P(x >= 1) = f (2 - f), P(x = 2) = f^2
  const double tail1 = maf * (2.0 - maf);
  const double tail2 = maf * maf;
  const double inf = std::numeric_limits<double>::infinity();
  const double lo = tail1 <= 0.0 ? inf : boost::math::quantile(boost::math::complement(std_normal, tail1));
  const double hi = tail2 <= 0.0 ? inf : boost::math::quantile(boost::math::complement(std_normal, tail2));
  return {lo, hi};
}

/// Rows z ~ N(0, L L'), categorized per column by `hwe_cutpoints`.
inline Matrix gen_genotypes_chol(Index n, const Matrix& chol_lower, const Vector& mafs, std::uint64_t seed) {
  const Index p = chol_lower.rows();
  detail::require(mafs.size() == p, "gen_genotypes: mafs length must equal p");
  std::vector<std::pair<double, double>> cuts(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) cuts[static_cast<std::size_t>(j)] = hwe_cutpoints(mafs(j));
  Rng rng(seed);
  boost::random::normal_distribution<double> nd;
  Matrix e(n, p);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) e(i, j) = nd(rng);
  const Matrix z = e * chol_lower.transpose();
  Matrix x(n, p);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) {
      const auto [lo, hi] = cuts[static_cast<std::size_t>(j)];
      x(i, j) = z(i, j) < lo ? 0.0 : (z(i, j) > hi ? 2.0 : 1.0);
    }
  return x;
}

inline Matrix gen_genotypes(Index n, const Matrix& sigma, const Vector& mafs, std::uint64_t seed) {
  return gen_genotypes_chol(n, cholesky_factor(sigma), mafs, seed);
}

/// U(0, 0.5) clipped to [0.01, 0.5].
inline Vector gen_mafs(Index p, std::uint64_t seed) {
  Rng rng(seed);
  boost::random::uniform_real_distribution<double> ud(0.0, 0.5);
  Vector f(p);
  for (Index j = 0; j < p; ++j) f(j) = std::clamp(ud(rng), 0.01, 0.5);
  return f;
}

struct GroundTruth {
  Vector beta;            // target, genotype scale
  Vector w;               // source, genotype scale
  std::vector<Index> H;   // ascending
  Vector mafs;
};

namespace detail {

/// Uniform k-subset of [0, p), ascending.
inline std::vector<Index> sample_subset(Index p, Index k, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(p));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    boost::random::uniform_int_distribution<Index> pick(i, p - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// beta: s uniformly placed entries from U(-0.5, 0.5). w = beta plus, on a
/// uniform h-subset H, a constant delta (S1) or N(0, delta) draws (S2).
inline GroundTruth gen_coefficients(Setting setting, int s, int h, double delta, int p, std::uint64_t seed,
                                    bool delta_is_variance = false) {
  detail::require(s >= 0 && s <= p && h >= 0 && h <= p, "gen_coefficients: need 0 <= s, h <= p");
  Rng rng(seed);
  GroundTruth t;
  t.beta = Vector::Zero(p);
  boost::random::uniform_real_distribution<double> ud(-0.5, 0.5);
  for (Index j : detail::sample_subset(p, s, rng)) t.beta(j) = ud(rng);
  t.H = detail::sample_subset(p, h, rng);
  t.w = t.beta;
  const double sd = delta_is_variance ? std::sqrt(delta) : delta;
  boost::random::normal_distribution<double> nd(0.0, 1.0);
  for (Index j : t.H) t.w(j) += setting == Setting::S1 ? delta : sd * nd(rng);
  return t;
}

/// Logistic: Bernoulli(psi_dot(x'b)) (saturating beyond |x'b| > 35);
/// gaussian: x'b + N(0, noise_sd^2).
inline Vector gen_outcomes(const Matrix& x, const Vector& b, std::uint64_t seed,
                           FamilyTag family = FamilyTag::logistic, double noise_sd = 1.0) {
  detail::require(x.cols() == b.size(), "gen_outcomes: dimension mismatch");
  Rng rng(seed);
  const Vector eta = x * b;
  Vector y(x.rows());
  if (family == FamilyTag::logistic) {
    boost::random::uniform_01<double> u;
    for (Index i = 0; i < y.size(); ++i) {
      const double e = eta(i);
      const double draw = u(rng);
      if (e > 35.0)
        y(i) = 1.0;
      else if (e < -35.0)
        y(i) = 0.0;
      else
        y(i) = draw < 1.0 / (1.0 + std::exp(-e)) ? 1.0 : 0.0;
    }
  } else {
    boost::random::normal_distribution<double> nd(0.0, noise_sd);
    for (Index i = 0; i < y.size(); ++i) y(i) = eta(i) + nd(rng);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Scenarios

struct Cell {
  Matrix x;  // raw genotypes
  Vector y;
};

/// Everything generated for one scenario, on the raw genotype scale.
struct RawScenario {
  SimConfig config;
  GroundTruth truth;
  std::map<std::pair<int, int>, Cell> cells;  // (site, population) training rows
  Cell validation;                            // extra target rows of the leading site
  Cell test;                                  // target-population test set
};

inline RawScenario build_raw_scenario(const SimConfig& cfg) {
  cfg.validate();
  RawScenario raw;
  raw.config = cfg;
  const auto root = cfg.seed;
  raw.truth = gen_coefficients(cfg.setting, cfg.s, cfg.h, cfg.delta, cfg.p,
                               derive_seed(root, 0, 0, Stream::coefficients), cfg.delta_is_variance);
  raw.truth.mafs = gen_mafs(cfg.p, derive_seed(root, 0, 0, Stream::mafs));
  const Matrix l_target = cholesky_factor(
      gen_covariance(cfg.target_cov.blocks, cfg.target_cov.block_size, cfg.target_cov.rho, cfg.p));
  const Matrix l_source = cholesky_factor(
      gen_covariance(cfg.source_cov.blocks, cfg.source_cov.block_size, cfg.source_cov.rho, cfg.p));

  auto draw = [&](int site, int pop, int n) {
    const auto& l = pop == 0 ? l_target : l_source;
    const auto& b = pop == 0 ? raw.truth.beta : raw.truth.w;
    Cell c;
    c.x = gen_genotypes_chol(n, l, raw.truth.mafs, derive_seed(root, site, pop, Stream::genotypes));
    c.y = gen_outcomes(c.x, b, derive_seed(root, site, pop, Stream::outcomes), cfg.family, cfg.noise_sd);
    return c;
  };

  for (int m = 1; m <= cfg.M; ++m) {
    raw.cells[{m, 0}] = draw(m, 0, cfg.n_target[static_cast<std::size_t>(m - 1)]);
    raw.cells[{m, 1}] = draw(m, 1, cfg.n_source[static_cast<std::size_t>(m - 1)]);
  }
  raw.test = draw(0, 0, cfg.test_size);

  // additional target rows at the leading site for validation, never used in training
  const auto n_lead = cfg.n_target[static_cast<std::size_t>(cfg.leading_site - 1)];
  const int n_val = static_cast<int>(std::ceil(cfg.validation_fraction * static_cast<double>(n_lead)));
  const auto lead = static_cast<std::uint64_t>(cfg.leading_site);
  raw.validation.x = gen_genotypes_chol(n_val, l_target, raw.truth.mafs, derive_seed(root, lead, 0, Stream::holdout));
  raw.validation.y =
      gen_outcomes(raw.validation.x, raw.truth.beta, derive_seed(root, lead, 1, Stream::holdout), cfg.family, cfg.noise_sd);
  return raw;
}

/// Column centers and scales; constant columns get scale 1.
struct Standardization {
  Vector mean;
  Vector scale;

  static Standardization identity(Index p) { return {Vector::Zero(p), Vector::Ones(p)}; }

  static Standardization fit(const Matrix& x) {
    const Index p = x.cols();
    Standardization st{Vector::Zero(p), Vector::Ones(p)};
    if (x.rows() == 0) return st;
    st.mean = x.colwise().mean().transpose();
    for (Index j = 0; j < p; ++j) {
      const double var = (x.col(j).array() - st.mean(j)).square().sum() / static_cast<double>(x.rows());
      st.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return st;
  }

  /// [1 | (x - mean) / scale]
  Matrix design(const Matrix& x) const {
    Matrix out(x.rows(), x.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(x.cols()) = ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
    return out;
  }
};

/// Model-ready scenario: intercept in column 0 followed by the (optionally
/// standardized) genotype columns.
struct Scenario {
  SimConfig config;
  GroundTruth truth;
  PartitionedDataset train;       // site-major rows
  PartitionedDataset validation;  // leading site, population 0
  Matrix test_x;
  Vector test_y;
  std::map<int, Standardization> site_stats;
  Vector beta_model;  // length p + 1, intercept first
  Vector w_model;

  /// Model-scale target coefficients without the intercept.
  Vector beta_slopes() const { return beta_model.tail(beta_model.size() - 1); }
};

/// Scale of a genotype column under Hardy-Weinberg: sqrt(2 f (1 - f)).
inline double hwe_sd(double f) { return std::sqrt(2.0 * f * (1.0 - f)); }

/// Standardizes each site with statistics of its own training rows; the
/// validation rows and the test set use the leading site's statistics.
inline Scenario prepare(const RawScenario& raw) {
  const auto& cfg = raw.config;
  const Index p = cfg.p;
  Scenario sc;
  sc.config = cfg;
  sc.truth = raw.truth;

  Index n = 0;
  for (const auto& [_, c] : raw.cells) n += c.x.rows();
  Matrix x(n, p + 1);
  Vector y(n);
  std::vector<int> sites, pops;
  Index row = 0;
  for (int m = 1; m <= cfg.M; ++m) {
    Index n_site = 0;
    for (int k = 0; k <= 1; ++k) n_site += raw.cells.at({m, k}).x.rows();
    Matrix site_x(n_site, p);
    Index r = 0;
    for (int k = 0; k <= 1; ++k) {
      const auto& c = raw.cells.at({m, k});
      site_x.middleRows(r, c.x.rows()) = c.x;
      r += c.x.rows();
    }
    const auto st = cfg.standardize ? Standardization::fit(site_x) : Standardization::identity(p);
    sc.site_stats[m] = st;
    x.middleRows(row, n_site) = st.design(site_x);
    for (int k = 0; k <= 1; ++k) {
      const auto& c = raw.cells.at({m, k});
      y.segment(row, c.y.size()) = c.y;
      row += c.y.size();
      sites.insert(sites.end(), static_cast<std::size_t>(c.y.size()), m);
      pops.insert(pops.end(), static_cast<std::size_t>(c.y.size()), k);
    }
  }
  sc.train = PartitionedDataset(std::move(x), std::move(y), std::move(sites), std::move(pops));

  const auto& lead = sc.site_stats.at(cfg.leading_site);
  const auto nv = static_cast<std::size_t>(raw.validation.x.rows());
  sc.validation = PartitionedDataset(lead.design(raw.validation.x), raw.validation.y,
                                     std::vector<int>(nv, cfg.leading_site), std::vector<int>(nv, 0));
  sc.test_x = lead.design(raw.test.x);
  sc.test_y = raw.test.y;

  auto to_model = [&](const Vector& b) {
    Vector out(p + 1);
    double intercept = 0.0;
    for (Index j = 0; j < p; ++j) {
      const double f = raw.truth.mafs(j);
      out(j + 1) = cfg.standardize ? b(j) * hwe_sd(f) : b(j);
      intercept += cfg.standardize ? b(j) * 2.0 * f : 0.0;
    }
    out(0) = intercept;
    return out;
  };
  sc.beta_model = to_model(raw.truth.beta);
  sc.w_model = to_model(raw.truth.w);
  return sc;
}

inline Scenario build_federated_scenario(const SimConfig& cfg) { return prepare(build_raw_scenario(cfg)); }

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, const std::string& where, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for '" + (where.empty() ? std::string(key) : where + "." + key) + "'");
  }
}

inline std::string join_key(const std::string& where, const char* key) {
  return where.empty() ? std::string(key) : where + "." + key;
}

inline void read_sizes(const nlohmann::json& j, const char* key, const std::string& where, int m,
                       std::vector<int>& out) {
  if (!j.contains(key)) {
    if (static_cast<int>(out.size()) != m) out.assign(static_cast<std::size_t>(m), out.empty() ? 0 : out.front());
    return;
  }
  const auto& v = j.at(key);
  if (v.is_number_integer()) {
    out.assign(static_cast<std::size_t>(m), v.get<int>());
  } else if (v.is_array()) {
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError("invalid value for '" + join_key(where, key) + "'");
      out.push_back(e.get<int>());
    }
  } else {
    throw ConfigError("invalid value for '" + join_key(where, key) + "'");
  }
}

inline CovarianceSpec read_cov(const nlohmann::json& j, const std::string& where, CovarianceSpec c) {
  check_keys(j, where, {"blocks", "block_size", "rho"});
  read_field(j, "blocks", where, c.blocks);
  read_field(j, "block_size", where, c.block_size);
  read_field(j, "rho", where, c.rho);
  return c;
}

}  // namespace detail

inline nlohmann::json to_json(const SimConfig& c) {
  auto cov = [](const CovarianceSpec& s) {
    return nlohmann::json{{"blocks", s.blocks}, {"block_size", s.block_size}, {"rho", s.rho}};
  };
  return {{"M", c.M},
          {"n_target", c.n_target},
          {"n_source", c.n_source},
          {"p", c.p},
          {"s", c.s},
          {"h", c.h},
          {"delta", c.delta},
          {"setting", to_string(c.setting)},
          {"delta_is_variance", c.delta_is_variance},
          {"target_cov", cov(c.target_cov)},
          {"source_cov", cov(c.source_cov)},
          {"family", to_string(c.family)},
          {"noise_sd", c.noise_sd},
          {"seed", c.seed},
          {"test_size", c.test_size},
          {"leading_site", c.leading_site},
          {"validation_fraction", c.validation_fraction},
          {"standardize", c.standardize}};
}

/// Strict parse over `base`: unknown keys and ill-typed values throw
/// ConfigError naming the field. Does not validate ranges.
inline SimConfig sim_config_from_json(const nlohmann::json& j, const std::string& where = "",
                                      SimConfig base = SimConfig::desk()) {
  detail::check_keys(j, where,
                     {"preset", "M", "n_target", "n_source", "p", "s", "h", "delta", "setting", "delta_is_variance",
                      "target_cov", "source_cov", "family", "noise_sd", "seed", "test_size", "leading_site",
                      "validation_fraction", "standardize"});
  SimConfig c = base;
  if (j.contains("preset")) {
    const auto preset = j.at("preset");
    if (preset == "desk")
      c = SimConfig::desk();
    else if (preset == "paper")
      c = SimConfig::paper();
    else
      throw ConfigError("invalid value for '" + detail::join_key(where, "preset") + "' (expected desk or paper)");
  }
  detail::read_field(j, "M", where, c.M);
  detail::read_sizes(j, "n_target", where, c.M, c.n_target);
  detail::read_sizes(j, "n_source", where, c.M, c.n_source);
  detail::read_field(j, "p", where, c.p);
  detail::read_field(j, "s", where, c.s);
  detail::read_field(j, "h", where, c.h);
  detail::read_field(j, "delta", where, c.delta);
  if (j.contains("setting")) {
    std::string s;
    detail::read_field(j, "setting", where, s);
    if (s == "S1")
      c.setting = Setting::S1;
    else if (s == "S2")
      c.setting = Setting::S2;
    else
      throw ConfigError("invalid value for '" + detail::join_key(where, "setting") + "' (expected S1 or S2)");
  }
  detail::read_field(j, "delta_is_variance", where, c.delta_is_variance);
  if (j.contains("target_cov"))
    c.target_cov = detail::read_cov(j.at("target_cov"), detail::join_key(where, "target_cov"), c.target_cov);
  if (j.contains("source_cov"))
    c.source_cov = detail::read_cov(j.at("source_cov"), detail::join_key(where, "source_cov"), c.source_cov);
  if (j.contains("family")) {
    std::string f;
    detail::read_field(j, "family", where, f);
    try {
      c.family = family_from_string(f);
    } catch (const std::exception&) {
      throw ConfigError("invalid value for '" + detail::join_key(where, "family") + "'");
    }
  }
  detail::read_field(j, "noise_sd", where, c.noise_sd);
  detail::read_field(j, "seed", where, c.seed);
  detail::read_field(j, "test_size", where, c.test_size);
  detail::read_field(j, "leading_site", where, c.leading_site);
  detail::read_field(j, "validation_fraction", where, c.validation_fraction);
  detail::read_field(j, "standardize", where, c.standardize);
  return c;
}

// ---------------------------------------------------------------------------
// Scenario directory
//
//   cell_<m>_<k>.bin, validation.bin, test.bin : u32 n, u32 cols, then n x cols
//       little-endian float64 row-major; the last column is the outcome
//   beta.bin, w.bin, mafs.bin : little-endian float64 arrays
//   manifest.json : config, seeds, H, file list

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(std::istream& is, const std::string& file) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DecodeError(file, "truncated header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline double get_f64(std::istream& is, const std::string& file) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DecodeError(file, "truncated payload");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

inline void write_cell(const std::filesystem::path& path, const Cell& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot write " + path.string());
  put_u32(os, static_cast<std::uint32_t>(c.x.rows()));
  put_u32(os, static_cast<std::uint32_t>(c.x.cols() + 1));
  for (Index i = 0; i < c.x.rows(); ++i) {
    for (Index j = 0; j < c.x.cols(); ++j) put_f64(os, c.x(i, j));
    put_f64(os, c.y(i));
  }
}

inline Cell read_cell(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const auto name = path.filename().string();
  if (!is) throw DecodeError(name, "cannot open");
  const auto n = get_u32(is, name);
  const auto cols = get_u32(is, name);
  if (cols < 1) throw DecodeError(name, "column count must be >= 1");
  Cell c{Matrix(n, cols - 1), Vector(n)};
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j + 1 < cols; ++j) c.x(i, j) = get_f64(is, name);
    c.y(i) = get_f64(is, name);
  }
  return c;
}

inline void write_array(const std::filesystem::path& path, const Vector& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot write " + path.string());
  for (Index j = 0; j < v.size(); ++j) put_f64(os, v(j));
}

inline Vector read_array(const std::filesystem::path& path, Index p) {
  std::ifstream is(path, std::ios::binary);
  const auto name = path.filename().string();
  if (!is) throw DecodeError(name, "cannot open");
  Vector v(p);
  for (Index j = 0; j < p; ++j) v(j) = get_f64(is, name);
  return v;
}

inline std::string cell_file(int m, int k) { return "cell_" + std::to_string(m) + "_" + std::to_string(k) + ".bin"; }

}  // namespace detail

inline void write_scenario(const std::filesystem::path& dir, const RawScenario& raw) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (const auto& [key, cell] : raw.cells) {
    const auto name = detail::cell_file(key.first, key.second);
    detail::write_cell(dir / name, cell);
    files.push_back(name);
  }
  detail::write_cell(dir / "validation.bin", raw.validation);
  detail::write_cell(dir / "test.bin", raw.test);
  detail::write_array(dir / "beta.bin", raw.truth.beta);
  detail::write_array(dir / "w.bin", raw.truth.w);
  detail::write_array(dir / "mafs.bin", raw.truth.mafs);
  for (const char* f : {"validation.bin", "test.bin", "beta.bin", "w.bin", "mafs.bin"}) files.push_back(f);

  const auto root = raw.config.seed;
  nlohmann::json seeds{{"root", root},
                       {"coefficients", derive_seed(root, 0, 0, Stream::coefficients)},
                       {"mafs", derive_seed(root, 0, 0, Stream::mafs)}};
  for (const auto& [key, _] : raw.cells) {
    const auto tag = std::to_string(key.first) + "_" + std::to_string(key.second);
    seeds["genotypes_" + tag] = derive_seed(root, key.first, key.second, Stream::genotypes);
    seeds["outcomes_" + tag] = derive_seed(root, key.first, key.second, Stream::outcomes);
  }
  nlohmann::json h = nlohmann::json::array();
  for (Index j : raw.truth.H) h.push_back(j);
  const nlohmann::json manifest{{"format", "fedtl-scenario"}, {"version", 1},       {"config", to_json(raw.config)},
                                {"seeds", seeds},             {"H", h},             {"files", files}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline RawScenario read_scenario(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigError("scenario directory has no manifest.json: " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario manifest is not valid JSON: ") + e.what());
  }
  RawScenario raw;
  raw.config = sim_config_from_json(manifest.at("config"), "config");
  raw.config.validate();
  const Index p = raw.config.p;
  for (int m = 1; m <= raw.config.M; ++m)
    for (int k = 0; k <= 1; ++k) {
      auto c = detail::read_cell(dir / detail::cell_file(m, k));
      if (c.x.cols() != p) throw DecodeError(detail::cell_file(m, k), "column count does not match p");
      raw.cells[{m, k}] = std::move(c);
    }
  raw.validation = detail::read_cell(dir / "validation.bin");
  raw.test = detail::read_cell(dir / "test.bin");
  raw.truth.beta = detail::read_array(dir / "beta.bin", p);
  raw.truth.w = detail::read_array(dir / "w.bin", p);
  raw.truth.mafs = detail::read_array(dir / "mafs.bin", p);
  for (const auto& j : manifest.at("H")) raw.truth.H.push_back(j.get<Index>());
  return raw;
}

}  // namespace fedtl
