#pragma once

// Nested and crossed random-effect layouts, their design matrices, the
// imbalance generators used by the simulation harness, and response
// simulation.

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "varcomp/bootstrap.hpp"
#include "varcomp/decomp.hpp"
#include "varcomp/likelihood.hpp"
#include "varcomp/model.hpp"
#include "varcomp/rng.hpp"

namespace varcomp {

/// m blocks; block i has group_sizes[i] plots; plot j of block i has
/// rep_counts[i][j] observations.
struct NestedLayout {
  Index m = 0;
  std::vector<Index> group_sizes;
  std::vector<std::vector<Index>> rep_counts;

  Index n_obs() const {
    Index total = 0;
    for (const auto& block : rep_counts)
      for (Index r : block) total += r;
    return total;
  }
  Index n_plots() const {
    Index total = 0;
    for (Index g : group_sizes) total += g;
    return total;
  }

  static NestedLayout balanced(Index m, Index n, Index r) {
    NestedLayout l;
    l.m = m;
    l.group_sizes.assign(static_cast<std::size_t>(m), n);
    l.rep_counts.assign(static_cast<std::size_t>(m), std::vector<Index>(static_cast<std::size_t>(n), r));
    return l;
  }
};

/// Levels are 0-based: first factor in [0, m), second in [0, n). Each pair is one observation.
struct CrossedLayout {
  Index m = 0;
  Index n = 0;
  std::vector<std::pair<Index, Index>> pairs;

  Index n_obs() const { return static_cast<Index>(pairs.size()); }

  static CrossedLayout balanced(Index m, Index n, Index r = 1) {
    CrossedLayout l;
    l.m = m;
    l.n = n;
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j)
        for (Index k = 0; k < r; ++k) l.pairs.emplace_back(i, j);
    return l;
  }
};

/// Fixed-effect specification: intercept only, or a supplied N x p matrix.
struct XSpec {
  std::optional<Matrix> x;

  Matrix build(Index n) const {
    if (!x) return Matrix::Ones(n, 1);
    detail::require(x->rows() == n, "supplied fixed-effect matrix has wrong number of rows");
    return *x;
  }
};

inline void validate(const NestedLayout& l) {
  detail::require(l.m >= 1, "nested layout needs at least one block");
  detail::require(static_cast<Index>(l.group_sizes.size()) == l.m &&
                      static_cast<Index>(l.rep_counts.size()) == l.m,
                  "nested layout: one entry per block");
  for (Index i = 0; i < l.m; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    detail::require(l.group_sizes[ii] >= 1, "nested layout: block with no plots");
    detail::require(static_cast<Index>(l.rep_counts[ii].size()) == l.group_sizes[ii],
                    "nested layout: one replication count per plot");
    for (Index r : l.rep_counts[ii]) detail::require(r >= 1, "nested layout: empty plot");
  }
}

inline void validate(const CrossedLayout& l) {
  detail::require(l.m >= 1 && l.n >= 1, "crossed layout needs at least one level per factor");
  std::vector<bool> seen_a(static_cast<std::size_t>(l.m)), seen_b(static_cast<std::size_t>(l.n));
  for (auto [i, j] : l.pairs) {
    detail::require(i >= 0 && i < l.m && j >= 0 && j < l.n, "crossed layout: level out of range");
    seen_a[static_cast<std::size_t>(i)] = true;
    seen_b[static_cast<std::size_t>(j)] = true;
  }
  for (bool s : seen_a) detail::require(s, "crossed layout: a level of the first factor has no observations");
  for (bool s : seen_b) detail::require(s, "crossed layout: a level of the second factor has no observations");
}

inline DesignMatrices nested_design(const NestedLayout& layout, const XSpec& x_spec = {},
                                    std::vector<std::string> names = {"block", "plot"}) {
  validate(layout);
  const Index n = layout.n_obs();
  Matrix z1 = Matrix::Zero(n, layout.m);
  Matrix z2 = Matrix::Zero(n, layout.n_plots());
  Index row = 0;
  Index plot = 0;
  for (Index i = 0; i < layout.m; ++i) {
    for (Index r : layout.rep_counts[static_cast<std::size_t>(i)]) {
      for (Index k = 0; k < r; ++k, ++row) {
        z1(row, i) = 1.0;
        z2(row, plot) = 1.0;
      }
      ++plot;
    }
  }
  return DesignMatrices(x_spec.build(n), {std::move(z1), std::move(z2)}, std::move(names));
}

inline DesignMatrices crossed_design(const CrossedLayout& layout, const XSpec& x_spec = {},
                                     std::vector<std::string> names = {"row", "column"}) {
  validate(layout);
  const Index n = layout.n_obs();
  Matrix z1 = Matrix::Zero(n, layout.m);
  Matrix z2 = Matrix::Zero(n, layout.n);
  for (Index row = 0; row < n; ++row) {
    const auto [i, j] = layout.pairs[static_cast<std::size_t>(row)];
    z1(row, i) = 1.0;
    z2(row, j) = 1.0;
  }
  return DesignMatrices(x_spec.build(n), {std::move(z1), std::move(z2)}, std::move(names));
}

enum class ReplicationScheme { PerPlot, PerBlock };

/// n_i ~ U{2, ..., 2n-2}; replication counts ~ U{2, ..., 2r-2} drawn once per
/// plot (or once per block), so the minimum is 2 and the mean is n (resp. r).
inline NestedLayout gen_unbalanced_nested(Index m, Index n, Index r, Engine& rng,
                                          ReplicationScheme scheme = ReplicationScheme::PerPlot) {
  detail::require(m >= 1 && n >= 2 && r >= 2, "unbalanced nested generator needs m >= 1, n >= 2, r >= 2");
  std::uniform_int_distribution<Index> plots(2, 2 * n - 2);
  std::uniform_int_distribution<Index> reps(2, 2 * r - 2);
  NestedLayout l;
  l.m = m;
  for (Index i = 0; i < m; ++i) {
    const Index ni = plots(rng);
    l.group_sizes.push_back(ni);
    std::vector<Index> counts(static_cast<std::size_t>(ni));
    const Index block_reps = scheme == ReplicationScheme::PerBlock ? reps(rng) : 0;
    for (auto& c : counts) c = scheme == ReplicationScheme::PerBlock ? block_reps : reps(rng);
    l.rep_counts.push_back(std::move(counts));
  }
  return l;
}

inline constexpr int kCrossedMaxRetries = 100;

/// Gaussian-copula crossed layout: n_total draws of (z1, z2) with correlation
/// rho, each marginal mapped to a discrete uniform level. Redraws (up to 100
/// times) when a level is left empty. With `balanced` and n_total = m n the
/// full factorial is returned without sampling.
inline CrossedLayout gen_unbalanced_crossed(Index m, Index n, double rho, Index n_total, Engine& rng,
                                            bool balanced = false) {
  detail::require(m >= 1 && n >= 1, "crossed generator needs m, n >= 1");
  detail::require(rho >= 0.0 && rho < 1.0, "crossed generator needs 0 <= rho < 1");
  detail::require(n_total >= 1, "crossed generator needs n_total >= 1");
  if (balanced && n_total == m * n) return CrossedLayout::balanced(m, n);

  auto level = [](double z, Index levels) {
    const double u = 0.5 * std::erfc(-z / std::sqrt(2.0));
    return std::min<Index>(static_cast<Index>(std::floor(u * static_cast<double>(levels))), levels - 1);
  };
  const double tail = std::sqrt(1.0 - rho * rho);
  for (int attempt = 0; attempt < kCrossedMaxRetries; ++attempt) {
    std::normal_distribution<double> dist(0.0, 1.0);
    CrossedLayout l;
    l.m = m;
    l.n = n;
    std::vector<bool> seen_a(static_cast<std::size_t>(m)), seen_b(static_cast<std::size_t>(n));
    for (Index s = 0; s < n_total; ++s) {
      const double z1 = dist(rng);
      const double z2 = rho * z1 + tail * dist(rng);
      const Index i = level(z1, m);
      const Index j = level(z2, n);
      seen_a[static_cast<std::size_t>(i)] = true;
      seen_b[static_cast<std::size_t>(j)] = true;
      l.pairs.emplace_back(i, j);
    }
    bool complete = true;
    for (bool v : seen_a) complete = complete && v;
    for (bool v : seen_b) complete = complete && v;
    if (complete) return l;
  }
  throw Error(ErrorKind::InvalidInput, "crossed generator left a level empty after " +
                                           std::to_string(kCrossedMaxRetries) + " attempts");
}

struct SimulationConfig {
  Vector beta;
  double sigma2 = 1.0;
  VarComponents tau;
};

/// y = X beta + sigma P_Z (L(tau) w_{1:m} ; w_{m+1:N}), valid for any tau in
/// the parameter space including negative components.
inline Vector simulate_response(const DesignCache& dc, const SimulationConfig& config, Engine& rng) {
  detail::require(config.sigma2 > 0.0, "simulation needs sigma2 > 0");
  detail::require(config.beta.size() == dc.p(), "beta has wrong dimension");
  const auto l = build_covariance_factor(dc.z(), config.tau);
  if (!l) throw Error(ErrorKind::InvalidInput, "simulation tau is outside the parameter space");
  return dc.design().x() * config.beta + std::sqrt(config.sigma2) * sample_null_response(dc, *l, rng);
}

inline Vector simulate_response(const DesignMatrices& design, const SimulationConfig& config, Engine& rng) {
  return simulate_response(DesignCache(design), config, rng);
}

/// Latent random-effects construction; requires all tau_j >= 0.
inline Vector simulate_response_latent(const DesignMatrices& design, const SimulationConfig& config, Engine& rng) {
  detail::require((config.tau.array() >= 0.0).all(), "latent construction needs non-negative tau");
  const double sigma = std::sqrt(config.sigma2);
  Vector y = design.x() * config.beta + sigma * standard_normal(rng, design.n());
  for (Index j = 0; j < design.d(); ++j) {
    y += sigma * std::sqrt(config.tau(j)) * (design.z(j) * standard_normal(rng, design.block_size(j)));
  }
  return y;
}

// JSON (de)serialization of layouts.

inline void to_json(nlohmann::json& j, const NestedLayout& l) {
  j = nlohmann::json{{"type", "nested"}, {"m", l.m}, {"group_sizes", l.group_sizes}, {"rep_counts", l.rep_counts}};
}

inline void from_json(const nlohmann::json& j, NestedLayout& l) {
  j.at("m").get_to(l.m);
  j.at("group_sizes").get_to(l.group_sizes);
  j.at("rep_counts").get_to(l.rep_counts);
  validate(l);
}

inline void to_json(nlohmann::json& j, const CrossedLayout& l) {
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [a, b] : l.pairs) pairs.push_back({a, b});
  j = nlohmann::json{{"type", "crossed"}, {"m", l.m}, {"n", l.n}, {"pairs", pairs}};
}

inline void from_json(const nlohmann::json& j, CrossedLayout& l) {
  j.at("m").get_to(l.m);
  j.at("n").get_to(l.n);
  l.pairs.clear();
  for (const auto& p : j.at("pairs")) l.pairs.emplace_back(p.at(0).get<Index>(), p.at(1).get<Index>());
  validate(l);
}

}  // namespace varcomp
