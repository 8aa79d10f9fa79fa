#pragma once

// Monte Carlo size/power study: S datasets per grid cell, a bootstrap test
// per dataset, rejection rates and KS distance of the p-values from U(0, 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "varcomp/bootstrap.hpp"
#include "varcomp/designs.hpp"
#include "varcomp/parallel.hpp"
#include "varcomp/rng.hpp"

namespace varcomp {

enum class DesignFamily { Nested, Crossed };

inline const char* to_string(DesignFamily f) { return f == DesignFamily::Nested ? "nested" : "crossed"; }

struct SizeParams {
  Index m = 0;
  Index n = 0;
  Index r = 1;        // replications (nested; balanced crossed)
  double rho = 0.0;   // copula correlation (unbalanced crossed)
};

struct CellParams {
  Index id = 0;
  DesignFamily family = DesignFamily::Nested;
  bool balanced = true;
  SizeParams size;
  VarComponents tau;

  /// Heavily unbalanced crossed designs, where the bootstrap is known to miss nominal size.
  bool size_distortion_regime() const {
    return family == DesignFamily::Crossed && !balanced && size.rho >= 0.5;
  }
};

struct ExperimentGrid {
  DesignFamily family = DesignFamily::Nested;
  bool balanced = true;
  std::vector<SizeParams> sizes;
  std::vector<VarComponents> tau_grid;
  Index s = 200;
  Index b = 99;
  ContrastSpec contrast{Matrix{{1.0, -1.0}}};
  std::uint64_t seed = 1;
  Statistic statistic = Statistic::LikelihoodRatio;
  double sigma2 = 1.0;

  std::vector<CellParams> cells() const {
    std::vector<CellParams> out;
    for (const auto& size : sizes) {
      for (const auto& tau : tau_grid) {
        CellParams c;
        c.id = static_cast<Index>(out.size());
        c.family = family;
        c.balanced = balanced;
        c.size = size;
        c.tau = tau;
        out.push_back(std::move(c));
      }
    }
    return out;
  }
};

struct CellResult {
  CellParams params;
  Index s = 0;
  Index b = 0;
  std::vector<double> pvalues_two;
  std::vector<double> pvalues_one;
  double reject_rate_05 = 0.0;
  std::optional<double> reject_rate_05_one;
  double mc_se = 0.0;
  double ks_stat = 0.0;
  double mean_tau_common = 0.0;
  Index n_failed = 0;
};

inline constexpr int kKsGridPoints = 1000;

/// sup over t in {0, 1/1000, ..., 1} of |F_hat(t) - t|.
inline double ks_uniform(std::vector<double> pvals) {
  detail::require(!pvals.empty(), "ks_uniform needs at least one value");
  std::sort(pvals.begin(), pvals.end());
  const double s = static_cast<double>(pvals.size());
  double worst = 0.0;
  for (int i = 0; i <= kKsGridPoints; ++i) {
    const double t = static_cast<double>(i) / kKsGridPoints;
    const auto below = std::upper_bound(pvals.begin(), pvals.end(), t) - pvals.begin();
    worst = std::max(worst, std::abs(static_cast<double>(below) / s - t));
  }
  return worst;
}

namespace detail {

inline DesignMatrices cell_design(const CellParams& cell, Engine& rng) {
  const auto& sz = cell.size;
  if (cell.family == DesignFamily::Nested) {
    const NestedLayout layout =
        cell.balanced ? NestedLayout::balanced(sz.m, sz.n, sz.r) : gen_unbalanced_nested(sz.m, sz.n, sz.r, rng);
    return nested_design(layout);
  }
  const CrossedLayout layout = cell.balanced ? CrossedLayout::balanced(sz.m, sz.n, sz.r)
                                             : gen_unbalanced_crossed(sz.m, sz.n, sz.rho, sz.m * sz.n, rng);
  return crossed_design(layout);
}

}  // namespace detail

struct CellOptions {
  Index s = 200;
  Index b = 99;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  Statistic statistic = Statistic::LikelihoodRatio;
  double sigma2 = 1.0;
  NewtonOptions newton;
};

inline CellResult run_cell(const CellParams& cell, const ContrastSpec& contrast, const CellOptions& opts) {
  detail::require(opts.s >= 1 && opts.b >= 1, "run_cell needs s >= 1 and b >= 1");
  const std::uint64_t cell_seed = derive_seed(opts.seed, static_cast<std::uint64_t>(cell.id));

  // Balanced layouts are fixed, so their factorizations are shared by all replicates.
  std::optional<TestContext> shared;
  if (cell.balanced) {
    Engine unused = make_stream(cell_seed, {0});
    shared.emplace(detail::cell_design(cell, unused), contrast);
  }

  struct Outcome {
    bool ok = false;
    double p_two = 0.0;
    std::optional<double> p_one;
    double common = 0.0;
  };
  std::vector<Outcome> outcomes(static_cast<std::size_t>(opts.s));

  parallel_for(static_cast<std::size_t>(opts.s), opts.workers, [&](std::size_t i) {
    const auto rep = static_cast<std::uint64_t>(i);
    try {
      Engine layout_rng = make_stream(cell_seed, {rep, 0});
      std::optional<TestContext> local;
      if (!shared) local.emplace(detail::cell_design(cell, layout_rng), contrast);
      const TestContext& ctx = shared ? *shared : *local;

      SimulationConfig sim;
      sim.beta = Vector::Zero(ctx.design->p());
      sim.sigma2 = opts.sigma2;
      sim.tau = cell.tau;
      Engine response_rng = make_stream(cell_seed, {rep, 1});
      const Vector y = simulate_response(*ctx.design, sim, response_rng);

      BootstrapOptions bopts;
      bopts.b = opts.b;
      bopts.seed = derive_seed(cell_seed, rep);
      bopts.statistic = opts.statistic;
      bopts.newton = opts.newton;
      const TestResult tr = bootstrap_test(ctx, y, bopts);

      Outcome& o = outcomes[i];
      o.p_two = tr.p_two;
      o.p_one = tr.p_one;
      const Vector proj = ctx.rotation.q2 * (ctx.rotation.q2.transpose() * tr.fit.tau_hat);
      o.common = proj.size() ? proj.mean() : 0.0;
      o.ok = true;
    } catch (const Error&) {
      outcomes[i].ok = false;
    }
  });

  CellResult res;
  res.params = cell;
  res.s = opts.s;
  res.b = opts.b;
  Index reject = 0;
  Index reject_one = 0;
  double common = 0.0;
  for (const auto& o : outcomes) {
    if (!o.ok) {
      ++res.n_failed;
      continue;
    }
    res.pvalues_two.push_back(o.p_two);
    reject += o.p_two <= 0.05 ? 1 : 0;
    if (o.p_one) {
      res.pvalues_one.push_back(*o.p_one);
      reject_one += *o.p_one <= 0.05 ? 1 : 0;
    }
    common += o.common;
  }
  const auto done = static_cast<double>(res.pvalues_two.size());
  if (done > 0) {
    res.reject_rate_05 = static_cast<double>(reject) / done;
    res.mc_se = std::sqrt(res.reject_rate_05 * (1.0 - res.reject_rate_05) / done);
    res.ks_stat = ks_uniform(res.pvalues_two);
    res.mean_tau_common = common / done;
    if (!res.pvalues_one.empty()) {
      res.reject_rate_05_one = static_cast<double>(reject_one) / static_cast<double>(res.pvalues_one.size());
    }
  } else {
    res.ks_stat = 1.0;
  }
  return res;
}

inline const char* kCsvHeader =
    "family,m,n,r_or_rho,tau1,tau2,s,b,reject05_two,reject05_one,mcse,ks_two,mean_common_tau,n_failed";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

inline std::string csv_row(const CellResult& r) {
  using detail::fmt_double;
  const auto& c = r.params;
  const bool use_rho = c.family == DesignFamily::Crossed && !c.balanced;
  std::string row = std::string(to_string(c.family)) + "," + std::to_string(c.size.m) + "," +
                    std::to_string(c.size.n) + "," +
                    (use_rho ? fmt_double(c.size.rho) : std::to_string(c.size.r)) + "," +
                    fmt_double(c.tau.size() > 0 ? c.tau(0) : 0.0) + "," +
                    fmt_double(c.tau.size() > 1 ? c.tau(1) : 0.0) + "," + std::to_string(r.s) + "," +
                    std::to_string(r.b) + "," + fmt_double(r.reject_rate_05) + "," +
                    (r.reject_rate_05_one ? fmt_double(*r.reject_rate_05_one) : std::string()) + "," +
                    fmt_double(r.mc_se) + "," + fmt_double(r.ks_stat) + "," + fmt_double(r.mean_tau_common) + "," +
                    std::to_string(r.n_failed);
  return row;
}

/// Runs every cell of the grid; rows go to `csv` in grid order. Outer
/// replicates are spread over `workers` threads.
inline std::vector<CellResult> power_table(const ExperimentGrid& grid, unsigned workers, std::ostream* csv = nullptr) {
  std::vector<CellResult> out;
  if (csv) *csv << kCsvHeader << "\n";
  CellOptions opts;
  opts.s = grid.s;
  opts.b = grid.b;
  opts.seed = grid.seed;
  opts.workers = workers;
  opts.statistic = grid.statistic;
  opts.sigma2 = grid.sigma2;
  for (const auto& cell : grid.cells()) {
    CellResult r;
    try {
      r = run_cell(cell, grid.contrast, opts);
    } catch (const Error&) {
      r.params = cell;
      r.s = grid.s;
      r.b = grid.b;
      r.n_failed = grid.s;
      r.ks_stat = 1.0;
    }
    if (csv) *csv << csv_row(r) << "\n";
    out.push_back(std::move(r));
  }
  return out;
}

// Manifest (de)serialization.

namespace detail {

inline Side parse_side(const std::string& s) {
  if (s == "greater") return Side::Greater;
  if (s == "less") return Side::Less;
  if (s == "free" || s == "two-sided") return Side::Free;
  throw Error(ErrorKind::InvalidInput, "unknown alternative '" + s + "'");
}

inline const char* side_name(Side s) {
  switch (s) {
    case Side::Greater: return "greater";
    case Side::Less: return "less";
    case Side::Free: return "free";
  }
  return "free";
}

}  // namespace detail

inline ExperimentGrid grid_from_json(const nlohmann::json& j) {
  try {
    ExperimentGrid g;
    const std::string family = j.value("family", "nested");
    if (family == "nested") g.family = DesignFamily::Nested;
    else if (family == "crossed") g.family = DesignFamily::Crossed;
    else throw Error(ErrorKind::InvalidInput, "unknown design family '" + family + "'");
    g.balanced = j.value("balanced", true);
    for (const auto& sz : j.at("sizes")) {
      SizeParams p;
      p.m = sz.at("m").get<Index>();
      p.n = sz.at("n").get<Index>();
      p.r = sz.value("r", Index{1});
      p.rho = sz.value("rho", 0.0);
      detail::require(p.m >= 1 && p.n >= 1 && p.r >= 1, "grid sizes must be positive");
      g.sizes.push_back(p);
    }
    for (const auto& t : j.at("tau_grid")) {
      const auto v = t.get<std::vector<double>>();
      detail::require(v.size() == 2, "tau_grid entries must have two components");
      g.tau_grid.push_back(Eigen::Map<const Vector>(v.data(), 2));
    }
    g.s = j.value("s", Index{200});
    g.b = j.value("b", Index{99});
    detail::require(g.s >= 1 && g.b >= 1, "s and b must be positive");
    g.seed = j.value("seed", std::uint64_t{1});
    g.sigma2 = j.value("sigma2", 1.0);
    const std::string stat = j.value("statistic", "lr");
    if (stat == "lr") g.statistic = Statistic::LikelihoodRatio;
    else if (stat == "raw-minimum") g.statistic = Statistic::RawMinimum;
    else throw Error(ErrorKind::InvalidInput, "unknown statistic '" + stat + "'");
    if (j.contains("contrast")) {
      const auto& c = j.at("contrast");
      const auto rows = c.at("a").get<std::vector<std::vector<double>>>();
      detail::require(!rows.empty(), "contrast needs at least one row");
      Matrix a(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        detail::require(rows[i].size() == rows[0].size(), "ragged contrast matrix");
        for (std::size_t k = 0; k < rows[i].size(); ++k) a(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
      }
      std::optional<std::vector<Side>> cone;
      if (c.contains("alternative")) {
        const auto alts = c.at("alternative").get<std::vector<std::string>>();
        const bool two = alts.empty() || (alts.size() == 1 && alts[0] == "two-sided");
        if (!two) {
          cone.emplace();
          for (const auto& s : alts) cone->push_back(detail::parse_side(s));
        }
      }
      g.contrast = ContrastSpec(std::move(a), std::move(cone));
    }
    detail::require(g.contrast.d() == 2, "simulation designs have two components");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed manifest: ") + e.what());
  }
}

/// Manifest with every default resolved.
inline nlohmann::json grid_to_json(const ExperimentGrid& g) {
  nlohmann::json j;
  j["family"] = to_string(g.family);
  j["balanced"] = g.balanced;
  j["sizes"] = nlohmann::json::array();
  for (const auto& s : g.sizes) j["sizes"].push_back({{"m", s.m}, {"n", s.n}, {"r", s.r}, {"rho", s.rho}});
  j["tau_grid"] = nlohmann::json::array();
  for (const auto& t : g.tau_grid) j["tau_grid"].push_back(std::vector<double>(t.data(), t.data() + t.size()));
  j["s"] = g.s;
  j["b"] = g.b;
  j["seed"] = g.seed;
  j["sigma2"] = g.sigma2;
  j["statistic"] = to_string(g.statistic);
  nlohmann::json a = nlohmann::json::array();
  for (Index i = 0; i < g.contrast.a.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(g.contrast.a.cols()));
    for (Index k = 0; k < g.contrast.a.cols(); ++k) row[static_cast<std::size_t>(k)] = g.contrast.a(i, k);
    a.push_back(row);
  }
  nlohmann::json alts = nlohmann::json::array();
  if (g.contrast.two_sided()) alts.push_back("two-sided");
  else for (Side s : *g.contrast.cone) alts.push_back(detail::side_name(s));
  j["contrast"] = {{"a", a}, {"alternative", alts}};
  nlohmann::json flagged = nlohmann::json::array();
  for (const auto& c : g.cells()) if (c.size_distortion_regime()) flagged.push_back(c.id);
  j["size_distortion_cells"] = flagged;
  return j;
}

}  // namespace varcomp
