#pragma once

// Parametric bootstrap test of H0: A tau = 0. Null responses are drawn as
//   omega* = P_Z (L(tau0) omega_{1:m} ; omega_{m+1:N}),  omega ~ N(0, I_N),
// which has covariance Sigma(tau0) and costs one triangular product and one
// Householder application per draw.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "varcomp/decomp.hpp"
#include "varcomp/likelihood.hpp"
#include "varcomp/model.hpp"
#include "varcomp/optimizer.hpp"
#include "varcomp/parallel.hpp"
#include "varcomp/rng.hpp"

namespace varcomp {

enum class Statistic {
  LikelihoodRatio,  // lambda = L(tau0_hat) - L(tau_hat), compared with its bootstrap analogue
  RawMinimum,       // L(tau_hat*) compared with L(tau_hat)
};

inline const char* to_string(Statistic s) {
  return s == Statistic::LikelihoodRatio ? "lr" : "raw-minimum";
}

struct BootstrapOptions {
  Index b = 1000;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  Statistic statistic = Statistic::LikelihoodRatio;
  bool plus_one = false;  // (1 + count) / (B + 1) instead of count / B
  double max_failure_rate = 0.01;
  NewtonOptions newton;
};

struct BootstrapDraw {
  VarComponents tau_star;
  VarComponents tau_null_star;
  double objective_star = 0.0;  // L*(tau_hat*)
  double lambda_star = 0.0;     // L*(tau0_hat*) - L*(tau_hat*)
  bool ok = false;
};

struct TestResult {
  FitResult fit;
  FitResult null_fit;
  double lr_obs = 0.0;
  std::vector<BootstrapDraw> draws;
  double p_two = 0.0;
  double mc_se_two = 0.0;
  std::optional<double> p_one;
  std::optional<double> mc_se_one;
  Index b = 0;
  Index b_effective = 0;
  Index n_failed = 0;
  std::uint64_t seed = 0;
  Statistic statistic = Statistic::LikelihoodRatio;
};

/// omega* ~ N(0, Sigma(tau)) in ambient coordinates, where l = L(tau).
inline Vector sample_null_response(const DesignCache& dc, const CholFactor& l, Engine& rng) {
  const Index k = dc.k();
  Vector w = standard_normal(rng, dc.n());
  w.head(k) = l.lower.triangularView<Eigen::Lower>() * w.head(k);
  return dc.z().qr().apply_q(w);
}

/// z* = U_X' omega*, distributed N(0, U_X' Sigma(tau) U_X).
inline Vector sample_null_unnormalized(const DesignCache& dc, const CholFactor& l, Engine& rng) {
  return dc.residual(sample_null_response(dc, l, rng));
}

/// q* = z* / |z*|.
inline Vector sample_null_residual(const DesignCache& dc, const CholFactor& l, Engine& rng) {
  Vector z = sample_null_unnormalized(dc, l, rng);
  return z / z.norm();
}

struct PValues {
  double p_two = 0.0;
  std::optional<double> p_one;
  Index b_effective = 0;
};

/// Counts exceedances over successful draws.
inline PValues bootstrap_pvalues(const std::vector<BootstrapDraw>& draws, double observed, const ContrastSpec& contrast,
                                 Statistic statistic, bool plus_one = false) {
  Index total = 0;
  Index two = 0;
  Index one = 0;
  for (const auto& dr : draws) {
    if (!dr.ok) continue;
    ++total;
    const double stat = statistic == Statistic::LikelihoodRatio ? dr.lambda_star : dr.objective_star;
    if (stat >= observed) {
      ++two;
      if (contrast.in_cone(dr.tau_star)) ++one;
    }
  }
  PValues out;
  out.b_effective = total;
  const double denom = static_cast<double>(total) + (plus_one ? 1.0 : 0.0);
  const double add = plus_one ? 1.0 : 0.0;
  out.p_two = denom > 0 ? (static_cast<double>(two) + add) / denom : 1.0;
  if (!contrast.two_sided()) out.p_one = denom > 0 ? (static_cast<double>(one) + add) / denom : 1.0;
  return out;
}

inline double monte_carlo_se(double p, Index b) {
  return b > 0 ? std::sqrt(p * (1.0 - p) / static_cast<double>(b)) : 0.0;
}

/// Everything a bootstrap needs that depends only on the design and contrast.
struct TestContext {
  std::shared_ptr<const DesignCache> design;
  std::shared_ptr<const MomSystem> mom;
  ContrastSpec contrast;
  Rotation rotation;

  TestContext(const DesignMatrices& dm, ContrastSpec c)
      : design(std::make_shared<const DesignCache>(dm)),
        mom(std::make_shared<const MomSystem>(dm)),
        contrast(std::move(c)) {
    if (contrast.d() != dm.d()) {
      throw Error(ErrorKind::InvalidInput, "contrast has " + std::to_string(contrast.d()) +
                                               " columns but the model has " + std::to_string(dm.d()) +
                                               " components");
    }
    rotation = rotation_from_contrast(contrast);
  }
};

inline TestResult bootstrap_test(const TestContext& ctx, const Vector& y, const BootstrapOptions& opts) {
  detail::require(opts.b >= 1, "bootstrap needs at least one replicate");
  const auto cache = attach_response(ctx.design, y);

  TestResult out;
  out.b = opts.b;
  out.seed = opts.seed;
  out.statistic = opts.statistic;
  out.fit = fit_unconstrained(cache, *ctx.mom, opts.newton);
  if (!out.fit.converged()) {
    throw Error(ErrorKind::NonConvergence, std::string("unconstrained fit: ") + to_string(out.fit.status) + " " +
                                               out.fit.diagnostics);
  }
  out.null_fit = fit_constrained(cache, *ctx.mom, ctx.rotation, opts.newton);
  if (!out.null_fit.converged()) {
    throw Error(ErrorKind::NonConvergence, std::string("null fit: ") + to_string(out.null_fit.status) + " " +
                                               out.null_fit.diagnostics);
  }
  out.lr_obs = out.null_fit.objective - out.fit.objective;

  const auto l_null = build_covariance_factor(ctx.design->z(), out.null_fit.tau_hat);
  if (!l_null) throw Error(ErrorKind::Numeric, "null estimate outside the parameter space");

  out.draws.resize(static_cast<std::size_t>(opts.b));
  parallel_for(static_cast<std::size_t>(opts.b), opts.workers, [&](std::size_t b) {
    Engine rng = make_stream(opts.seed, {static_cast<std::uint64_t>(b)});
    BootstrapDraw& dr = out.draws[b];
    try {
      const auto rep = attach_response(ctx.design, sample_null_response(*ctx.design, *l_null, rng));
      const FitResult fit = fit_unconstrained(rep, *ctx.mom, opts.newton);
      const FitResult null_fit = fit_constrained(rep, *ctx.mom, ctx.rotation, opts.newton);
      dr.tau_star = fit.tau_hat;
      dr.tau_null_star = null_fit.tau_hat;
      dr.objective_star = fit.objective;
      dr.lambda_star = null_fit.objective - fit.objective;
      dr.ok = fit.converged() && null_fit.converged();
    } catch (const Error&) {
      dr.ok = false;
    }
  });

  for (const auto& dr : out.draws) out.n_failed += dr.ok ? 0 : 1;
  if (static_cast<double>(out.n_failed) > opts.max_failure_rate * static_cast<double>(opts.b)) {
    throw Error(ErrorKind::BootstrapFailure, std::to_string(out.n_failed) + " of " + std::to_string(opts.b) +
                                                 " bootstrap replicates failed to converge");
  }

  const double observed = opts.statistic == Statistic::LikelihoodRatio ? out.lr_obs : out.fit.objective;
  const PValues pv = bootstrap_pvalues(out.draws, observed, ctx.contrast, opts.statistic, opts.plus_one);
  out.b_effective = pv.b_effective;
  out.p_two = pv.p_two;
  out.mc_se_two = monte_carlo_se(pv.p_two, pv.b_effective);
  if (pv.p_one) {
    out.p_one = pv.p_one;
    out.mc_se_one = monte_carlo_se(*pv.p_one, pv.b_effective);
  }
  return out;
}

inline TestResult bootstrap_test(const DesignMatrices& design, const Vector& y, const ContrastSpec& contrast,
                                 const BootstrapOptions& opts) {
  return bootstrap_test(TestContext(design, contrast), y, opts);
}

}  // namespace varcomp
