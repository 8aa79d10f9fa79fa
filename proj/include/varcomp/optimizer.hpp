#pragma once

#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <vector>

#include "varcomp/decomp.hpp"
#include "varcomp/likelihood.hpp"
#include "varcomp/model.hpp"

namespace varcomp {

struct NewtonOptions {
  double kappa = 1e-3;     // ridge added to |eigenvalues|
  double grad_tol = 1e-6;  // sup-norm stopping tolerance
  int max_iter = 100;
  int max_halvings = 60;
  bool monotone_guard = true;  // also halve when the objective increases
};

enum class FitStatus { Converged, MaxIterations, LocalGeometry };

inline const char* to_string(FitStatus s) {
  switch (s) {
    case FitStatus::Converged: return "converged";
    case FitStatus::MaxIterations: return "max_iterations";
    case FitStatus::LocalGeometry: return "local_geometry";
  }
  return "unknown";
}

struct FitResult {
  VarComponents tau_hat;
  double objective = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  int halvings_total = 0;
  Vector hessian_eigenvalues;
  FitStatus status = FitStatus::MaxIterations;
  std::string diagnostics;
  std::vector<Vector> trace;             // accepted iterates, starting point first
  std::vector<double> objective_trace;   // objective at each accepted iterate

  bool converged() const { return status == FitStatus::Converged; }
};

template <typename F>
concept NewtonObjective = requires(const F& f, const Vector& x) {
  { f.value(x) } -> std::convertible_to<std::optional<double>>;
  { f.evaluate(x) } -> std::convertible_to<std::optional<Objective>>;
};

/// Minimizes f from x0. The Hessian is replaced by B diag(|lambda| + kappa) B'
/// and a step is halved while it leaves the domain of f (value() returns
/// nullopt) or, with the monotone guard, increases f.
template <NewtonObjective F>
FitResult modified_newton(const F& f, Vector x0, const NewtonOptions& opts = {}) {
  FitResult res;
  Vector x = std::move(x0);

  std::optional<double> fx = f.value(x);
  for (int h = 0; !fx && h < opts.max_halvings; ++h) {
    x *= 0.5;
    fx = f.value(x);
  }
  if (!fx) {
    res.tau_hat = Vector::Zero(x.size());
    res.status = FitStatus::LocalGeometry;
    res.diagnostics = "starting value could not be moved inside the parameter space";
    return res;
  }

  for (int it = 0;; ++it) {
    auto ev = f.evaluate(x);
    if (!ev) {
      res.status = FitStatus::LocalGeometry;
      res.diagnostics = "accepted iterate left the domain: " + detail::format_tau(x);
      break;
    }
    res.tau_hat = x;
    res.objective = ev->value;
    res.trace.push_back(x);
    res.objective_trace.push_back(ev->value);
    res.grad_norm = x.size() ? ev->gradient.template lpNorm<Eigen::Infinity>() : 0.0;

    const Index d = x.size();
    SymEig eig = d ? sym_eig(ev->hessian) : SymEig{Matrix(0, 0), Vector(0)};
    if (res.grad_norm < opts.grad_tol) {
      res.status = FitStatus::Converged;
      res.hessian_eigenvalues = eig.values;
      break;
    }
    if (it >= opts.max_iter) {
      res.status = FitStatus::MaxIterations;
      res.hessian_eigenvalues = eig.values;
      res.diagnostics = "gradient norm " + std::to_string(res.grad_norm) + " after " +
                        std::to_string(it) + " iterations";
      break;
    }

    const Vector scaled = (eig.vectors.transpose() * ev->gradient).array() /
                          (eig.values.array().abs() + opts.kappa);
    Vector step = -(eig.vectors * scaled);
    const double slack = 1e-12 * (1.0 + std::abs(ev->value));

    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h) {
      const Vector candidate = x + step;
      const auto fc = f.value(candidate);
      if (fc && (!opts.monotone_guard || *fc <= ev->value + slack)) {
        x = candidate;
        accepted = true;
        break;
      }
      step *= 0.5;
      ++res.halvings_total;
    }
    if (!accepted) {
      res.status = FitStatus::LocalGeometry;
      res.hessian_eigenvalues = eig.values;
      res.diagnostics = "step halving exhausted at " + detail::format_tau(x) + ", gradient norm " +
                        std::to_string(res.grad_norm);
      break;
    }
    ++res.iterations;
  }
  return res;
}

/// L(tau) as a Newton objective.
struct NrllObjective {
  const LikelihoodCache& cache;

  std::optional<double> value(const Vector& tau) const { return nrll(cache, tau); }
  std::optional<Objective> evaluate(const Vector& tau) const {
    return varcomp::evaluate(cache, tau, Order::Hessian);
  }
};

/// g(t) = L(Q2 t) on the null set of a contrast.
struct NullSetObjective {
  const LikelihoodCache& cache;
  const Matrix& q2;

  std::optional<double> value(const Vector& t) const { return nrll(cache, q2 * t); }
  std::optional<Objective> evaluate(const Vector& t) const {
    auto ev = varcomp::evaluate(cache, q2 * t, Order::Hessian);
    if (!ev) return std::nullopt;
    Objective out;
    out.value = ev->value;
    out.gradient = q2.transpose() * ev->gradient;
    out.hessian = q2.transpose() * ev->hessian * q2;
    return out;
  }
};

/// Method-of-moments start from sequential sums of squares. Only the
/// response-dependent part runs per call; the kernel bases and the
/// triangular moment matrix are built once per design.
class MomSystem {
 public:
  explicit MomSystem(const DesignMatrices& design) {
    const Index d = design.d();
    const Index n = design.n();
    Matrix stacked = design.x();
    bases_.push_back(kernel_basis(stacked));
    for (Index j = 0; j < d; ++j) {
      Matrix next(n, stacked.cols() + design.block_size(j));
      next << stacked, design.z(j);
      stacked = std::move(next);
      bases_.push_back(kernel_basis(stacked));
      const Index prev = bases_[static_cast<std::size_t>(j)].cols();
      const Index cur = bases_.back().cols();
      if (cur >= prev) {
        throw Error(ErrorKind::ConfoundedDesign, "component '" + design.names()[static_cast<std::size_t>(j)] +
                                                     "' adds nothing to the column space of its predecessors");
      }
    }
    if (bases_.back().cols() == 0) {
      throw Error(ErrorKind::ConfoundedDesign, "no residual degrees of freedom after all components");
    }

    // Row j: E SS_j / sigma^2 - (r_{j-1} - r_j) = sum_{k >= j} coef(j, k) tau_k.
    coef_ = Matrix::Zero(d, d);
    for (Index j = 0; j < d; ++j) {
      const Matrix& before = bases_[static_cast<std::size_t>(j)];
      const Matrix& after = bases_[static_cast<std::size_t>(j + 1)];
      coef_(j, j) = (design.z(j).transpose() * before).squaredNorm();
      for (Index k = j + 1; k < d; ++k) {
        coef_(j, k) = (design.z(k).transpose() * before).squaredNorm() -
                      (design.z(k).transpose() * after).squaredNorm();
      }
    }
  }

  Index d() const { return coef_.rows(); }
  Index rank(Index j) const { return bases_[static_cast<std::size_t>(j)].cols(); }
  const Matrix& basis(Index j) const { return bases_[static_cast<std::size_t>(j)]; }
  const Matrix& coefficients() const { return coef_; }

  VarComponents start(const Vector& y) const {
    const Index d = coef_.rows();
    std::vector<double> ss(static_cast<std::size_t>(d) + 1);
    for (Index j = 0; j <= d; ++j) {
      ss[static_cast<std::size_t>(j)] = (bases_[static_cast<std::size_t>(j)].transpose() * y).squaredNorm();
    }
    const double sigma2 = ss.back() / static_cast<double>(rank(d));
    if (!(sigma2 > 0.0)) {
      throw Error(ErrorKind::DegenerateResponse, "zero residual variance in moment equations");
    }
    Vector s(d);
    for (Index j = 0; j < d; ++j) {
      const double ssj = ss[static_cast<std::size_t>(j)] - ss[static_cast<std::size_t>(j + 1)];
      s(j) = ssj / sigma2 + static_cast<double>(rank(j + 1) - rank(j));
    }
    return coef_.triangularView<Eigen::Upper>().solve(s);
  }

 private:
  std::vector<Matrix> bases_;  // U_0 .. U_d
  Matrix coef_;
};

inline VarComponents mom_start(const DesignMatrices& design, const Vector& y) {
  return MomSystem(design).start(y);
}

/// Unconstrained fit from a moment start. Converged fits with a Hessian
/// eigenvalue below -1e-6 are reported as LocalGeometry.
inline FitResult fit_unconstrained(const LikelihoodCache& cache, const MomSystem& mom,
                                   const NewtonOptions& opts = {}) {
  NrllObjective obj{cache};
  FitResult res = modified_newton(obj, mom.start(cache.y), opts);
  if (res.converged() && res.hessian_eigenvalues.size() && res.hessian_eigenvalues.minCoeff() < -1e-6) {
    res.status = FitStatus::LocalGeometry;
    res.diagnostics = "converged to a stationary point that is not a local minimum";
  }
  return res;
}

inline FitResult fit_unconstrained(const DesignMatrices& design, const Vector& y, const NewtonOptions& opts = {}) {
  const auto cache = precompute(design, y);
  return fit_unconstrained(cache, MomSystem(design), opts);
}

/// Fit over {tau : A tau = 0}, parametrized as tau = Q2 t. The result is
/// reported in the original coordinates.
inline FitResult fit_constrained(const LikelihoodCache& cache, const MomSystem& mom, const Rotation& rot,
                                 const NewtonOptions& opts = {}) {
  const Index free = rot.q2.cols();
  if (free == 0) {
    FitResult res;
    res.tau_hat = Vector::Zero(rot.q_full.rows());
    res.objective = *nrll(cache, res.tau_hat);
    res.status = FitStatus::Converged;
    res.hessian_eigenvalues = Vector(0);
    res.trace.push_back(res.tau_hat);
    res.objective_trace.push_back(res.objective);
    return res;
  }
  NullSetObjective obj{cache, rot.q2};
  FitResult res = modified_newton(obj, rot.q2.transpose() * mom.start(cache.y), opts);
  if (res.converged() && res.hessian_eigenvalues.size() && res.hessian_eigenvalues.minCoeff() < -1e-6) {
    res.status = FitStatus::LocalGeometry;
    res.diagnostics = "converged to a stationary point that is not a local minimum";
  }
  res.tau_hat = rot.q2 * res.tau_hat;
  for (auto& t : res.trace) t = rot.q2 * t;
  return res;
}

inline FitResult fit_constrained(const DesignMatrices& design, const Vector& y, const Rotation& rot,
                                 const NewtonOptions& opts = {}) {
  const auto cache = precompute(design, y);
  return fit_constrained(cache, MomSystem(design), rot, opts);
}

}  // namespace varcomp
