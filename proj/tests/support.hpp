#pragma once

// Dense reference implementations and random model generators shared by
// the unit, property and acceptance tests.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "varcomp/varcomp.hpp"

namespace testsupport {

using varcomp::Index;
using varcomp::Matrix;
using varcomp::Vector;

/// Orthonormal basis of ker(X') from a full SVD (independent of the QR path).
inline Matrix dense_kernel(const Matrix& x) {
  Eigen::JacobiSVD<Matrix> svd(x, Eigen::ComputeFullU);
  const Vector& s = svd.singularValues();
  Index rank = 0;
  const double tol = static_cast<double>(x.rows()) * 1e-15 * (s.size() ? s(0) : 0.0);
  for (Index i = 0; i < s.size(); ++i) rank += s(i) > tol ? 1 : 0;
  return svd.matrixU().rightCols(x.rows() - rank);
}

/// log|U'SU| + (N - p) log(q' (U'SU)^{-1} q), formed densely.
inline double dense_nrll(const varcomp::DesignMatrices& dm, const Vector& y, const Vector& tau) {
  const Matrix u = dense_kernel(dm.x());
  const Matrix s = u.transpose() * dm.sigma(tau) * u;
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const Vector q = u.transpose() * y / (u.transpose() * y).norm();
  const Vector w = es.eigenvectors().transpose() * q;
  double logdet = 0.0;
  double quad = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    logdet += std::log(es.eigenvalues()(i));
    quad += w(i) * w(i) / es.eigenvalues()(i);
  }
  return logdet + static_cast<double>(dm.n() - dm.p()) * std::log(quad);
}

/// Smallest eigenvalue of the dense Sigma(tau).
inline double dense_min_eig(const varcomp::DesignMatrices& dm, const Vector& tau) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(dm.sigma(tau), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline Matrix indicator(const std::vector<Index>& codes, Index levels) {
  Matrix z = Matrix::Zero(static_cast<Index>(codes.size()), levels);
  for (std::size_t i = 0; i < codes.size(); ++i) z(static_cast<Index>(i), codes[i]) = 1.0;
  return z;
}

/// Small random model: intercept plus up to two Gaussian covariates, and
/// d factor (or Gaussian) random-effect blocks.
inline varcomp::DesignMatrices random_design(std::mt19937_64& rng, Index n_max = 60, Index d_max = 3) {
  std::uniform_int_distribution<Index> nd(15, n_max);
  std::uniform_int_distribution<Index> dd(1, d_max);
  std::uniform_int_distribution<Index> pd(1, 3);
  std::normal_distribution<double> g;
  const Index n = nd(rng);
  const Index p = pd(rng);
  const Index d = dd(rng);
  Matrix x(n, p);
  x.col(0).setOnes();
  for (Index c = 1; c < p; ++c)
    for (Index i = 0; i < n; ++i) x(i, c) = g(rng);
  std::vector<Matrix> zs;
  for (Index j = 0; j < d; ++j) {
    std::uniform_int_distribution<Index> ld(2, std::max<Index>(3, n / (2 * d)));
    const Index levels = ld(rng);
    if (j % 2 == 0 || levels > n / 3) {
      std::vector<Index> codes(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) codes[static_cast<std::size_t>(i)] = i % levels;
      std::shuffle(codes.begin(), codes.end(), rng);
      zs.push_back(indicator(codes, levels));
    } else {
      Matrix z(n, levels);
      for (Index i = 0; i < n; ++i)
        for (Index c = 0; c < levels; ++c) z(i, c) = g(rng);
      zs.push_back(z);
    }
  }
  return varcomp::DesignMatrices(std::move(x), std::move(zs));
}

/// tau with independent coordinates in [-0.5 / lambda_max(Z_j Z_j'), 3],
/// redrawn until Sigma(tau) is comfortably positive definite.
inline Vector random_tau(std::mt19937_64& rng, const varcomp::DesignMatrices& dm, bool allow_negative = true) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    Vector tau(dm.d());
    for (Index j = 0; j < dm.d(); ++j) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(dm.z(j).transpose() * dm.z(j), Eigen::EigenvaluesOnly);
      const double lo = allow_negative ? -0.5 / es.eigenvalues().maxCoeff() : 0.0;
      tau(j) = lo + (3.0 - lo) * u(rng);
    }
    if (dense_min_eig(dm, tau) > 0.05) return tau;
  }
}

inline Vector random_response(std::mt19937_64& rng, Index n) {
  std::normal_distribution<double> g;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = g(rng);
  return y;
}

/// One-way model with m groups of size r and an intercept.
inline varcomp::DesignMatrices one_way(Index m, Index r) {
  std::vector<Index> codes;
  for (Index i = 0; i < m; ++i)
    for (Index k = 0; k < r; ++k) codes.push_back(i);
  return varcomp::DesignMatrices(Matrix::Ones(m * r, 1), {indicator(codes, m)});
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace testsupport
