#pragma once

// Dense factorization kernel. Everything downstream talks to these types
// only, so a sparse backend can replace the Eigen dense decompositions
// without touching callers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "varcomp/error.hpp"

namespace varcomp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::InvalidInput, what);
}

}  // namespace detail

/// Householder QR of an N x k matrix (N >= k). The orthogonal factor P is
/// kept as a product of reflectors and applied implicitly.
class QRFactor {
 public:
  QRFactor() = default;

  explicit QRFactor(const Matrix& m) : qr_(m) {
    detail::require(m.rows() >= m.cols(), "householder_qr needs rows >= cols, got " +
                                              std::to_string(m.rows()) + "x" +
                                              std::to_string(m.cols()));
  }

  Index rows() const { return qr_.rows(); }
  Index cols() const { return qr_.cols(); }

  /// Upper-triangular k x k factor. Diagonal entries may be negative.
  Matrix r() const {
    const Index k = cols();
    return qr_.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  }

  template <typename Derived>
  Matrix apply_q(const Eigen::MatrixBase<Derived>& v) const {
    detail::require(v.rows() == rows(), "apply_q: dimension mismatch");
    return qr_.householderQ() * v;
  }

  template <typename Derived>
  Matrix apply_qt(const Eigen::MatrixBase<Derived>& v) const {
    detail::require(v.rows() == rows(), "apply_qt: dimension mismatch");
    return qr_.householderQ().adjoint() * v;
  }

  Vector apply_q(const Vector& v) const { return apply_q<Vector>(v); }
  Vector apply_qt(const Vector& v) const { return apply_qt<Vector>(v); }

  /// First k columns of P, formed explicitly.
  Matrix thin_q() const {
    return apply_q(Matrix::Identity(rows(), cols()));
  }

 private:
  Eigen::HouseholderQR<Matrix> qr_;
};

inline QRFactor householder_qr(const Matrix& m) { return QRFactor(m); }

inline Vector apply_q(const QRFactor& f, const Vector& v) { return f.apply_q(v); }
inline Vector apply_qt(const QRFactor& f, const Vector& v) { return f.apply_qt(v); }

struct CholFactor {
  Matrix lower;

  Index size() const { return lower.rows(); }

  double log_det() const { return 2.0 * lower.diagonal().array().log().sum(); }
};

/// Cholesky factorization using the lower triangle of `s`. Returns nullopt
/// when any pivot is <= min_pivot; with the default this is exactly the
/// not-positive-definite case.
inline std::optional<CholFactor> cholesky(const Matrix& s, double min_pivot = 0.0) {
  detail::require(s.rows() == s.cols(), "cholesky: matrix not square");
  Eigen::LLT<Matrix, Eigen::Lower> llt(s);
  if (llt.info() != Eigen::Success) return std::nullopt;
  Matrix lower = llt.matrixL();
  for (Index i = 0; i < lower.rows(); ++i) {
    const double d = lower(i, i);
    if (!(d * d > min_pivot)) return std::nullopt;
  }
  return CholFactor{std::move(lower)};
}

namespace detail {

template <typename Derived>
void check_triangular_diagonal(const Eigen::MatrixBase<Derived>& t) {
  for (Index i = 0; i < t.rows(); ++i) {
    if (t(i, i) == 0.0) {
      throw Error(ErrorKind::SingularDesign,
                  "triangular solve with zero diagonal at " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Solves L x = b (or L' x = b when `transposed`) for lower-triangular L.
template <typename Rhs>
Matrix solve_triangular(const Matrix& lower, const Eigen::MatrixBase<Rhs>& b,
                        bool transposed = false) {
  detail::require(lower.rows() == lower.cols() && lower.rows() == b.rows(),
                  "solve_triangular: dimension mismatch");
  detail::check_triangular_diagonal(lower);
  if (transposed) return lower.triangularView<Eigen::Lower>().transpose().solve(b);
  return lower.triangularView<Eigen::Lower>().solve(b);
}

template <typename Rhs>
Matrix solve_triangular(const CholFactor& f, const Eigen::MatrixBase<Rhs>& b,
                        bool transposed = false) {
  return solve_triangular(f.lower, b, transposed);
}

inline Vector solve_triangular(const CholFactor& f, const Vector& b, bool transposed = false) {
  return solve_triangular<Vector>(f.lower, b, transposed);
}

struct SymEig {
  Matrix vectors;  // orthogonal, columns match `values`
  Vector values;   // descending
};

inline SymEig sym_eig(const Matrix& h) {
  detail::require(h.rows() == h.cols(), "sym_eig: matrix not square");
  if (!h.allFinite()) throw Error(ErrorKind::Numeric, "sym_eig: non-finite input");
  Eigen::SelfAdjointEigenSolver<Matrix> es(h);
  if (es.info() != Eigen::Success) throw Error(ErrorKind::Numeric, "sym_eig failed");
  // Eigen sorts ascending.
  const Index d = h.rows();
  SymEig out{Matrix(d, d), Vector(d)};
  for (Index i = 0; i < d; ++i) {
    out.values(i) = es.eigenvalues()(d - 1 - i);
    out.vectors.col(i) = es.eigenvectors().col(d - 1 - i);
  }
  return out;
}

/// Orthonormal basis of the orthogonal complement of the column space of m.
/// Numerical rank counts |R_ii| > N * eps * max_j |R_jj| from a column-pivoted QR.
inline Matrix kernel_basis(const Matrix& m) {
  const Index n = m.rows();
  if (m.cols() == 0) return Matrix::Identity(n, n);
  Eigen::ColPivHouseholderQR<Matrix> qr(m.rows(), m.cols());
  qr.setThreshold(static_cast<double>(n) * std::numeric_limits<double>::epsilon());
  qr.compute(m);
  const Index rank = qr.rank();
  Matrix basis = Matrix::Zero(n, n - rank);
  basis.bottomRows(n - rank).setIdentity();
  return qr.householderQ() * basis;
}

/// Numerical rank using the same rule as kernel_basis.
inline Index numerical_rank(const Matrix& m) {
  if (m.cols() == 0 || m.rows() == 0) return 0;
  Eigen::ColPivHouseholderQR<Matrix> qr(m.rows(), m.cols());
  qr.setThreshold(static_cast<double>(m.rows()) * std::numeric_limits<double>::epsilon());
  qr.compute(m);
  return qr.rank();
}

}  // namespace varcomp
