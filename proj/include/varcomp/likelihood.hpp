#pragma once

// Twice the negative log-likelihood of the normalized residual statistic,
//
//   L(tau) = log|U' S U| + (N - p) log[q' (U' S U)^{-1} q],
//
// with S = Sigma(tau), U an orthonormal basis of ker(X') and q = U'y/|U'y|.
// It is evaluated without forming U or any N x N matrix: with
// X = P_X (R_X', 0')', Z = P_Z (R_Z', 0')' and L L' = R_Z D R_Z' + I,
//
//   |U' S U|           = |S| |Q_X' S^{-1} Q_X|
//   y'U (U'SU)^{-1} U'y = y'S^{-1}y - y'S^{-1}Q_X (Q_X'S^{-1}Q_X)^{-1} Q_X'S^{-1}y
//
// and every S^{-1} product reduces to triangular solves with L in the
// P_Z-rotated frame.

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>

#include "varcomp/decomp.hpp"
#include "varcomp/model.hpp"

namespace varcomp {

/// Response-independent precomputation: QR of X and Z, explicit Q_X and
/// its rotation P_Z' Q_X.
class DesignCache {
 public:
  explicit DesignCache(DesignMatrices design) : design_(std::move(design)), z_(design_) {
    xqr_ = QRFactor(design_.x());
    q_x_ = xqr_.thin_q();
    t_x_ = z_.qr().apply_qt(q_x_);
    const Index k = z_.k();
    const auto tail = t_x_.bottomRows(design_.n() - k);
    tail_xx_ = tail.transpose() * tail;
  }

  const DesignMatrices& design() const { return design_; }
  const ZFactor& z() const { return z_; }
  const QRFactor& xqr() const { return xqr_; }
  const Matrix& q_x() const { return q_x_; }
  const Matrix& t_x() const { return t_x_; }
  const Matrix& tail_xx() const { return tail_xx_; }

  Index n() const { return design_.n(); }
  Index p() const { return design_.p(); }
  Index d() const { return design_.d(); }
  Index m() const { return design_.m(); }
  Index k() const { return z_.k(); }

  /// U_X' v, using the implicit complement of Q_X.
  Vector residual(const Vector& v) const { return xqr_.apply_qt(v).tail(n() - p()); }

 private:
  DesignMatrices design_;
  ZFactor z_;
  QRFactor xqr_;
  Matrix q_x_;
  Matrix t_x_;
  Matrix tail_xx_;
};

struct LikelihoodCache {
  std::shared_ptr<const DesignCache> design;
  Vector y;          // response in the ambient coordinates
  Vector t_y;        // P_Z' y
  double resid_ss = 0.0;  // |U_X' y|^2
  Vector tail_xy;    // tail rows of P_Z'Q_X against tail rows of P_Z'y
  double tail_yy = 0.0;

  Index n() const { return design->n(); }
  Index p() const { return design->p(); }
  Index d() const { return design->d(); }
};

inline LikelihoodCache attach_response(std::shared_ptr<const DesignCache> design, Vector y) {
  detail::require(y.size() == design->n(), "response length does not match design");
  if (!y.allFinite()) throw Error(ErrorKind::InvalidInput, "response has non-finite entries");
  LikelihoodCache c;
  c.resid_ss = design->residual(y).squaredNorm();
  const double scale = y.squaredNorm();
  if (!(c.resid_ss > 1e-20 * scale) || c.resid_ss == 0.0) {
    throw Error(ErrorKind::DegenerateResponse, "response lies in the column space of X");
  }
  c.t_y = design->z().qr().apply_qt(y);
  const Index k = design->k();
  const Index tail = design->n() - k;
  c.tail_xy = design->t_x().bottomRows(tail).transpose() * c.t_y.tail(tail);
  c.tail_yy = c.t_y.tail(tail).squaredNorm();
  c.y = std::move(y);
  c.design = std::move(design);
  return c;
}

inline LikelihoodCache precompute(const DesignMatrices& design, const Vector& response) {
  return attach_response(std::make_shared<const DesignCache>(design), response);
}

/// Value with optional gradient and Hessian.
struct Objective {
  double value = 0.0;
  Vector gradient;
  Matrix hessian;
};

enum class Order { Value = 0, Gradient = 1, Hessian = 2 };

namespace detail {

inline std::string format_tau(const Vector& tau) {
  std::ostringstream os;
  os.precision(17);
  os << "tau = (";
  for (Index i = 0; i < tau.size(); ++i) os << (i ? ", " : "") << tau(i);
  os << ")";
  return os.str();
}

inline void require_finite(double v, const Vector& tau, const char* what) {
  if (!std::isfinite(v)) {
    throw Error(ErrorKind::Numeric, std::string(what) + " is not finite at " + format_tau(tau));
  }
}

}  // namespace detail

/// Evaluates L(tau) and, up to `order`, its derivatives. Returns nullopt
/// when tau is outside the parameter space (conceptually L = +inf).
inline std::optional<Objective> evaluate(const LikelihoodCache& cache, const VarComponents& tau,
                                         Order order = Order::Hessian) {
  const DesignCache& dc = *cache.design;
  const ZFactor& zf = dc.z();
  detail::require(tau.size() == dc.d(), "tau has wrong dimension");
  auto chol = build_covariance_factor(zf, tau);
  if (!chol) return std::nullopt;

  const Index k = dc.k();
  const Index p = dc.p();
  const double dof = static_cast<double>(dc.n() - p);
  const auto tri = chol->lower.triangularView<Eigen::Lower>();

  Matrix rhs(k, p + 1);
  rhs.leftCols(p) = dc.t_x().topRows(k);
  rhs.col(p) = cache.t_y.head(k);
  tri.solveInPlace(rhs);
  const auto bx = rhs.leftCols(p);  // L^{-1} (P_Z'Q_X)_{1:k}
  const auto ay = rhs.col(p);       // L^{-1} (P_Z'y)_{1:k}

  const Matrix g = bx.transpose() * bx + dc.tail_xx();  // Q_X' S^{-1} Q_X
  const Vector c = bx.transpose() * ay + cache.tail_xy;  // Q_X' S^{-1} y
  const double yy = ay.squaredNorm() + cache.tail_yy;    // y' S^{-1} y
  Eigen::LLT<Matrix> gchol(g);
  if (gchol.info() != Eigen::Success) {
    throw Error(ErrorKind::Numeric, "Q_X' S^{-1} Q_X not positive definite at " + detail::format_tau(tau));
  }
  const Vector ginv_c = gchol.solve(c);
  const double quad = yy - c.dot(ginv_c);  // y' P y with P = U (U'SU)^{-1} U'
  if (!(quad > 0.0)) {
    throw Error(ErrorKind::Numeric, "non-positive residual quadratic form at " + detail::format_tau(tau));
  }
  const Matrix gl = gchol.matrixL();

  Objective out;
  out.value = chol->log_det() + 2.0 * gl.diagonal().array().log().sum() +
              dof * std::log(quad / cache.resid_ss);
  detail::require_finite(out.value, tau, "likelihood");
  if (order == Order::Value) return out;

  // With F = L^{-1} R_Z: Z'PZ = F'F - E E', E = F' B G^{-T/2}, Z'Py = F'(a - B G^{-1} c).
  const Index d = dc.d();
  Matrix f = zf.r();
  tri.solveInPlace(f);
  const Vector h = ay - bx * ginv_c;
  const Vector u = f.transpose() * h;
  const Matrix e = gl.triangularView<Eigen::Lower>().solve((f.transpose() * bx).transpose()).transpose();

  out.gradient.resize(d);
  for (Index j = 0; j < d; ++j) {
    const Index off = zf.block_offset(j);
    const Index mj = zf.block_size(j);
    const double tr = f.middleCols(off, mj).squaredNorm() - e.middleRows(off, mj).squaredNorm();
    out.gradient(j) = tr - dof * u.segment(off, mj).squaredNorm() / quad;
    detail::require_finite(out.gradient(j), tau, "gradient");
  }
  if (order == Order::Gradient) return out;

  const Index m = zf.r().cols();
  Matrix lower_pz = Matrix::Zero(m, m);
  lower_pz.selfadjointView<Eigen::Lower>().rankUpdate(f.transpose());
  lower_pz.selfadjointView<Eigen::Lower>().rankUpdate(e, -1.0);
  const Matrix pz = lower_pz.selfadjointView<Eigen::Lower>();

  out.hessian.resize(d, d);
  for (Index j = 0; j < d; ++j) {
    const Index oj = zf.block_offset(j);
    const Index mj = zf.block_size(j);
    const auto uj = u.segment(oj, mj);
    for (Index l = 0; l <= j; ++l) {
      const Index ol = zf.block_offset(l);
      const Index ml = zf.block_size(l);
      const auto ul = u.segment(ol, ml);
      const auto block = pz.block(oj, ol, mj, ml);
      const double cross = uj.dot(block * ul);
      const double v = -block.squaredNorm() +
                       dof * (2.0 * cross / quad - uj.squaredNorm() * ul.squaredNorm() / (quad * quad));
      detail::require_finite(v, tau, "hessian");
      out.hessian(j, l) = v;
      out.hessian(l, j) = v;
    }
  }
  return out;
}

inline std::optional<double> nrll(const LikelihoodCache& cache, const VarComponents& tau) {
  auto ev = evaluate(cache, tau, Order::Value);
  if (!ev) return std::nullopt;
  return ev->value;
}

inline std::optional<Vector> nrll_gradient(const LikelihoodCache& cache, const VarComponents& tau) {
  auto ev = evaluate(cache, tau, Order::Gradient);
  if (!ev) return std::nullopt;
  return std::move(ev->gradient);
}

inline std::optional<Matrix> nrll_hessian(const LikelihoodCache& cache, const VarComponents& tau) {
  auto ev = evaluate(cache, tau, Order::Hessian);
  if (!ev) return std::nullopt;
  return std::move(ev->hessian);
}

}  // namespace varcomp
