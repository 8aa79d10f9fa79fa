#pragma once

// Variance components model y ~ N(X beta, sigma^2 (I + sum_j tau_j Z_j Z_j')),
// its spectrahedral parameter space, and the contrast rotation used to
// parametrize the null set {tau : A tau = 0}.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "varcomp/decomp.hpp"

namespace varcomp {

/// Variance ratios tau_j. Sign-unrestricted; membership in the parameter
/// space is decided by in_parameter_space().
using VarComponents = Vector;

/// Cholesky pivots at or below this value count as outside the parameter space.
inline constexpr double kBarrierPivot = 1e-12;

class DesignMatrices {
 public:
  DesignMatrices() = default;

  DesignMatrices(Matrix x, std::vector<Matrix> z_blocks, std::vector<std::string> names = {})
      : x_(std::move(x)), z_blocks_(std::move(z_blocks)), names_(std::move(names)) {
    const Index n = x_.rows();
    detail::require(x_.cols() >= 1, "design needs at least one fixed-effect column");
    detail::require(!z_blocks_.empty(), "design needs at least one random-effect block");
    detail::require(n > x_.cols(), "design needs more observations than fixed-effect columns");
    detail::require(x_.allFinite(), "fixed-effect matrix has non-finite entries");
    if (names_.empty()) {
      for (std::size_t j = 0; j < z_blocks_.size(); ++j) names_.push_back("tau" + std::to_string(j + 1));
    }
    detail::require(names_.size() == z_blocks_.size(), "one name per random-effect block");

    offsets_.push_back(0);
    for (const auto& z : z_blocks_) {
      detail::require(z.rows() == n, "random-effect block has wrong number of rows");
      detail::require(z.cols() >= 1, "random-effect block has no columns");
      detail::require(z.allFinite(), "random-effect block has non-finite entries");
      offsets_.push_back(offsets_.back() + z.cols());
    }
    z_concat_.resize(n, offsets_.back());
    for (std::size_t j = 0; j < z_blocks_.size(); ++j) {
      z_concat_.middleCols(offsets_[j], z_blocks_[j].cols()) = z_blocks_[j];
    }
    if (numerical_rank(x_) != x_.cols()) {
      throw Error(ErrorKind::SingularDesign, "fixed-effect matrix is not of full column rank");
    }
  }

  const Matrix& x() const { return x_; }
  const Matrix& z(Index j) const { return z_blocks_[static_cast<std::size_t>(j)]; }
  const std::vector<Matrix>& z_blocks() const { return z_blocks_; }
  const Matrix& z_concat() const { return z_concat_; }
  const std::vector<std::string>& names() const { return names_; }

  Index n() const { return x_.rows(); }
  Index p() const { return x_.cols(); }
  Index d() const { return static_cast<Index>(z_blocks_.size()); }
  Index m() const { return z_concat_.cols(); }
  Index block_offset(Index j) const { return offsets_[static_cast<std::size_t>(j)]; }
  Index block_size(Index j) const { return z(j).cols(); }

  /// Component owning column `col` of z_concat.
  Index component_of(Index col) const {
    Index j = 0;
    while (offsets_[static_cast<std::size_t>(j + 1)] <= col) ++j;
    return j;
  }

  /// Dense Sigma(tau) = I + Z D(tau) Z'. O(N^2) memory; for tests and small models.
  Matrix sigma(const VarComponents& tau) const {
    Matrix s = Matrix::Identity(n(), n());
    for (Index j = 0; j < d(); ++j) s.noalias() += tau(j) * z(j) * z(j).transpose();
    return s;
  }

 private:
  Matrix x_;
  std::vector<Matrix> z_blocks_;
  std::vector<std::string> names_;
  std::vector<Index> offsets_;
  Matrix z_concat_;
};

/// QR of [Z_1 : ... : Z_d] together with the per-component Gram matrices
/// R_j R_j' (R_j the columns of R_Z owned by component j), so that
/// R_Z D(tau) R_Z' + I is assembled in O(d m^2).
class ZFactor {
 public:
  ZFactor() = default;

  explicit ZFactor(const DesignMatrices& design) {
    if (design.m() > design.n()) {
      throw Error(ErrorKind::InvalidInput, "more random-effect columns (" + std::to_string(design.m()) +
                                               ") than observations (" + std::to_string(design.n()) + ")");
    }
    qr_ = QRFactor(design.z_concat());
    r_ = qr_.r();
    offsets_.resize(static_cast<std::size_t>(design.d()) + 1);
    for (Index j = 0; j <= design.d(); ++j) {
      offsets_[static_cast<std::size_t>(j)] = j < design.d() ? design.block_offset(j) : design.m();
    }
    for (Index j = 0; j < design.d(); ++j) {
      const Matrix rj = r_.middleCols(design.block_offset(j), design.block_size(j));
      Matrix g = Matrix::Zero(r_.rows(), r_.rows());
      g.selfadjointView<Eigen::Lower>().rankUpdate(rj);
      grams_.push_back(g.selfadjointView<Eigen::Lower>());
    }
  }

  const QRFactor& qr() const { return qr_; }
  const Matrix& r() const { return r_; }
  Index k() const { return r_.rows(); }
  Index d() const { return static_cast<Index>(grams_.size()); }
  Index block_offset(Index j) const { return offsets_[static_cast<std::size_t>(j)]; }
  Index block_size(Index j) const {
    return offsets_[static_cast<std::size_t>(j + 1)] - offsets_[static_cast<std::size_t>(j)];
  }
  const Matrix& gram(Index j) const { return grams_[static_cast<std::size_t>(j)]; }

  /// R_Z D(tau) R_Z' + I_m.
  Matrix inner(const VarComponents& tau) const {
    detail::require(tau.size() == d(), "tau has wrong dimension");
    Matrix s = Matrix::Identity(k(), k());
    for (Index j = 0; j < d(); ++j) s.noalias() += tau(j) * grams_[static_cast<std::size_t>(j)];
    return s;
  }

 private:
  QRFactor qr_;
  Matrix r_;
  std::vector<Index> offsets_;
  std::vector<Matrix> grams_;
};

/// L(tau) with L L' = R_Z D(tau) R_Z' + I, or nullopt outside the parameter space.
inline std::optional<CholFactor> build_covariance_factor(const ZFactor& z, const VarComponents& tau) {
  if (!tau.allFinite()) return std::nullopt;
  return cholesky(z.inner(tau), kBarrierPivot);
}

inline std::optional<CholFactor> build_covariance_factor(const DesignMatrices& design, const QRFactor& zqr,
                                                         const VarComponents& tau) {
  detail::require(zqr.rows() == design.n() && zqr.cols() == design.m(), "zqr does not match design");
  detail::require(tau.size() == design.d(), "tau has wrong dimension");
  const Matrix r = zqr.r();
  Matrix s = Matrix::Identity(r.rows(), r.rows());
  for (Index j = 0; j < design.d(); ++j) {
    const auto rj = r.middleCols(design.block_offset(j), design.block_size(j));
    s.noalias() += tau(j) * rj * rj.transpose();
  }
  return cholesky(s, kBarrierPivot);
}

/// True iff I + Z D(tau) Z' is positive definite.
inline bool in_parameter_space(const ZFactor& z, const VarComponents& tau) {
  return build_covariance_factor(z, tau).has_value();
}

inline bool in_parameter_space(const DesignMatrices& design, const QRFactor& zqr, const VarComponents& tau) {
  return build_covariance_factor(design, zqr, tau).has_value();
}

enum class Side { Greater, Less, Free };

/// H0: A tau = 0 against A tau != 0 (no cone) or A tau in a sign cone, one
/// constraint per row of A.
struct ContrastSpec {
  Matrix a;
  std::optional<std::vector<Side>> cone;

  ContrastSpec() = default;

  explicit ContrastSpec(Matrix a_, std::optional<std::vector<Side>> cone_ = std::nullopt)
      : a(std::move(a_)), cone(std::move(cone_)) {
    detail::require(a.rows() >= 1 && a.cols() >= 1, "contrast matrix is empty");
    detail::require(a.rows() <= a.cols(), "contrast has more rows than components");
    detail::require(a.allFinite(), "contrast has non-finite entries");
    if (cone) {
      detail::require(static_cast<Index>(cone->size()) == a.rows(), "one alternative per contrast row");
      bool any = false;
      for (Side s : *cone) any = any || s != Side::Free;
      detail::require(any, "one-sided alternative needs at least one constrained row");
    }
  }

  Index d0() const { return a.rows(); }
  Index d() const { return a.cols(); }
  bool two_sided() const { return !cone.has_value(); }

  /// Whether A tau lies in the alternative cone (always true when two-sided).
  bool in_cone(const VarComponents& tau) const {
    if (!cone) return true;
    const Vector at = a * tau;
    for (Index i = 0; i < at.size(); ++i) {
      switch ((*cone)[static_cast<std::size_t>(i)]) {
        case Side::Greater: if (!(at(i) > 0.0)) return false; break;
        case Side::Less: if (!(at(i) < 0.0)) return false; break;
        case Side::Free: break;
      }
    }
    return true;
  }
};

/// A' = Q_A (R_A', 0')' with Q_A = [q1 : q2]; q2 spans the null set.
struct Rotation {
  Matrix q_full;
  Matrix q1;
  Matrix q2;
  Matrix r_a;
};

inline Rotation rotation_from_contrast(const ContrastSpec& contrast) {
  const Matrix& a = contrast.a;
  const Index d0 = a.rows();
  const Index d = a.cols();
  QRFactor qr(a.transpose());
  Matrix r = qr.r();
  const double scale = r.diagonal().cwiseAbs().maxCoeff();
  for (Index i = 0; i < d0; ++i) {
    if (!(std::abs(r(i, i)) > 1e-10 * scale)) {
      throw Error(ErrorKind::InvalidInput, "contrast matrix is not of full row rank");
    }
  }
  Rotation rot;
  rot.q_full = qr.apply_q(Matrix::Identity(d, d));
  rot.q1 = rot.q_full.leftCols(d0);
  rot.q2 = rot.q_full.rightCols(d - d0);
  rot.r_a = std::move(r);
  return rot;
}

inline VarComponents lift(const Rotation& rot, const Vector& tau2) {
  detail::require(tau2.size() == rot.q2.cols(), "lift: dimension mismatch");
  if (rot.q2.cols() == 0) return Vector::Zero(rot.q_full.rows());
  return rot.q2 * tau2;
}

}  // namespace varcomp
