#pragma once

// Dense and factored matrix values plus the thin decompositions the
// projection code is built on. Everything is 64-bit internally; storage
// precision of checkpoints never leaks in here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nullfuse/error.hpp"

namespace nullfuse {

using DenseRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Immutable dense real matrix, row-major, all entries finite.
class Matrix {
 public:
  Matrix(std::size_t rows, std::size_t cols) : Matrix(DenseRowMajor::Zero(to_index(rows, "rows"), to_index(cols, "cols"))) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries) {
    if (entries.size() != rows * cols) {
      throw ShapeError("matrix of shape " + shape_string(rows, cols) + " needs " +
                       std::to_string(rows * cols) + " entries, got " +
                       std::to_string(entries.size()));
    }
    data_ = Eigen::Map<const DenseRowMajor>(entries.data(), to_index(rows, "rows"),
                                            to_index(cols, "cols"));
    validate();
  }

  /// Takes any Eigen expression; evaluates it once.
  template <typename Derived>
  explicit Matrix(const Eigen::MatrixBase<Derived>& expr) : data_(expr) {
    validate();
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> entries;
    entries.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      entries.insert(entries.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(entries));
  }

  static Matrix identity(std::size_t n) {
    const auto k = to_index(n, "rows");
    return Matrix(DenseRowMajor::Identity(k, k));
  }

  std::size_t rows() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(data_.cols()); }
  std::string shape() const { return shape_string(rows(), cols()); }

  double operator()(std::size_t i, std::size_t j) const {
    return data_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  std::span<const double> entries() const noexcept {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  const DenseRowMajor& eigen() const noexcept { return data_; }

  Matrix transpose() const { return Matrix(data_.transpose()); }

  bool operator==(const Matrix& other) const {
    return data_.rows() == other.data_.rows() && data_.cols() == other.data_.cols() &&
           data_ == other.data_;
  }

 private:
  static Eigen::Index to_index(std::size_t n, const char* what) {
    if (n == 0) throw ShapeError(std::string("matrix ") + what + " must be positive");
    return static_cast<Eigen::Index>(n);
  }

  void validate() const {
    if (data_.rows() == 0 || data_.cols() == 0) {
      throw ShapeError("matrix dimensions must be positive, got " +
                       shape_string(rows(), cols()));
    }
    if (!data_.allFinite()) throw ValidationError("matrix entries must be finite");
  }

  DenseRowMajor data_;
};

inline Matrix operator*(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw ShapeError("cannot multiply " + lhs.shape() + " by " + rhs.shape());
  }
  return Matrix(lhs.eigen() * rhs.eigen());
}

inline Matrix operator+(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.rows() != rhs.rows() || lhs.cols() != rhs.cols()) {
    throw ShapeError("cannot add " + lhs.shape() + " and " + rhs.shape());
  }
  return Matrix(lhs.eigen() + rhs.eigen());
}

inline Matrix operator-(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.rows() != rhs.rows() || lhs.cols() != rhs.cols()) {
    throw ShapeError("cannot subtract " + rhs.shape() + " from " + lhs.shape());
  }
  return Matrix(lhs.eigen() - rhs.eigen());
}

inline Matrix operator*(double s, const Matrix& m) { return Matrix(s * m.eigen()); }

inline double frob_norm(const Matrix& m) { return m.eigen().norm(); }

/// Factored update scale * up * down, with up m x r and down r x n.
///
/// The rank bound r <= min(m, n) is deliberately not enforced: merged updates
/// are block concatenations of rank r_s + r_c and may exceed it on small
/// layers while still describing the same dense matrix.
class LowRankUpdate {
 public:
  LowRankUpdate(Matrix up, Matrix down, double scale = 1.0)
      : up_(std::move(up)), down_(std::move(down)), scale_(scale) {
    if (up_.cols() != down_.rows()) {
      throw ShapeError("up factor " + up_.shape() + " does not conform with down factor " +
                       down_.shape());
    }
    if (!std::isfinite(scale_) || scale_ < 0.0) {
      throw ValidationError("update scale must be finite and non-negative, got " +
                            std::to_string(scale_));
    }
  }

  const Matrix& up() const noexcept { return up_; }
  const Matrix& down() const noexcept { return down_; }
  double scale() const noexcept { return scale_; }
  std::size_t rank() const noexcept { return up_.cols(); }
  std::size_t rows() const noexcept { return up_.rows(); }
  std::size_t cols() const noexcept { return down_.cols(); }
  std::string shape() const { return shape_string(rows(), cols()); }

  /// Same dense update with the scale multiplied into the up factor. Returns
  /// an exact copy when the scale is already 1.
  LowRankUpdate folded() const {
    if (scale_ == 1.0) return *this;
    return LowRankUpdate(Matrix(scale_ * up_.eigen()), down_, 1.0);
  }

 private:
  Matrix up_;
  Matrix down_;
  double scale_;
};

inline Matrix dense(const LowRankUpdate& u) {
  return Matrix(u.scale() * (u.up().eigen() * u.down().eigen()));
}

/// Flip signs so the largest-magnitude entry of `vec` is non-negative.
/// Returns true when a flip happened. Ties resolve to the first index.
template <typename Vec>
bool canonicalize_sign(Vec&& vec) {
  Eigen::Index idx = 0;
  vec.cwiseAbs().maxCoeff(&idx);
  if (vec(idx) < 0.0) {
    vec = -vec;
    return true;
  }
  return false;
}

struct ThinSvd {
  Matrix u;                   // m x p
  std::vector<double> sigma;  // p, non-increasing
  Matrix vt;                  // p x n
};

/// Singular values with right singular vectors only; skips U.
struct RightSingular {
  std::vector<double> sigma;
  Matrix vt;
};

struct SvdOptions {
  /// Keep at most this many leading triplets. Truncation happens after the
  /// full thin decomposition.
  std::optional<std::size_t> rank_cap;
};

namespace detail {

inline std::size_t truncated_count(std::size_t p, const SvdOptions& opts) {
  if (opts.rank_cap) {
    if (*opts.rank_cap == 0) throw ValidationError("SVD rank cap must be positive");
    return std::min(p, *opts.rank_cap);
  }
  return p;
}

template <typename Svd>
void check_svd(const Svd& svd) {
  if (svd.info() != Eigen::Success) {
    throw ConvergenceError("singular value decomposition did not converge");
  }
}

}  // namespace detail

inline ThinSvd thin_svd(const Matrix& m, const SvdOptions& opts = {}) {
  const auto rows = static_cast<Eigen::Index>(m.rows());
  const auto cols = static_cast<Eigen::Index>(m.cols());
  const auto p = std::min(rows, cols);
  const auto keep = static_cast<Eigen::Index>(detail::truncated_count(static_cast<std::size_t>(p), opts));

  if (m.eigen().isZero(0.0)) {
    return ThinSvd{Matrix(Eigen::MatrixXd::Identity(rows, keep)),
                   std::vector<double>(static_cast<std::size_t>(keep), 0.0),
                   Matrix(Eigen::MatrixXd::Identity(keep, cols))};
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(m.eigen(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  detail::check_svd(svd);

  Eigen::MatrixXd u = svd.matrixU().leftCols(keep);
  Eigen::MatrixXd v = svd.matrixV().leftCols(keep);
  for (Eigen::Index i = 0; i < keep; ++i) {
    if (canonicalize_sign(v.col(i))) u.col(i) = -u.col(i);
  }
  const auto& s = svd.singularValues();
  return ThinSvd{Matrix(u), std::vector<double>(s.data(), s.data() + keep),
                 Matrix(v.transpose())};
}

inline RightSingular right_singular(const Matrix& m, const SvdOptions& opts = {}) {
  const auto rows = static_cast<Eigen::Index>(m.rows());
  const auto cols = static_cast<Eigen::Index>(m.cols());
  const auto p = std::min(rows, cols);
  const auto keep = static_cast<Eigen::Index>(detail::truncated_count(static_cast<std::size_t>(p), opts));

  if (m.eigen().isZero(0.0)) {
    return RightSingular{std::vector<double>(static_cast<std::size_t>(keep), 0.0),
                         Matrix(Eigen::MatrixXd::Identity(keep, cols))};
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(m.eigen(), Eigen::ComputeThinV);
  detail::check_svd(svd);
  Eigen::MatrixXd v = svd.matrixV().leftCols(keep);
  for (Eigen::Index i = 0; i < keep; ++i) canonicalize_sign(v.col(i));
  const auto& s = svd.singularValues();
  return RightSingular{std::vector<double>(s.data(), s.data() + keep), Matrix(v.transpose())};
}

/// Number of singular values above rel_tol * sigma_max. Zero for an all-zero
/// spectrum.
inline std::size_t numerical_rank(std::span<const double> sigma, double rel_tol = 1e-10) {
  if (sigma.empty()) return 0;
  const double top = *std::max_element(sigma.begin(), sigma.end());
  if (top <= 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > rel_tol * top; }));
}

struct ThinQr {
  Matrix q;      // n x r, orthonormal columns
  Matrix r_mat;  // r x r, upper triangular
};

struct QrOptions {
  /// |R_ii| below this fraction of max |R_jj| is reported as rank deficiency.
  double rank_tolerance = 1e-12;
  bool check_rank = true;
};

inline ThinQr thin_qr(const Matrix& m, const QrOptions& opts = {}) {
  const auto rows = static_cast<Eigen::Index>(m.rows());
  const auto cols = static_cast<Eigen::Index>(m.cols());
  if (opts.check_rank && cols > rows) {
    throw RankDeficientError(m.rows(), "thin QR of " + m.shape() +
                                           " input cannot have full column rank; column " +
                                           std::to_string(m.rows()) + " is dependent");
  }
  const auto keep = std::min(rows, cols);

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m.eigen());
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, keep);
  Eigen::MatrixXd r = qr.matrixQR().topRows(keep).triangularView<Eigen::Upper>();

  if (opts.check_rank) {
    const double max_diag = r.diagonal().cwiseAbs().maxCoeff();
    for (Eigen::Index j = 0; j < keep; ++j) {
      if (!(std::abs(r(j, j)) >= opts.rank_tolerance * max_diag) || max_diag == 0.0) {
        throw RankDeficientError(static_cast<std::size_t>(j),
                                 "input " + m.shape() + " is rank deficient at column " +
                                     std::to_string(j));
      }
    }
  }

  for (Eigen::Index j = 0; j < keep; ++j) {
    if (canonicalize_sign(q.col(j))) r.row(j) = -r.row(j);
  }
  return ThinQr{Matrix(q), Matrix(r)};
}

/// Exact thin SVD of scale * up * down without materializing the dense
/// m x n product: QR of both factors, then an r x r SVD of the core.
inline ThinSvd thin_svd_factored(const LowRankUpdate& u) {
  const QrOptions unchecked{.rank_tolerance = 0.0, .check_rank = false};
  const ThinQr left = thin_qr(u.up(), unchecked);
  const ThinQr right = thin_qr(u.down().transpose(), unchecked);
  const Matrix core(u.scale() * (left.r_mat.eigen() * right.r_mat.eigen().transpose()));
  const ThinSvd small = thin_svd(core);

  Eigen::MatrixXd uu = left.q.eigen() * small.u.eigen();
  Eigen::MatrixXd vv = right.q.eigen() * small.vt.eigen().transpose();
  const Eigen::Index p = static_cast<Eigen::Index>(small.sigma.size());
  for (Eigen::Index i = 0; i < p; ++i) {
    if (canonicalize_sign(vv.col(i))) uu.col(i) = -uu.col(i);
  }
  return ThinSvd{Matrix(uu), small.sigma, Matrix(vv.transpose())};
}

/// Frobenius distance between the orthogonal projectors onto the column spans
/// of two orthonormal bases, computed without forming n x n matrices:
/// ||P1 - P2||^2 = ||(I - P2) V1||^2 + ||(I - P1) V2||^2.
inline double projector_distance(const Matrix& basis_a, const Matrix& basis_b) {
  if (basis_a.rows() != basis_b.rows()) {
    throw ShapeError("bases live in different spaces: " + basis_a.shape() + " vs " +
                     basis_b.shape());
  }
  const auto& a = basis_a.eigen();
  const auto& b = basis_b.eigen();
  const double ra = (a - b * (b.transpose() * a)).squaredNorm();
  const double rb = (b - a * (a.transpose() * b)).squaredNorm();
  return std::sqrt(ra + rb);
}

}  // namespace nullfuse
