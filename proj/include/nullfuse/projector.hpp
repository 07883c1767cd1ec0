#pragma once

// Style subspace construction and the null-space projections applied to a
// content update. All projectors act on the right of the update (input
// space), and only the down factor is touched, so nothing here costs more
// than O(n r k).

#include <charconv>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nullfuse/error.hpp"
#include "nullfuse/linalg.hpp"

namespace nullfuse {

/// Either "full" (every direction of the source adapter) or an explicit top-k.
class RankSelection {
 public:
  static RankSelection full() { return RankSelection(std::nullopt); }

  static RankSelection top(std::size_t k) {
    if (k == 0) throw ValidationError("subspace rank k must be at least 1");
    return RankSelection(k);
  }

  /// Accepts "full" or a positive integer.
  static RankSelection parse(std::string_view text) {
    if (text == "full") return full();
    std::size_t k = 0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, k);
    if (ec != std::errc{} || ptr != end) {
      throw ValidationError("subspace rank must be 'full' or a positive integer, got '" +
                            std::string(text) + "'");
    }
    return top(k);
  }

  bool is_full() const noexcept { return !k_; }
  std::optional<std::size_t> k() const noexcept { return k_; }

  std::size_t resolve(std::size_t source_rank) const {
    if (!k_) return source_rank;
    if (*k_ > source_rank) {
      throw ValidationError("requested subspace rank " + std::to_string(*k_) +
                            " exceeds the style adapter rank " + std::to_string(source_rank));
    }
    return *k_;
  }

  std::string to_string() const { return k_ ? std::to_string(*k_) : std::string("full"); }

  bool operator==(const RankSelection&) const = default;

 private:
  explicit RankSelection(std::optional<std::size_t> k) : k_(k) {}
  std::optional<std::size_t> k_;
};

enum class BasisMethod { svd, qr };

inline std::string_view to_string(BasisMethod m) { return m == BasisMethod::svd ? "svd" : "qr"; }

/// Orthonormal n x k basis of the style adapter's principal right-singular
/// subspace.
class StyleSubspace {
 public:
  StyleSubspace(Matrix basis, std::vector<double> singular_values, std::size_t source_rank,
                BasisMethod method)
      : basis_(std::move(basis)),
        singular_values_(std::move(singular_values)),
        source_rank_(source_rank),
        method_(method) {
    const std::size_t k = basis_.cols();
    if (k > source_rank_) {
      throw ValidationError("subspace has " + std::to_string(k) +
                            " directions but the source adapter has rank " +
                            std::to_string(source_rank_));
    }
    const auto& b = basis_.eigen();
    const double drift =
        (b.transpose() * b - Eigen::MatrixXd::Identity(b.cols(), b.cols())).norm();
    if (!(drift <= 1e-10)) {
      throw ValidationError("subspace basis is not orthonormal (||B^T B - I||_F = " +
                            std::to_string(drift) + ")");
    }
    if (method_ == BasisMethod::svd) {
      if (singular_values_.size() != k) {
        throw ValidationError("svd subspace needs one singular value per direction");
      }
      for (std::size_t i = 1; i < k; ++i) {
        if (singular_values_[i] > singular_values_[i - 1]) {
          throw ValidationError("singular values must be non-increasing");
        }
      }
    }
  }

  const Matrix& basis() const noexcept { return basis_; }
  const std::vector<double>& singular_values() const noexcept { return singular_values_; }
  std::size_t source_rank() const noexcept { return source_rank_; }
  BasisMethod method() const noexcept { return method_; }
  std::size_t dim() const noexcept { return basis_.rows(); }
  std::size_t k() const noexcept { return basis_.cols(); }

 private:
  Matrix basis_;
  std::vector<double> singular_values_;
  std::size_t source_rank_;
  BasisMethod method_;
};

/// How the SVD path obtains right singular vectors of the style update.
enum class SvdRoute {
  dense,     // materialize scale * B * A and decompose it (reference path)
  factored,  // exact SVD through QR of both factors and an r x r core
};

struct SubspaceOptions {
  SvdRoute route = SvdRoute::dense;
  /// Singular values below this fraction of sigma_1 count as zero.
  double rank_tolerance = 1e-10;
};

inline StyleSubspace subspace_svd(const LowRankUpdate& style, const RankSelection& k,
                                  const SubspaceOptions& opts = {}) {
  const std::size_t want = k.resolve(style.rank());
  std::vector<double> sigma;
  Eigen::MatrixXd v;
  if (opts.route == SvdRoute::dense) {
    RightSingular rs = right_singular(dense(style), SvdOptions{.rank_cap = style.rank()});
    sigma = std::move(rs.sigma);
    v = rs.vt.eigen().transpose();
  } else {
    ThinSvd svd = thin_svd_factored(style);
    sigma = std::move(svd.sigma);
    v = svd.vt.eigen().transpose();
  }

  const std::size_t available = numerical_rank(sigma, opts.rank_tolerance);
  if (want > available) {
    throw ValidationError("requested subspace rank " + std::to_string(want) +
                          " exceeds the numerical rank " + std::to_string(available) +
                          " of the style update");
  }
  sigma.resize(want);
  return StyleSubspace(Matrix(v.leftCols(static_cast<Eigen::Index>(want))), std::move(sigma),
                       style.rank(), BasisMethod::svd);
}

/// Basis of span(A^T) from a thin QR of the transposed down factor. Assumes the
/// up factor has full column rank, as trained adapters do; the basis is
/// unordered, so only k = full (or k equal to the rank) is accepted.
inline StyleSubspace subspace_qr(const LowRankUpdate& style, const RankSelection& k) {
  if (!k.is_full() && *k.k() != style.rank()) {
    throw ValidationError("the QR path spans the full style row space and cannot select the "
                          "top " + std::to_string(*k.k()) + " of " +
                          std::to_string(style.rank()) +
                          " directions; use the SVD path for a strict top-k subspace");
  }
  if (style.scale() == 0.0) {
    throw ValidationError("style update has zero scale; its subspace is undefined");
  }
  ThinQr qr = thin_qr(style.down().transpose());
  return StyleSubspace(std::move(qr.q), {}, style.rank(), BasisMethod::qr);
}

namespace detail {

inline void check_conforms(const LowRankUpdate& update, const StyleSubspace& sub) {
  if (update.cols() != sub.dim()) {
    throw ShapeError("update of shape " + update.shape() +
                     " does not act on the subspace's input dimension (basis " +
                     sub.basis().shape() + ")");
  }
}

inline void check_mu(double mu) {
  if (!std::isfinite(mu) || mu < 0.0) {
    throw ValidationError("soft projection strength mu must be finite and >= 0, got " +
                          std::to_string(mu));
  }
}

// down - factor * (down V) V^T
inline Matrix shrink_down(const Matrix& down, const Matrix& basis, double factor) {
  const auto& a = down.eigen();
  const auto& v = basis.eigen();
  return Matrix(a - factor * ((a * v) * v.transpose()));
}

}  // namespace detail

/// ΔW_c (I - V V^T), applied to the down factor only.
inline LowRankUpdate hard_project(const LowRankUpdate& content, const StyleSubspace& sub) {
  detail::check_conforms(content, sub);
  return LowRankUpdate(content.up(), detail::shrink_down(content.down(), sub.basis(), 1.0),
                       content.scale());
}

/// ΔW_c (I - mu/(1+mu) V V^T): the in-subspace part is scaled by 1/(1+mu).
inline LowRankUpdate soft_project(const LowRankUpdate& content, const StyleSubspace& sub,
                                  double mu) {
  detail::check_mu(mu);
  detail::check_conforms(content, sub);
  if (mu == 0.0) return content;
  return LowRankUpdate(content.up(),
                       detail::shrink_down(content.down(), sub.basis(), mu / (1.0 + mu)),
                       content.scale());
}

/// (I + mu V V^T)^{-1} in closed form, n x n.
inline Matrix woodbury_inverse(const StyleSubspace& sub, double mu) {
  detail::check_mu(mu);
  const auto& v = sub.basis().eigen();
  const auto n = v.rows();
  Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(n, n);
  inv.noalias() -= (mu / (1.0 + mu)) * (v * v.transpose());
  return Matrix(inv);
}

/// I - V V^T, n x n. Diagnostic use only; the projections never form it.
inline Matrix null_space_projector(const StyleSubspace& sub) {
  const auto& v = sub.basis().eigen();
  const auto n = v.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(n, n);
  p.noalias() -= v * v.transpose();
  return Matrix(p);
}

/// ||dense(update) V||_F^2, the update's energy inside the style subspace.
inline double interference_energy(const LowRankUpdate& update, const StyleSubspace& sub) {
  detail::check_conforms(update, sub);
  const Eigen::MatrixXd inside = update.down().eigen() * sub.basis().eigen();
  return (update.scale() * (update.up().eigen() * inside)).squaredNorm();
}

enum class MergeMode { direct, hard, soft };

inline std::string_view to_string(MergeMode mode) {
  switch (mode) {
    case MergeMode::direct: return "direct";
    case MergeMode::hard: return "hard";
    case MergeMode::soft: return "soft";
  }
  return "unknown";
}

inline MergeMode parse_merge_mode(std::string_view text) {
  if (text == "direct") return MergeMode::direct;
  if (text == "hard") return MergeMode::hard;
  if (text == "soft") return MergeMode::soft;
  throw ValidationError("unknown merge mode '" + std::string(text) +
                        "' (expected direct, hard or soft)");
}

/// Which subspace construction a merge uses. `automatic` takes the QR fast
/// path for k = full and the factored SVD otherwise.
enum class BasisChoice { automatic, svd, qr };

inline std::string_view to_string(BasisChoice b) {
  switch (b) {
    case BasisChoice::automatic: return "auto";
    case BasisChoice::svd: return "svd";
    case BasisChoice::qr: return "qr";
  }
  return "unknown";
}

inline BasisChoice parse_basis_choice(std::string_view text) {
  if (text == "auto") return BasisChoice::automatic;
  if (text == "svd") return BasisChoice::svd;
  if (text == "qr") return BasisChoice::qr;
  throw ValidationError("unknown basis method '" + std::string(text) +
                        "' (expected auto, svd or qr)");
}

struct ProjectionConfig {
  MergeMode mode = MergeMode::soft;
  double mu = 0.5;
  RankSelection k = RankSelection::full();
  double a = 1.0;  // content weight, direct mode only
  double b = 1.0;  // style weight, direct mode only
  BasisChoice basis = BasisChoice::automatic;
  SvdRoute svd_route = SvdRoute::factored;

  void validate() const {
    if (mode == MergeMode::soft) detail::check_mu(mu);
    if (mode == MergeMode::direct && (!std::isfinite(a) || !std::isfinite(b))) {
      throw ValidationError("direct merge weights must be finite");
    }
    if (mode != MergeMode::direct && basis == BasisChoice::qr && !k.is_full()) {
      throw ValidationError("the QR basis requires k = full; use --basis svd for top-k");
    }
  }
};

/// Style subspace for a config; the QR route is used only when k is full.
inline StyleSubspace build_subspace(const LowRankUpdate& style, const ProjectionConfig& cfg) {
  const bool use_qr = cfg.basis == BasisChoice::qr ||
                      (cfg.basis == BasisChoice::automatic && cfg.k.is_full());
  if (use_qr) return subspace_qr(style, cfg.k);
  return subspace_svd(style, cfg.k, SubspaceOptions{.route = cfg.svd_route});
}

/// Projection of the content update selected by cfg.mode (direct leaves it alone).
inline LowRankUpdate project(const LowRankUpdate& content, const StyleSubspace& sub,
                             const ProjectionConfig& cfg) {
  switch (cfg.mode) {
    case MergeMode::direct: return content;
    case MergeMode::hard: return hard_project(content, sub);
    case MergeMode::soft: return soft_project(content, sub, cfg.mu);
  }
  return content;
}

}  // namespace nullfuse
