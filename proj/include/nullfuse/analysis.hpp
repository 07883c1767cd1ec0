#pragma once

// Diagnostics on adapters: singular spectra, principal-direction
// perturbation, interference energies before/after projection, the
// colinearity obstruction for weighted merges, and V-space vs U-space
// projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nullfuse/error.hpp"
#include "nullfuse/fusion.hpp"
#include "nullfuse/linalg.hpp"
#include "nullfuse/projector.hpp"
#include "nullfuse/random.hpp"

namespace nullfuse {

struct SpectrumReport {
  std::string layer_key;
  std::vector<double> singular_values;
  std::vector<double> energy_fractions;  // cumulative sigma_i^2 / sum sigma^2
  bool degenerate = false;               // all-zero spectrum
};

inline SpectrumReport spectrum(const LowRankUpdate& update, std::string layer_key = {}) {
  SpectrumReport out;
  out.layer_key = std::move(layer_key);
  out.singular_values = thin_svd_factored(update).sigma;
  out.singular_values.resize(std::min(out.singular_values.size(), update.rank()));

  double total = 0.0;
  for (const double s : out.singular_values) total += s * s;
  out.degenerate = total == 0.0;
  out.energy_fractions.reserve(out.singular_values.size());
  double running = 0.0;
  for (const double s : out.singular_values) {
    running += s * s;
    out.energy_fractions.push_back(out.degenerate ? 0.0 : running / total);
  }
  if (!out.degenerate && !out.energy_fractions.empty()) out.energy_fractions.back() = 1.0;
  return out;
}

struct PerturbOptions {
  std::uint64_t seed = 0;
};

/// Rebuilds the update from its SVD with, for each selected direction i,
/// sigma_i -> sigma_i (1 + epsilon * eta) and v_i rotated by angle epsilon
/// towards a seeded random unit vector orthogonal to every right singular
/// vector. eta is one seeded sign shared by all selected directions, so the
/// relative magnitude of the perturbation is the same for each of them.
/// Unselected directions keep their SVD factors bit-for-bit.
inline LowRankUpdate perturb_directions(const LowRankUpdate& update,
                                        const std::set<std::size_t>& indices, double epsilon,
                                        const PerturbOptions& opts = {}) {
  if (!std::isfinite(epsilon) || epsilon < 0.0) {
    throw ValidationError("perturbation epsilon must be finite and >= 0");
  }
  const ThinSvd svd = thin_svd_factored(update);
  const std::size_t r = svd.sigma.size();
  for (const auto i : indices) {
    if (i >= r) {
      throw ValidationError("direction index " + std::to_string(i) + " out of range [0, " +
                            std::to_string(r) + ")");
    }
  }

  const auto n = static_cast<Eigen::Index>(update.cols());
  const auto t = static_cast<Eigen::Index>(indices.size());
  Eigen::MatrixXd v = svd.vt.eigen().transpose();  // n x r
  Eigen::MatrixXd up = svd.u.eigen();
  for (std::size_t j = 0; j < r; ++j) up.col(static_cast<Eigen::Index>(j)) *= svd.sigma[j];

  if (t > 0) {
    if (n - static_cast<Eigen::Index>(r) < t) {
      throw ValidationError("input dimension " + std::to_string(n) + " leaves no room to rotate " +
                            std::to_string(t) + " directions outside a rank-" +
                            std::to_string(r) + " subspace");
    }
    GaussianStream rng(opts.seed);
    const double eta = (rng.bits() & 1u) ? 1.0 : -1.0;
    Eigen::MatrixXd g = random_matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(t), rng).eigen();
    for (int pass = 0; pass < 2; ++pass) g -= v * (v.transpose() * g);
    Eigen::MatrixXd w = thin_qr(Matrix(g)).q.eigen();
    w -= v * (v.transpose() * w);
    w.colwise().normalize();

    Eigen::Index col = 0;
    const Eigen::MatrixXd v_orig = v;
    for (const auto i : indices) {
      const auto ii = static_cast<Eigen::Index>(i);
      v.col(ii) = std::cos(epsilon) * v_orig.col(ii) + std::sin(epsilon) * w.col(col++);
      up.col(ii) = svd.u.eigen().col(ii) * (svd.sigma[i] * (1.0 + epsilon * eta));
    }
  }
  return LowRankUpdate(Matrix(up), Matrix(v.transpose()), 1.0);
}

/// Relative residual of the best fit of ΔW_c P by alpha * ΔW_s over vectorized
/// matrices, with P the projector onto the top-k right singular subspace of
/// the style update. 0 means colinear; an (effectively) zero ΔW_c P, below
/// 1e-12 of ||ΔW_c||, is also reported as 0 since there is nothing to fit.
inline double colinearity_test(const LowRankUpdate& content, const LowRankUpdate& style,
                               const RankSelection& k = RankSelection::full()) {
  detail::check_same_shape(content, style);
  const Matrix style_dense = dense(style);
  if (frob_norm(style_dense) == 0.0) {
    throw ValidationError("style update is zero; colinearity direction is undefined");
  }
  const StyleSubspace sub =
      subspace_svd(style, k, SubspaceOptions{.route = SvdRoute::factored});
  const auto& v = sub.basis().eigen();
  const Eigen::MatrixXd content_dense = dense(content).eigen();
  const Eigen::MatrixXd x = (content_dense * v) * v.transpose();
  const double x_norm = x.norm();
  if (x_norm <= 1e-12 * content_dense.norm()) return 0.0;

  const auto& y = style_dense.eigen();
  const double alpha = x.cwiseProduct(y).sum() / y.squaredNorm();
  return (x - alpha * y).norm() / x_norm;
}

struct InterferenceReport {
  std::string layer_key;
  std::string projection;  // "right" (V-space), "left" (U-space) or "none"
  double content_energy_in_style_subspace = 0.0;
  double content_total_energy = 0.0;
  double ratio = 0.0;
  double post_merge_residual = 0.0;

  /// post / pre in-subspace energy; 0 when the content never entered the subspace.
  double attenuation() const {
    return content_energy_in_style_subspace > 0.0
               ? post_merge_residual / content_energy_in_style_subspace
               : 0.0;
  }
};

namespace detail {

inline InterferenceReport make_report(std::string key, std::string projection,
                                      const LowRankUpdate& content, const LowRankUpdate& projected,
                                      const StyleSubspace& sub) {
  InterferenceReport r;
  r.layer_key = std::move(key);
  r.projection = std::move(projection);
  r.content_energy_in_style_subspace = interference_energy(content, sub);
  r.content_total_energy = dense(content).eigen().squaredNorm();
  r.ratio = r.content_total_energy > 0.0
                ? std::min(1.0, r.content_energy_in_style_subspace / r.content_total_energy)
                : 0.0;
  r.post_merge_residual = interference_energy(projected, sub);
  return r;
}

inline double shrink_factor(const ProjectionConfig& cfg) {
  switch (cfg.mode) {
    case MergeMode::direct: return 0.0;
    case MergeMode::hard: return 1.0;
    case MergeMode::soft: return cfg.mu / (1.0 + cfg.mu);
  }
  return 0.0;
}

}  // namespace detail

/// In-subspace energy of the content update before and after the projection
/// selected by cfg (direct mode leaves it unchanged).
inline InterferenceReport interference_report(const LowRankUpdate& content,
                                              const LowRankUpdate& style,
                                              const ProjectionConfig& cfg,
                                              std::string layer_key = {}) {
  cfg.validate();
  detail::check_same_shape(content, style);
  const LowRankUpdate c = content.folded();
  const StyleSubspace sub = build_subspace(style.folded(), cfg);
  return detail::make_report(std::move(layer_key),
                             cfg.mode == MergeMode::direct ? "none" : "right", c,
                             project(c, sub, cfg), sub);
}

struct UvComparison {
  InterferenceReport v_space;  // projector on the input side of ΔW_c
  InterferenceReport u_space;  // projector on the output side of ΔW_c
};

/// Applies the cfg projection once with the style's right singular basis V_k
/// (ΔW_c (I - f V V^T)) and once with its left basis U_k ((I - f U U^T) ΔW_c),
/// then measures both results in the right style subspace.
inline UvComparison compare_uv_projection(const LowRankUpdate& content,
                                          const LowRankUpdate& style,
                                          const ProjectionConfig& cfg,
                                          std::string layer_key = {}) {
  cfg.validate();
  detail::check_same_shape(content, style);
  const LowRankUpdate c = content.folded();
  const ThinSvd svd = thin_svd_factored(style.folded());
  const std::size_t k = cfg.k.resolve(style.rank());
  const std::size_t available = numerical_rank(svd.sigma);
  if (k > available) {
    throw ValidationError("requested subspace rank " + std::to_string(k) +
                          " exceeds the numerical rank " + std::to_string(available) +
                          " of the style update");
  }
  const auto kk = static_cast<Eigen::Index>(k);
  const StyleSubspace v_sub(Matrix(svd.vt.eigen().topRows(kk).transpose()),
                            std::vector<double>(svd.sigma.begin(), svd.sigma.begin() + kk),
                            style.rank(), BasisMethod::svd);
  const Eigen::MatrixXd u = svd.u.eigen().leftCols(kk);

  const double f = detail::shrink_factor(cfg);
  const LowRankUpdate v_projected(
      c.up(), detail::shrink_down(c.down(), v_sub.basis(), f), c.scale());
  const auto& b = c.up().eigen();
  const LowRankUpdate u_projected(Matrix(b - f * (u * (u.transpose() * b))), c.down(), c.scale());

  return UvComparison{detail::make_report(layer_key, "right", c, v_projected, v_sub),
                      detail::make_report(layer_key, "left", c, u_projected, v_sub)};
}

}  // namespace nullfuse
