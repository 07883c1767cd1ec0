#pragma once

// Seeded invariant suite for the projection algebra. Each check runs over
// `trials` random content/style pairs and records the worst observed value
// against its tolerance.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/LU>

#include "nullfuse/fusion.hpp"
#include "nullfuse/linalg.hpp"
#include "nullfuse/projector.hpp"
#include "nullfuse/random.hpp"

namespace nullfuse {

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t m = 0;  // 0: same as n
  std::size_t n = 64;
  std::size_t rank = 8;
  std::size_t trials = 10;
  /// Negative control: reflect every projection correction so the suite must fail.
  bool inject_fault = false;
};

struct CheckResult {
  std::string name;
  double worst = 0.0;
  double tolerance = 0.0;
  std::size_t trials = 0;
  std::optional<std::uint64_t> failing_seed;

  bool passed() const { return !failing_seed; }
};

inline constexpr std::array<double, 4> kMuGrid{0.1, 0.5, 1.0, 10.0};

namespace detail {

inline std::uint64_t instance_seed(std::uint64_t base, std::size_t trial, std::uint64_t salt) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (trial + 1) + salt;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class CheckAccumulator {
 public:
  CheckAccumulator(std::string name, double tolerance) {
    result_.name = std::move(name);
    result_.tolerance = tolerance;
  }

  void record(double value, std::uint64_t seed) {
    if (!(value <= result_.tolerance) && !result_.failing_seed) result_.failing_seed = seed;
    if (std::isnan(value) || value > result_.worst) result_.worst = value;
  }

  void next_trial() { ++result_.trials; }
  CheckResult done() { return result_; }

 private:
  CheckResult result_;
};

// ||P P - P||_F for P = I - V V^T without forming n x n matrices:
// P P - P = V (G - I) V^T with G = V^T V.
inline double idempotence_defect(const Matrix& basis) {
  const auto& v = basis.eigen();
  const Eigen::MatrixXd g = v.transpose() * v;
  const Eigen::MatrixXd e = g - Eigen::MatrixXd::Identity(g.rows(), g.cols());
  return std::sqrt(std::max(0.0, (g * e * g * e).trace()));
}

}  // namespace detail

/// Runs every check. `fault` reflects projection corrections when
/// opts.inject_fault is set; the library calls themselves are untouched.
inline std::vector<CheckResult> run_verify(const VerifyOptions& opts) {
  if (opts.n == 0 || opts.rank == 0 || opts.trials == 0) {
    throw ValidationError("verify needs positive n, rank and trials");
  }
  const std::size_t m = opts.m == 0 ? opts.n : opts.m;
  if (opts.rank > std::min(m, opts.n)) {
    throw ValidationError("verify rank must not exceed min(m, n)");
  }

  auto fault_update = [&](const LowRankUpdate& original, const LowRankUpdate& projected) {
    if (!opts.inject_fault) return projected;
    return LowRankUpdate(projected.up(),
                         Matrix(2.0 * original.down().eigen() - projected.down().eigen()),
                         projected.scale());
  };
  auto fault_matrix = [&](const Matrix& w) {
    if (!opts.inject_fault) return w;
    return Matrix(2.0 * Eigen::MatrixXd::Identity(w.rows(), w.cols()) - w.eigen());
  };

  detail::CheckAccumulator idempotence("projector_idempotence", 1e-10);
  detail::CheckAccumulator woodbury("woodbury_vs_dense", 1e-10);
  detail::CheckAccumulator equivalence("svd_qr_equivalence", 1e-8);
  detail::CheckAccumulator soft_zero("soft_limit_mu0", 0.0);
  detail::CheckAccumulator soft_inf("soft_limit_hard", 1e-6);
  detail::CheckAccumulator attenuation("attenuation_law", 1e-9);
  detail::CheckAccumulator complement("complement_preserved", 1e-10);
  detail::CheckAccumulator exclusivity("hard_exclusivity", 1e-8);
  detail::CheckAccumulator factored("factored_vs_dense", 1e-10);

  const std::size_t woodbury_n = std::min<std::size_t>(opts.n, 256);

  for (std::size_t t = 0; t < opts.trials; ++t) {
    const std::uint64_t seed = detail::instance_seed(opts.seed, t, 0);
    const LowRankUpdate content =
        random_update(m, opts.n, opts.rank, detail::instance_seed(opts.seed, t, 1));
    const LowRankUpdate style =
        random_update(m, opts.n, opts.rank, detail::instance_seed(opts.seed, t, 2));
    const StyleSubspace svd_sub = subspace_svd(style, RankSelection::full());
    const StyleSubspace qr_sub = subspace_qr(style, RankSelection::full());
    const auto& v = svd_sub.basis().eigen();
    const Eigen::MatrixXd c_dense = dense(content).eigen();
    const Eigen::MatrixXd s_dense = dense(style).eigen();
    const double c_norm = c_dense.norm();
    auto right_null = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd {
      return x - (x * v) * v.transpose();
    };

    for (auto* acc : {&idempotence, &woodbury, &equivalence, &soft_zero, &soft_inf, &attenuation,
                      &complement, &exclusivity, &factored}) {
      acc->next_trial();
    }

    idempotence.record(detail::idempotence_defect(svd_sub.basis()), seed);
    idempotence.record(detail::idempotence_defect(qr_sub.basis()), seed);

    {
      const LowRankUpdate small_style =
          random_update(woodbury_n, woodbury_n, std::min(opts.rank, woodbury_n),
                        detail::instance_seed(opts.seed, t, 3));
      const StyleSubspace small_sub = subspace_qr(small_style, RankSelection::full());
      const auto& q = small_sub.basis().eigen();
      const auto nn = static_cast<Eigen::Index>(woodbury_n);
      for (const double mu : kMuGrid) {
        const Eigen::MatrixXd system =
            Eigen::MatrixXd::Identity(nn, nn) + mu * (q * q.transpose());
        const Eigen::MatrixXd reference = system.partialPivLu().inverse();
        const Matrix closed = fault_matrix(woodbury_inverse(small_sub, mu));
        woodbury.record((closed.eigen() - reference).norm() / reference.norm(), seed);
      }
    }

    equivalence.record(projector_distance(svd_sub.basis(), qr_sub.basis()), seed);

    const LowRankUpdate hard = fault_update(content, hard_project(content, svd_sub));
    const Eigen::MatrixXd hard_dense = dense(hard).eigen();

    {
      const LowRankUpdate same = fault_update(content, soft_project(content, svd_sub, 0.0));
      soft_zero.record(same.down() == content.down() && same.up() == content.up() ? 0.0 : 1.0,
                       seed);
      const LowRankUpdate near_hard = fault_update(content, soft_project(content, svd_sub, 1e12));
      soft_inf.record((dense(near_hard).eigen() - hard_dense).norm() / c_norm, seed);
    }

    const double energy_before = interference_energy(content, svd_sub);
    for (const double mu : kMuGrid) {
      const LowRankUpdate soft = fault_update(content, soft_project(content, svd_sub, mu));
      const double expected = 1.0 / ((1.0 + mu) * (1.0 + mu));
      const double observed = interference_energy(soft, svd_sub) / energy_before;
      attenuation.record(std::abs(observed - expected) / expected, seed);
      const Eigen::MatrixXd delta = dense(soft).eigen() - c_dense;
      complement.record(right_null(delta).norm() / c_norm, seed);
    }

    exclusivity.record((hard_dense * v).norm() / c_norm, seed);

    {
      const double denom = c_norm + s_dense.norm();
      const MergedUpdate direct = merge_direct(content, style, 0.3, 0.7);
      factored.record((dense(direct).eigen() - (0.3 * c_dense + 0.7 * s_dense)).norm() / denom,
                      seed);

      ProjectionConfig cfg;
      cfg.basis = BasisChoice::svd;
      cfg.svd_route = SvdRoute::dense;
      cfg.mode = MergeMode::hard;
      MergedUpdate merged = merge_np(content, style, cfg);
      LowRankUpdate content_part = fault_update(
          content, LowRankUpdate(Matrix(merged.update.up().eigen().rightCols(opts.rank)),
                                 Matrix(merged.update.down().eigen().bottomRows(opts.rank))));
      Eigen::MatrixXd observed = s_dense + dense(content_part).eigen();
      factored.record((observed - (s_dense + right_null(c_dense))).norm() / denom, seed);

      for (const double mu : kMuGrid) {
        cfg.mode = MergeMode::soft;
        cfg.mu = mu;
        merged = merge_np(content, style, cfg);
        content_part = fault_update(
            content, LowRankUpdate(Matrix(merged.update.up().eigen().rightCols(opts.rank)),
                                   Matrix(merged.update.down().eigen().bottomRows(opts.rank))));
        observed = s_dense + dense(content_part).eigen();
        const Eigen::MatrixXd reference =
            s_dense + c_dense - (mu / (1.0 + mu)) * ((c_dense * v) * v.transpose());
        factored.record((observed - reference).norm() / denom, seed);
      }
    }
  }

  return {idempotence.done(), woodbury.done(), equivalence.done(), soft_zero.done(),
          soft_inf.done(),    attenuation.done(), complement.done(), exclusivity.done(),
          factored.done()};
}

}  // namespace nullfuse
