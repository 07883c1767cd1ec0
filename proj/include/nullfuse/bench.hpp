#pragma once

// Wall-clock comparison of style-subspace construction: dense SVD of the
// materialized update vs thin QR of the transposed down factor (plus the
// factored exact SVD for reference).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <vector>

#include "nullfuse/linalg.hpp"
#include "nullfuse/projector.hpp"
#include "nullfuse/random.hpp"

namespace nullfuse {

struct BenchOptions {
  std::size_t m = 4096;
  std::size_t n = 4096;
  std::size_t rank = 8;
  std::size_t repeats = 1;  // dense-SVD repetitions
  std::uint64_t seed = 0;
  /// QR timings are repeated until at least this much time has accumulated.
  double min_fast_seconds = 0.05;
};

struct BenchResult {
  std::size_t m = 0, n = 0, rank = 0;
  double svd_seconds = 0.0;           // median, dense route
  double qr_seconds = 0.0;            // median
  double factored_svd_seconds = 0.0;  // median
  std::size_t svd_runs = 0, qr_runs = 0, factored_runs = 0;
  double speedup = 0.0;               // svd_seconds / qr_seconds
  double projector_distance = 0.0;    // between the SVD and QR bases
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

template <typename Fn>
std::vector<double> time_runs(Fn&& fn, std::size_t min_runs, double min_total) {
  std::vector<double> samples;
  double total = 0.0;
  while (samples.size() < min_runs || total < min_total) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    samples.push_back(dt.count());
    total += dt.count();
  }
  return samples;
}

}  // namespace detail

inline BenchResult run_bench(const BenchOptions& opts) {
  if (opts.m == 0 || opts.n == 0 || opts.rank == 0) {
    throw ValidationError("bench dimensions and rank must be positive");
  }
  if (opts.rank > std::min(opts.m, opts.n)) {
    throw ValidationError("bench rank must not exceed min(m, n)");
  }
  const LowRankUpdate style = random_update(opts.m, opts.n, opts.rank, opts.seed);

  std::optional<StyleSubspace> svd_sub, qr_sub;
  const auto svd_times = detail::time_runs(
      [&] { svd_sub.emplace(subspace_svd(style, RankSelection::full())); },
      std::max<std::size_t>(1, opts.repeats), 0.0);
  const auto qr_times = detail::time_runs(
      [&] { qr_sub.emplace(subspace_qr(style, RankSelection::full())); },
      std::max<std::size_t>(3, opts.repeats), opts.min_fast_seconds);
  const auto factored_times = detail::time_runs(
      [&] {
        subspace_svd(style, RankSelection::full(), SubspaceOptions{.route = SvdRoute::factored});
      },
      std::max<std::size_t>(3, opts.repeats), opts.min_fast_seconds);

  BenchResult r;
  r.m = opts.m;
  r.n = opts.n;
  r.rank = opts.rank;
  r.svd_seconds = detail::median(svd_times);
  r.qr_seconds = detail::median(qr_times);
  r.factored_svd_seconds = detail::median(factored_times);
  r.svd_runs = svd_times.size();
  r.qr_runs = qr_times.size();
  r.factored_runs = factored_times.size();
  r.speedup = r.svd_seconds / r.qr_seconds;
  r.projector_distance = projector_distance(svd_sub->basis(), qr_sub->basis());
  return r;
}

}  // namespace nullfuse
