#pragma once

// Merging a content adapter into a style adapter. Results stay factored:
// the merged update is the block concatenation [style | projected content],
// rank r_s + r_c, never re-truncated.

#include <algorithm>
#include <atomic>
#include <exception>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "nullfuse/error.hpp"
#include "nullfuse/linalg.hpp"
#include "nullfuse/lora_io.hpp"
#include "nullfuse/projector.hpp"
#include "nullfuse/version.hpp"

namespace nullfuse {

struct MergedUpdate {
  LowRankUpdate update;  // scale 1; columns [0, style_rank) of up are the style block
  MergeMode provenance;
  std::optional<double> mu_used;
  std::size_t k_used = 0;
  std::size_t style_rank = 0;
  std::size_t content_rank = 0;
};

inline Matrix dense(const MergedUpdate& m) { return dense(m.update); }

namespace detail {

inline void check_same_shape(const LowRankUpdate& content, const LowRankUpdate& style) {
  if (content.rows() != style.rows() || content.cols() != style.cols()) {
    throw ShapeError("content update " + content.shape() + " and style update " +
                     style.shape() + " have different shapes");
  }
}

// [first | second] along columns of up, rows of down.
inline LowRankUpdate concatenate(const LowRankUpdate& first, const LowRankUpdate& second) {
  const auto& u1 = first.up().eigen();
  const auto& u2 = second.up().eigen();
  const auto& d1 = first.down().eigen();
  const auto& d2 = second.down().eigen();
  DenseRowMajor up(u1.rows(), u1.cols() + u2.cols());
  up << u1, u2;
  DenseRowMajor down(d1.rows() + d2.rows(), d1.cols());
  down << d1, d2;
  return LowRankUpdate(Matrix(up), Matrix(down), 1.0);
}

inline LowRankUpdate reweighted(const LowRankUpdate& u, double weight) {
  return LowRankUpdate(Matrix((weight * u.scale()) * u.up().eigen()), u.down(), 1.0);
}

}  // namespace detail

/// a * ΔW_c + b * ΔW_s, with the weights folded into the up factors.
inline MergedUpdate merge_direct(const LowRankUpdate& content, const LowRankUpdate& style,
                                 double a = 1.0, double b = 1.0) {
  detail::check_same_shape(content, style);
  if (!std::isfinite(a) || !std::isfinite(b)) {
    throw ValidationError("direct merge weights must be finite");
  }
  const LowRankUpdate s = b == 1.0 ? style.folded() : detail::reweighted(style, b);
  const LowRankUpdate c = a == 1.0 ? content.folded() : detail::reweighted(content, a);
  return MergedUpdate{detail::concatenate(s, c), MergeMode::direct, std::nullopt, 0,
                      style.rank(), content.rank()};
}

/// ΔW_s + project(ΔW_c) for hard or soft mode. Scales are folded into the up
/// factors first; the style block passes through untouched.
inline MergedUpdate merge_np(const LowRankUpdate& content, const LowRankUpdate& style,
                             const ProjectionConfig& cfg) {
  cfg.validate();
  if (cfg.mode == MergeMode::direct) {
    throw ValidationError("merge_np needs hard or soft mode; use merge_direct for direct");
  }
  detail::check_same_shape(content, style);
  const LowRankUpdate s = style.folded();
  const LowRankUpdate c = content.folded();
  const StyleSubspace sub = build_subspace(s, cfg);
  const LowRankUpdate projected = project(c, sub, cfg);
  return MergedUpdate{detail::concatenate(s, projected), cfg.mode,
                      cfg.mode == MergeMode::soft ? std::optional<double>(cfg.mu) : std::nullopt,
                      sub.k(), style.rank(), content.rank()};
}

inline MergedUpdate merge(const LowRankUpdate& content, const LowRankUpdate& style,
                          const ProjectionConfig& cfg) {
  cfg.validate();
  if (cfg.mode == MergeMode::direct) return merge_direct(content, style, cfg.a, cfg.b);
  return merge_np(content, style, cfg);
}

/// W_0 + ΔW_m.
inline Matrix apply_to_base(const Matrix& base, const MergedUpdate& merged) {
  if (base.rows() != merged.update.rows() || base.cols() != merged.update.cols()) {
    throw ShapeError("base weight " + base.shape() + " does not match merged update " +
                     merged.update.shape());
  }
  return Matrix(base.eigen() + dense(merged.update).eigen());
}

enum class UnpairedPolicy { error, keep_style_only, keep_both_passthrough };

inline std::string_view to_string(UnpairedPolicy p) {
  switch (p) {
    case UnpairedPolicy::error: return "error";
    case UnpairedPolicy::keep_style_only: return "keep-style-only";
    case UnpairedPolicy::keep_both_passthrough: return "keep-both-passthrough";
  }
  return "unknown";
}

inline UnpairedPolicy parse_unpaired_policy(std::string_view text) {
  if (text == "error") return UnpairedPolicy::error;
  if (text == "keep-style-only") return UnpairedPolicy::keep_style_only;
  if (text == "keep-both-passthrough") return UnpairedPolicy::keep_both_passthrough;
  throw ValidationError("unknown unpaired-layer policy '" + std::string(text) +
                        "' (expected error, keep-style-only or keep-both-passthrough)");
}

struct MergeOptions {
  UnpairedPolicy unpaired = UnpairedPolicy::keep_both_passthrough;
  KeyPairing pairing;
  /// 0 means one worker per hardware thread.
  unsigned threads = 0;
};

/// Runs fn(i) for i in [0, count) on up to `threads` workers. fn must only
/// write to slot i of its output.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  unsigned workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string nearest_misses(const AdapterCheckpoint& content, const AdapterCheckpoint& style,
                                  const KeyPairing& pairing) {
  struct Miss {
    std::size_t distance;
    std::string content_key;
    std::string style_key;
  };
  std::vector<Miss> misses;
  for (const auto& [ck, cl] : content.layers) {
    for (const auto& [sk, sl] : style.layers) {
      misses.push_back(
          {edit_distance(pairing.canonical_stem(ck), pairing.canonical_stem(sk)), ck, sk});
    }
  }
  std::sort(misses.begin(), misses.end(), [](const Miss& x, const Miss& y) {
    return std::tie(x.distance, x.content_key, x.style_key) <
           std::tie(y.distance, y.content_key, y.style_key);
  });
  std::string out;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, misses.size()); ++i) {
    out += "\n  content '" + misses[i].content_key + "' vs style '" + misses[i].style_key +
           "' (edit distance " + std::to_string(misses[i].distance) + ")";
  }
  return out;
}

}  // namespace detail

inline nlohmann::json config_json(const ProjectionConfig& cfg) {
  nlohmann::json j{{"mode", std::string(to_string(cfg.mode))}, {"k", cfg.k.to_string()}};
  if (cfg.mode == MergeMode::soft) j["mu"] = cfg.mu;
  if (cfg.mode == MergeMode::direct) {
    j["a"] = cfg.a;
    j["b"] = cfg.b;
  } else {
    j["basis"] = std::string(to_string(cfg.basis));
  }
  return j;
}

/// Merges every paired layer independently. The result carries scale-1
/// layers of rank r_s + r_c, plus metadata recording the config and a
/// per-layer provenance table.
inline AdapterCheckpoint merge_checkpoint(const AdapterCheckpoint& content,
                                          const AdapterCheckpoint& style,
                                          const ProjectionConfig& cfg,
                                          const MergeOptions& opts = {}) {
  cfg.validate();
  opts.pairing.validate();
  const PairingResult pairs = pair_layers(content, style, opts.pairing);
  if (pairs.paired.empty()) {
    throw ValidationError("content and style checkpoints share no layer keys; nearest misses:" +
                          detail::nearest_misses(content, style, opts.pairing));
  }
  if (opts.unpaired == UnpairedPolicy::error &&
      (!pairs.unpaired_content.empty() || !pairs.unpaired_style.empty())) {
    std::string msg = "unpaired layers with policy 'error':";
    for (const auto& k : pairs.unpaired_content) msg += "\n  content '" + k + "'";
    for (const auto& k : pairs.unpaired_style) msg += "\n  style '" + k + "'";
    throw ValidationError(msg);
  }

  std::vector<std::optional<MergedUpdate>> merged(pairs.paired.size());
  parallel_for(pairs.paired.size(), opts.threads, [&](std::size_t i) {
    const auto& p = pairs.paired[i];
    try {
      merged[i] = merge(content.layers.at(p.content_key), style.layers.at(p.style_key), cfg);
    } catch (const Error& e) {
      throw Error(e.kind(), "layer '" + p.style_key + "': " + e.what());
    }
  });

  AdapterCheckpoint out;
  out.naming = style.naming;
  out.source_dtype = style.source_dtype;
  nlohmann::json provenance = nlohmann::json::object();

  auto add_layer = [&](const std::string& key, LowRankUpdate layer, nlohmann::json info) {
    if (!out.layers.emplace(key, std::move(layer)).second) {
      throw ValidationError("output layer key '" + key + "' would be written twice");
    }
    provenance[key] = std::move(info);
  };

  for (std::size_t i = 0; i < pairs.paired.size(); ++i) {
    const auto& p = pairs.paired[i];
    const MergedUpdate& m = *merged[i];
    nlohmann::json info{{"provenance", std::string(to_string(m.provenance))},
                        {"content_key", p.content_key},
                        {"rank", m.update.rank()},
                        {"style_rank", m.style_rank},
                        {"content_rank", m.content_rank},
                        {"k", m.k_used}};
    if (m.mu_used) info["mu"] = *m.mu_used;
    add_layer(p.style_key, m.update, std::move(info));
  }
  if (opts.unpaired != UnpairedPolicy::error) {
    for (const auto& k : pairs.unpaired_style) {
      add_layer(k, style.layers.at(k), {{"provenance", "style-passthrough"}});
    }
  }
  if (opts.unpaired == UnpairedPolicy::keep_both_passthrough) {
    for (const auto& k : pairs.unpaired_content) {
      add_layer(k, content.layers.at(k), {{"provenance", "content-passthrough"}});
    }
  }

  out.metadata["format"] = "pt";
  out.metadata["nullfuse.config"] = config_json(cfg).dump();
  out.metadata["nullfuse.unpaired_policy"] = std::string(to_string(opts.unpaired));
  out.metadata["nullfuse.layers"] = provenance.dump();
  out.metadata["nullfuse.tool"] = std::string(kToolName);
  out.metadata["nullfuse.version"] = std::string(kVersion);
  return out;
}

}  // namespace nullfuse
