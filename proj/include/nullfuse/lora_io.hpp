#pragma once

// Adapter checkpoints: grouping of up/down/alpha tensors into per-layer
// LowRankUpdates, and pairing of layers across two checkpoints.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nullfuse/error.hpp"
#include "nullfuse/linalg.hpp"
#include "nullfuse/safetensors.hpp"
#include "nullfuse/version.hpp"

namespace nullfuse {

struct StemRewrite {
  std::string pattern;  // ECMAScript regex
  std::string replacement;
};

/// Naming conventions used to find the factors of each layer.
struct KeyPairing {
  std::vector<std::string> up_suffixes{"lora_up.weight", "lora_B.weight"};
  std::vector<std::string> down_suffixes{"lora_down.weight", "lora_A.weight"};
  std::optional<std::string> alpha_suffix{"alpha"};
  /// Applied in order to every stem before cross-checkpoint comparison.
  std::vector<StemRewrite> stem_rewrites;

  void validate() const {
    if (up_suffixes.empty() || up_suffixes.size() != down_suffixes.size()) {
      throw ValidationError("up and down suffix lists must be non-empty and of equal length");
    }
  }

  std::string canonical_stem(const std::string& stem) const {
    std::string out = stem;
    for (const auto& rule : stem_rewrites) {
      try {
        out = std::regex_replace(out, std::regex(rule.pattern), rule.replacement);
      } catch (const std::regex_error& e) {
        throw ValidationError("invalid stem rewrite pattern '" + rule.pattern + "': " + e.what());
      }
    }
    return out;
  }
};

/// Tensor-name suffixes a checkpoint is written with.
struct SuffixStyle {
  std::string up = "lora_up.weight";
  std::string down = "lora_down.weight";
  std::string alpha = "alpha";
};

struct AdapterCheckpoint {
  std::map<std::string, LowRankUpdate> layers;  // keyed by stem, lexicographic
  std::map<std::string, std::string> metadata;
  DType source_dtype = DType::f32;
  SuffixStyle naming;
  std::vector<std::string> warnings;  // unmatched tensors seen while reading
};

namespace detail {

inline bool strip_suffix(const std::string& name, const std::string& suffix, std::string& stem) {
  if (name.size() <= suffix.size() + 1) return false;
  if (name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) return false;
  if (name[name.size() - suffix.size() - 1] != '.') return false;
  stem = name.substr(0, name.size() - suffix.size() - 1);
  return true;
}

inline Matrix factor_matrix(const std::string& name, const safetensors::Tensor& t) {
  if (t.shape.size() != 2 || t.shape[0] == 0 || t.shape[1] == 0) {
    throw FormatError(FormatStage::pairing,
                      "factor '" + name + "' must be a non-empty 2-D tensor");
  }
  for (const double v : t.values) {
    if (!std::isfinite(v)) {
      throw FormatError(FormatStage::data, "factor '" + name + "' contains non-finite values");
    }
  }
  return Matrix(t.shape[0], t.shape[1], t.values);
}

struct StemParts {
  const std::string* up_name = nullptr;
  const std::string* down_name = nullptr;
  const std::string* alpha_name = nullptr;
  std::size_t convention = 0;
};

}  // namespace detail

inline AdapterCheckpoint decode_checkpoint(const safetensors::Container& container,
                                           const KeyPairing& pairing = {}) {
  pairing.validate();
  AdapterCheckpoint out;
  out.metadata = container.metadata;

  std::map<std::string, detail::StemParts> stems;
  std::vector<const std::string*> alphas;
  bool dtype_seen = false;

  for (const auto& [name, tensor] : container.tensors) {
    std::string stem;
    bool matched = false;
    for (std::size_t i = 0; i < pairing.up_suffixes.size() && !matched; ++i) {
      if (detail::strip_suffix(name, pairing.up_suffixes[i], stem)) {
        auto& parts = stems[stem];
        if (parts.up_name) {
          throw FormatError(FormatStage::pairing, "stem '" + stem + "' has two up factors ('" +
                                                      *parts.up_name + "', '" + name + "')");
        }
        parts.up_name = &name;
        parts.convention = i;
        matched = true;
      } else if (detail::strip_suffix(name, pairing.down_suffixes[i], stem)) {
        auto& parts = stems[stem];
        if (parts.down_name) {
          throw FormatError(FormatStage::pairing, "stem '" + stem + "' has two down factors ('" +
                                                      *parts.down_name + "', '" + name + "')");
        }
        parts.down_name = &name;
        matched = true;
      }
    }
    if (matched) {
      if (!dtype_seen) {
        out.source_dtype = tensor.dtype;
        dtype_seen = true;
      }
      continue;
    }
    if (pairing.alpha_suffix && detail::strip_suffix(name, *pairing.alpha_suffix, stem)) {
      alphas.push_back(&name);
      continue;
    }
    out.warnings.push_back("ignoring unrecognized tensor '" + name + "'");
  }

  for (const auto* name : alphas) {
    std::string stem;
    detail::strip_suffix(*name, *pairing.alpha_suffix, stem);
    auto it = stems.find(stem);
    if (it == stems.end()) {
      out.warnings.push_back("ignoring alpha '" + *name + "' with no matching factors");
      continue;
    }
    it->second.alpha_name = name;
  }

  bool naming_set = false;
  for (const auto& [stem, parts] : stems) {
    if (!parts.up_name) {
      throw FormatError(FormatStage::pairing, "stem '" + stem + "' has a down factor ('" +
                                                  *parts.down_name + "') but no up factor");
    }
    if (!parts.down_name) {
      throw FormatError(FormatStage::pairing, "stem '" + stem + "' has an up factor ('" +
                                                  *parts.up_name + "') but no down factor");
    }
    Matrix up = detail::factor_matrix(*parts.up_name, container.tensors.at(*parts.up_name));
    Matrix down = detail::factor_matrix(*parts.down_name, container.tensors.at(*parts.down_name));
    if (up.cols() != down.rows()) {
      throw FormatError(FormatStage::pairing, "stem '" + stem + "': up factor " + up.shape() +
                                                  " and down factor " + down.shape() +
                                                  " disagree on rank");
    }
    double scale = 1.0;
    if (parts.alpha_name) {
      const auto& alpha = container.tensors.at(*parts.alpha_name);
      if (alpha.values.size() != 1) {
        throw FormatError(FormatStage::pairing,
                          "alpha '" + *parts.alpha_name + "' must hold exactly one value");
      }
      const double a = alpha.values.front();
      if (!std::isfinite(a) || a < 0.0) {
        throw FormatError(FormatStage::data,
                          "alpha '" + *parts.alpha_name + "' must be finite and non-negative");
      }
      scale = a / static_cast<double>(up.cols());
    }
    if (!naming_set) {
      out.naming = SuffixStyle{pairing.up_suffixes[parts.convention],
                               pairing.down_suffixes[parts.convention],
                               pairing.alpha_suffix.value_or("alpha")};
      naming_set = true;
    }
    out.layers.emplace(stem, LowRankUpdate(std::move(up), std::move(down), scale));
  }
  return out;
}

inline AdapterCheckpoint read_checkpoint(std::span<const std::uint8_t> bytes,
                                         const KeyPairing& pairing = {}) {
  return decode_checkpoint(safetensors::parse(bytes), pairing);
}

inline AdapterCheckpoint read_checkpoint(const std::filesystem::path& path,
                                         const KeyPairing& pairing = {}) {
  const auto bytes = safetensors::read_bytes(path);
  return read_checkpoint(std::span<const std::uint8_t>(bytes), pairing);
}

/// Each layer becomes up, down and a scalar f32 alpha = scale * rank, so a
/// reader recovers the scale without the factors being rescaled. Tool name
/// and version are stamped into the metadata.
inline safetensors::Container encode_checkpoint(const AdapterCheckpoint& ckpt, DType dtype) {
  if (dtype == DType::bf16) {
    throw ValidationError("bf16 output is not supported; write f32 or f16");
  }
  safetensors::Container c;
  c.metadata = ckpt.metadata;
  c.metadata["nullfuse.tool"] = std::string(kToolName);
  c.metadata["nullfuse.version"] = std::string(kVersion);

  auto to_tensor = [dtype](const Matrix& m) {
    safetensors::Tensor t;
    t.dtype = dtype;
    t.shape = {m.rows(), m.cols()};
    t.values.assign(m.entries().begin(), m.entries().end());
    return t;
  };

  for (const auto& [stem, layer] : ckpt.layers) {
    c.tensors[stem + "." + ckpt.naming.up] = to_tensor(layer.up());
    c.tensors[stem + "." + ckpt.naming.down] = to_tensor(layer.down());
    safetensors::Tensor alpha;
    alpha.dtype = DType::f32;
    alpha.values = {layer.scale() * static_cast<double>(layer.rank())};
    c.tensors[stem + "." + ckpt.naming.alpha] = std::move(alpha);
  }
  return c;
}

inline std::vector<std::uint8_t> write_checkpoint(const AdapterCheckpoint& ckpt, DType dtype) {
  return safetensors::serialize(encode_checkpoint(ckpt, dtype));
}

inline void write_checkpoint(const AdapterCheckpoint& ckpt, const std::filesystem::path& path,
                             DType dtype) {
  const auto bytes = write_checkpoint(ckpt, dtype);
  safetensors::write_bytes(path, bytes);
}

struct LayerPair {
  std::string key;          // canonical (rewritten) stem
  std::string content_key;  // stem as stored in the content checkpoint
  std::string style_key;
};

struct PairingResult {
  std::vector<LayerPair> paired;  // sorted by canonical key
  std::vector<std::string> unpaired_content;
  std::vector<std::string> unpaired_style;
};

/// Pairs layers whose stems agree after the configured rewrites. When several
/// stems on one side rewrite to the same canonical key, the lexicographically
/// first one is paired and the rest are reported unpaired.
inline PairingResult pair_layers(const AdapterCheckpoint& content, const AdapterCheckpoint& style,
                                 const KeyPairing& pairing = {}) {
  auto index = [&](const AdapterCheckpoint& ckpt, std::vector<std::string>& dupes) {
    std::map<std::string, std::string> by_canonical;
    for (const auto& [stem, layer] : ckpt.layers) {
      auto [it, inserted] = by_canonical.emplace(pairing.canonical_stem(stem), stem);
      if (!inserted) dupes.push_back(stem);
    }
    return by_canonical;
  };

  PairingResult out;
  auto content_idx = index(content, out.unpaired_content);
  auto style_idx = index(style, out.unpaired_style);

  for (const auto& [key, content_stem] : content_idx) {
    auto it = style_idx.find(key);
    if (it == style_idx.end()) {
      out.unpaired_content.push_back(content_stem);
    } else {
      out.paired.push_back(LayerPair{key, content_stem, it->second});
    }
  }
  for (const auto& [key, style_stem] : style_idx) {
    if (!content_idx.contains(key)) out.unpaired_style.push_back(style_stem);
  }
  std::sort(out.unpaired_content.begin(), out.unpaired_content.end());
  std::sort(out.unpaired_style.begin(), out.unpaired_style.end());
  return out;
}

}  // namespace nullfuse
