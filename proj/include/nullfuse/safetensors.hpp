#pragma once

// safetensors container: u64 little-endian header length N, N bytes of JSON
// header, then the raw little-endian tensor data block.
//
// The parser is total: any byte sequence either decodes or raises a
// FormatError naming the stage that rejected it. Allocation is bounded by the
// input size.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nullfuse/error.hpp"
#include "nullfuse/float16.hpp"

namespace nullfuse {

enum class DType { f32, f16, bf16 };

inline std::string_view to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::bf16: return "bf16";
  }
  return "unknown";
}

inline DType parse_dtype(std::string_view text) {
  if (text == "f32") return DType::f32;
  if (text == "f16") return DType::f16;
  if (text == "bf16") return DType::bf16;
  throw ValidationError("unknown dtype '" + std::string(text) + "' (expected f32, f16 or bf16)");
}

namespace safetensors {

inline constexpr std::uint64_t kMaxHeaderBytes = 100u * 1024u * 1024u;
inline constexpr std::string_view kMetadataKey = "__metadata__";

inline std::string_view wire_name(DType d) {
  switch (d) {
    case DType::f32: return "F32";
    case DType::f16: return "F16";
    case DType::bf16: return "BF16";
  }
  return "?";
}

inline std::size_t element_size(DType d) { return d == DType::f32 ? 4 : 2; }

struct Tensor {
  DType dtype = DType::f32;
  std::vector<std::size_t> shape;
  std::vector<double> values;  // widened to f64, row-major

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct Container {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

namespace detail {

inline std::uint64_t read_u64_le(std::span<const std::uint8_t> bytes) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[static_cast<std::size_t>(i)];
  return v;
}

inline void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline DType dtype_from_wire(const std::string& name, const std::string& tensor) {
  if (name == "F32") return DType::f32;
  if (name == "F16") return DType::f16;
  if (name == "BF16") return DType::bf16;
  throw FormatError(FormatStage::dtype,
                    "tensor '" + tensor + "' has unsupported dtype '" + name + "'");
}

// Multiplies with overflow detection.
inline bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return false;
  out = a * b;
  return true;
}

inline double decode_element(DType dtype, const std::uint8_t* p) {
  switch (dtype) {
    case DType::f32: {
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                 (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      return static_cast<double>(std::bit_cast<float>(bits));
    }
    case DType::f16:
      return f16_bits_to_double(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
    case DType::bf16:
      return bf16_bits_to_double(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
  }
  return 0.0;
}

struct Entry {
  std::string name;
  DType dtype;
  std::vector<std::size_t> shape;
  std::uint64_t begin;
  std::uint64_t end;
};

inline Entry parse_entry(const std::string& name, const nlohmann::json& info,
                         std::uint64_t data_size) {
  if (!info.is_object()) {
    throw FormatError(FormatStage::json, "entry for tensor '" + name + "' is not an object");
  }
  const auto dtype_it = info.find("dtype");
  const auto shape_it = info.find("shape");
  const auto offsets_it = info.find("data_offsets");
  if (dtype_it == info.end() || !dtype_it->is_string()) {
    throw FormatError(FormatStage::json, "tensor '" + name + "' lacks a string dtype");
  }
  if (shape_it == info.end() || !shape_it->is_array()) {
    throw FormatError(FormatStage::json, "tensor '" + name + "' lacks a shape array");
  }
  if (offsets_it == info.end() || !offsets_it->is_array() || offsets_it->size() != 2) {
    throw FormatError(FormatStage::json, "tensor '" + name + "' lacks data_offsets [begin, end]");
  }

  Entry e{name, dtype_from_wire(dtype_it->get<std::string>(), name), {}, 0, 0};

  std::uint64_t count = 1;
  for (const auto& dim : *shape_it) {
    if (!dim.is_number_unsigned()) {
      throw FormatError(FormatStage::json,
                        "tensor '" + name + "' has a non-integer or negative dimension");
    }
    const auto d = dim.get<std::uint64_t>();
    if (!checked_mul(count, d, count)) {
      throw FormatError(FormatStage::offsets, "tensor '" + name + "' element count overflows");
    }
    e.shape.push_back(static_cast<std::size_t>(d));
  }

  for (const auto& off : *offsets_it) {
    if (!off.is_number_unsigned()) {
      throw FormatError(FormatStage::json,
                        "tensor '" + name + "' has a non-integer or negative data offset");
    }
  }
  e.begin = (*offsets_it)[0].get<std::uint64_t>();
  e.end = (*offsets_it)[1].get<std::uint64_t>();
  if (e.end < e.begin) {
    throw FormatError(FormatStage::offsets, "tensor '" + name + "' has end offset before begin");
  }
  if (e.end > data_size) {
    throw FormatError(FormatStage::offsets,
                      "tensor '" + name + "' ends at byte " + std::to_string(e.end) +
                          " past the data block of " + std::to_string(data_size) + " bytes");
  }
  std::uint64_t bytes = 0;
  if (!checked_mul(count, element_size(e.dtype), bytes) || bytes != e.end - e.begin) {
    throw FormatError(FormatStage::offsets,
                      "tensor '" + name + "' spans " + std::to_string(e.end - e.begin) +
                          " bytes, which does not match its shape and dtype");
  }
  return e;
}

}  // namespace detail

inline Container parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) {
    throw FormatError(FormatStage::header, "input is " + std::to_string(bytes.size()) +
                                               " bytes, shorter than the 8-byte length prefix");
  }
  const std::uint64_t header_len = detail::read_u64_le(bytes.first(8));
  if (header_len > kMaxHeaderBytes) {
    throw FormatError(FormatStage::header,
                      "declared header length " + std::to_string(header_len) +
                          " exceeds the " + std::to_string(kMaxHeaderBytes) + "-byte limit");
  }
  if (header_len > bytes.size() - 8) {
    throw FormatError(FormatStage::header,
                      "declared header length " + std::to_string(header_len) +
                          " exceeds the " + std::to_string(bytes.size() - 8) +
                          " bytes remaining");
  }
  const auto header_bytes = bytes.subspan(8, static_cast<std::size_t>(header_len));
  const auto data = bytes.subspan(8 + static_cast<std::size_t>(header_len));

  nlohmann::json header =
      nlohmann::json::parse(header_bytes.begin(), header_bytes.end(), nullptr, false);
  if (header.is_discarded()) throw FormatError(FormatStage::json, "header is not valid JSON");
  if (!header.is_object()) throw FormatError(FormatStage::json, "header is not a JSON object");

  Container out;
  std::vector<detail::Entry> entries;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == kMetadataKey) {
      if (!it->is_object()) {
        throw FormatError(FormatStage::json, "__metadata__ must be an object of strings");
      }
      for (auto m = it->begin(); m != it->end(); ++m) {
        if (!m->is_string()) {
          throw FormatError(FormatStage::json,
                            "__metadata__ value for '" + m.key() + "' is not a string");
        }
        out.metadata.emplace(m.key(), m->get<std::string>());
      }
      continue;
    }
    entries.push_back(detail::parse_entry(it.key(), *it, data.size()));
  }

  std::vector<const detail::Entry*> by_offset;
  by_offset.reserve(entries.size());
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const auto* x, const auto* y) {
    return std::pair(x->begin, x->end) < std::pair(y->begin, y->end);
  });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    const auto* prev = by_offset[i - 1];
    const auto* cur = by_offset[i];
    if (cur->begin < prev->end) {
      throw FormatError(FormatStage::offsets, "tensors '" + prev->name + "' and '" + cur->name +
                                                  "' overlap in the data block");
    }
  }

  for (const auto& e : entries) {
    Tensor t;
    t.dtype = e.dtype;
    t.shape = e.shape;
    const std::size_t size = element_size(e.dtype);
    const std::size_t count = static_cast<std::size_t>((e.end - e.begin) / size);
    t.values.resize(count);
    const std::uint8_t* base = data.data() + e.begin;
    for (std::size_t i = 0; i < count; ++i) t.values[i] = detail::decode_element(e.dtype, base + i * size);
    out.tensors.emplace(e.name, std::move(t));
  }
  return out;
}

/// Serializes with tensors in lexicographic name order, contiguous in the data
/// block, and the header padded with spaces so the data block starts on an
/// 8-byte boundary. Only f32 and f16 are writable.
inline std::vector<std::uint8_t> serialize(const Container& c) {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::uint8_t> data;
  for (const auto& [name, t] : c.tensors) {
    if (name == kMetadataKey) throw ValidationError("tensor name collides with __metadata__");
    if (t.dtype == DType::bf16) {
      throw ValidationError("bf16 output is not supported; write f32 or f16");
    }
    if (t.values.size() != t.element_count()) {
      throw ShapeError("tensor '" + name + "' has " + std::to_string(t.values.size()) +
                       " values for its shape");
    }
    const std::uint64_t begin = data.size();
    for (const double v : t.values) {
      if (t.dtype == DType::f32) {
        const auto f = double_to_f32(v);
        if (!f) {
          throw ValidationError("tensor '" + name + "' holds a value that is not finite in f32");
        }
        const auto bits = std::bit_cast<std::uint32_t>(*f);
        for (int i = 0; i < 4; ++i) data.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      } else {
        const auto h = double_to_f16_bits(v);
        if (!h) {
          throw ValidationError("tensor '" + name + "' holds a value that is not finite in f16");
        }
        data.push_back(static_cast<std::uint8_t>(*h & 0xffu));
        data.push_back(static_cast<std::uint8_t>(*h >> 8));
      }
    }
    header[name] = {{"dtype", std::string(wire_name(t.dtype))},
                    {"shape", t.shape},
                    {"data_offsets", {begin, static_cast<std::uint64_t>(data.size())}}};
  }
  if (!c.metadata.empty()) header[std::string(kMetadataKey)] = c.metadata;

  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + data.size());
  detail::append_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  if (size < 0) throw IoError("cannot determine size of '" + path.string() + "'");
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (!bytes.empty() && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw IoError("failed reading '" + path.string() + "'");
  }
  return bytes;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace safetensors
}  // namespace nullfuse
