#pragma once

// JSON and CSV encodings of analysis reports. Every JSON document carries
// "schema" and "schema_version"; the matching JSON Schemas live in schemas/.
// CSV output has one row per layer; list-valued fields are ';'-joined.

#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nullfuse/analysis.hpp"
#include "nullfuse/projector.hpp"

namespace nullfuse::report {

inline constexpr int kSchemaVersion = 1;

inline nlohmann::json envelope(const std::string& schema) {
  return nlohmann::json{{"schema", "nullfuse." + schema}, {"schema_version", kSchemaVersion}};
}

inline std::string number(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::string joined(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ';';
    out += number(values[i]);
  }
  return out;
}

// Layer keys are free text; quote them per RFC 4180.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline nlohmann::json to_json(const SpectrumReport& r) {
  return {{"layer_key", r.layer_key},
          {"rank", r.singular_values.size()},
          {"singular_values", r.singular_values},
          {"energy_fractions", r.energy_fractions},
          {"degenerate", r.degenerate}};
}

inline nlohmann::json spectrum_json(const std::vector<SpectrumReport>& reports) {
  auto doc = envelope("spectrum");
  doc["layers"] = nlohmann::json::array();
  for (const auto& r : reports) doc["layers"].push_back(to_json(r));
  return doc;
}

inline std::string spectrum_csv(const std::vector<SpectrumReport>& reports) {
  std::string out = "layer_key,rank,degenerate,singular_values,energy_fractions\n";
  for (const auto& r : reports) {
    out += csv_field(r.layer_key) + "," + std::to_string(r.singular_values.size()) + "," +
           (r.degenerate ? "true" : "false") + "," + joined(r.singular_values) + "," +
           joined(r.energy_fractions) + "\n";
  }
  return out;
}

/// Projection settings echoed next to interference numbers.
struct RunSettings {
  MergeMode mode = MergeMode::soft;
  std::optional<double> mu;
  std::string k = "full";
};

inline RunSettings settings_of(const ProjectionConfig& cfg) {
  return RunSettings{cfg.mode,
                     cfg.mode == MergeMode::soft ? std::optional<double>(cfg.mu) : std::nullopt,
                     cfg.k.to_string()};
}

inline nlohmann::json to_json(const InterferenceReport& r) {
  return {{"layer_key", r.layer_key},
          {"projection", r.projection},
          {"content_total_energy", r.content_total_energy},
          {"content_energy_in_style_subspace", r.content_energy_in_style_subspace},
          {"ratio", r.ratio},
          {"post_merge_residual", r.post_merge_residual},
          {"attenuation", r.attenuation()}};
}

inline nlohmann::json settings_json(const RunSettings& s) {
  nlohmann::json j{{"mode", std::string(to_string(s.mode))}, {"k", s.k}};
  j["mu"] = s.mu ? nlohmann::json(*s.mu) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json interference_json(const std::vector<InterferenceReport>& reports,
                                        const RunSettings& settings) {
  auto doc = envelope("interference");
  doc["settings"] = settings_json(settings);
  doc["layers"] = nlohmann::json::array();
  for (const auto& r : reports) doc["layers"].push_back(to_json(r));
  return doc;
}

inline std::string interference_header() {
  return "layer_key,projection,mode,mu,k,content_total_energy,"
         "content_energy_in_style_subspace,ratio,post_merge_residual,attenuation\n";
}

inline std::string interference_row(const InterferenceReport& r, const RunSettings& s) {
  return csv_field(r.layer_key) + "," + r.projection + "," + std::string(to_string(s.mode)) +
         "," + (s.mu ? number(*s.mu) : std::string()) + "," + s.k + "," +
         number(r.content_total_energy) + "," + number(r.content_energy_in_style_subspace) + "," +
         number(r.ratio) + "," + number(r.post_merge_residual) + "," + number(r.attenuation()) +
         "\n";
}

inline std::string interference_csv(const std::vector<InterferenceReport>& reports,
                                    const RunSettings& settings) {
  std::string out = interference_header();
  for (const auto& r : reports) out += interference_row(r, settings);
  return out;
}

struct ColinearityRow {
  std::string layer_key;
  double residual = 0.0;
};

inline nlohmann::json colinearity_json(const std::vector<ColinearityRow>& rows,
                                       const std::string& k) {
  auto doc = envelope("colinearity");
  doc["k"] = k;
  doc["layers"] = nlohmann::json::array();
  for (const auto& r : rows) {
    doc["layers"].push_back({{"layer_key", r.layer_key}, {"residual", r.residual}});
  }
  return doc;
}

inline std::string colinearity_csv(const std::vector<ColinearityRow>& rows) {
  std::string out = "layer_key,residual\n";
  for (const auto& r : rows) out += csv_field(r.layer_key) + "," + number(r.residual) + "\n";
  return out;
}

inline nlohmann::json uv_json(const std::vector<UvComparison>& rows, const RunSettings& settings) {
  auto doc = envelope("uv");
  doc["settings"] = settings_json(settings);
  doc["layers"] = nlohmann::json::array();
  for (const auto& r : rows) {
    doc["layers"].push_back({{"layer_key", r.v_space.layer_key},
                             {"v_space", to_json(r.v_space)},
                             {"u_space", to_json(r.u_space)}});
  }
  return doc;
}

inline std::string uv_csv(const std::vector<UvComparison>& rows, const RunSettings& settings) {
  std::string out =
      "layer_key,mode,mu,k,content_total_energy,content_energy_in_style_subspace,"
      "v_post_merge_residual,u_post_merge_residual,v_attenuation,u_attenuation\n";
  for (const auto& r : rows) {
    out += csv_field(r.v_space.layer_key) + "," + std::string(to_string(settings.mode)) + "," +
           (settings.mu ? number(*settings.mu) : std::string()) + "," + settings.k + "," +
           number(r.v_space.content_total_energy) + "," +
           number(r.v_space.content_energy_in_style_subspace) + "," +
           number(r.v_space.post_merge_residual) + "," + number(r.u_space.post_merge_residual) +
           "," + number(r.v_space.attenuation()) + "," + number(r.u_space.attenuation()) + "\n";
  }
  return out;
}

}  // namespace nullfuse::report
