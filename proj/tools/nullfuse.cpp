// nullfuse: merge, analyze, verify and benchmark low-rank adapter fusion.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nullfuse/nullfuse.hpp"

namespace nf = nullfuse;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kNumeric = 4, kInternal = 70 };

int exit_code(nf::ErrorKind kind) {
  switch (kind) {
    case nf::ErrorKind::validation:
    case nf::ErrorKind::shape: return kUsage;
    case nf::ErrorKind::io:
    case nf::ErrorKind::format: return kIo;
    case nf::ErrorKind::rank_deficient:
    case nf::ErrorKind::convergence: return kNumeric;
  }
  return kInternal;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_st("nullfuse");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("NULLFUSE_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept it when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") {
      spdlog::set_level(level);
    } else {
      spdlog::warn("ignoring unknown NULLFUSE_LOG level '{}'", env);
    }
  }
}

// "-" means standard output.
void emit(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw nf::IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out.flush()) throw nf::IoError("failed writing '" + path + "'");
  spdlog::info("wrote {}", path);
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

struct ProjectionFlags {
  std::string mode = "soft";
  double mu = 0.5;
  std::string k = "full";
  double a = 1.0;
  double b = 1.0;
  std::string basis = "auto";

  void add_to(CLI::App& app, bool weights) {
    app.add_option("--mode", mode, "direct | hard | soft")->capture_default_str();
    app.add_option("--mu", mu, "soft projection strength, >= 0")->capture_default_str();
    app.add_option("--k", k, "style subspace rank: 'full' or a positive integer")->capture_default_str();
    app.add_option("--basis", basis, "subspace basis: auto | svd | qr")->capture_default_str();
    if (weights) {
      app.add_option("--a", a, "content weight for direct mode")->capture_default_str();
      app.add_option("--b", b, "style weight for direct mode")->capture_default_str();
    }
  }

  nf::ProjectionConfig config() const {
    nf::ProjectionConfig cfg;
    cfg.mode = nf::parse_merge_mode(mode);
    cfg.mu = mu;
    cfg.k = nf::RankSelection::parse(k);
    cfg.a = a;
    cfg.b = b;
    cfg.basis = nf::parse_basis_choice(basis);
    cfg.validate();
    return cfg;
  }
};

struct PairingFlags {
  std::vector<std::string> rewrites;

  void add_to(CLI::App& app) {
    app.add_option("--rewrite", rewrites,
                   "stem rewrite PATTERN=REPLACEMENT (ECMAScript regex), applied to both inputs; repeatable");
  }

  nf::KeyPairing pairing() const {
    nf::KeyPairing p;
    for (const auto& r : rewrites) {
      const auto eq = r.find('=');
      if (eq == std::string::npos) {
        throw nf::ValidationError("--rewrite expects PATTERN=REPLACEMENT, got '" + r + "'");
      }
      p.stem_rewrites.push_back({r.substr(0, eq), r.substr(eq + 1)});
    }
    p.validate();
    return p;
  }
};

nf::AdapterCheckpoint load(const std::string& path, const nf::KeyPairing& pairing) {
  spdlog::info("reading {}", path);
  nf::AdapterCheckpoint ckpt = nf::read_checkpoint(std::filesystem::path(path), pairing);
  for (const auto& w : ckpt.warnings) spdlog::warn("{}: {}", path, w);
  spdlog::info("{}: {} layers, stored as {}", path, ckpt.layers.size(), nf::to_string(ckpt.source_dtype));
  return ckpt;
}

struct Paired {
  std::string key;
  const nf::LowRankUpdate* content;
  const nf::LowRankUpdate* style;
};

std::vector<Paired> paired_layers(const nf::AdapterCheckpoint& c, const nf::AdapterCheckpoint& s,
                                  const nf::KeyPairing& pairing) {
  const auto pr = nf::pair_layers(c, s, pairing);
  if (pr.paired.empty()) throw nf::ValidationError("the two checkpoints share no layer keys");
  for (const auto& k : pr.unpaired_content) spdlog::warn("content layer '{}' has no style partner", k);
  for (const auto& k : pr.unpaired_style) spdlog::warn("style layer '{}' has no content partner", k);
  std::vector<Paired> out;
  for (const auto& p : pr.paired) out.push_back({p.style_key, &c.layers.at(p.content_key), &s.layers.at(p.style_key)});
  return out;
}

// ---- merge ----------------------------------------------------------------

struct MergeCmd {
  std::string content, style, output;
  ProjectionFlags proj;
  PairingFlags pairing;
  std::string unpaired = "keep-both-passthrough";
  std::string dtype = "f32";
  unsigned threads = 0;
  std::string report;

  void add_to(CLI::App& app) {
    app.add_option("content", content, "content adapter (.safetensors)")->required();
    app.add_option("style", style, "style adapter (.safetensors)")->required();
    app.add_option("-o,--output", output, "merged adapter to write")->required();
    proj.add_to(app, true);
    pairing.add_to(app);
    app.add_option("--unpaired", unpaired, "error | keep-style-only | keep-both-passthrough")->capture_default_str();
    app.add_option("--dtype", dtype, "output dtype: f32 | f16")->capture_default_str();
    app.add_option("--threads", threads, "worker threads, 0 = available parallelism")->capture_default_str();
    app.add_option("--report", report, "write the per-layer interference report as JSON ('-' for stdout)");
  }

  int run() const {
    const nf::ProjectionConfig cfg = proj.config();
    nf::MergeOptions opts;
    opts.unpaired = nf::parse_unpaired_policy(unpaired);
    opts.pairing = pairing.pairing();
    opts.threads = threads;
    const nf::DType out_dtype = nf::parse_dtype(dtype);
    if (out_dtype == nf::DType::bf16) throw nf::ValidationError("bf16 output is not supported; use f32 or f16");

    const auto c = load(content, opts.pairing);
    const auto s = load(style, opts.pairing);
    nf::AdapterCheckpoint merged = nf::merge_checkpoint(c, s, cfg, opts);
    merged.metadata["nullfuse.dtype"] = dtype;
    if (!pairing.rewrites.empty()) merged.metadata["nullfuse.rewrites"] = nlohmann::json(pairing.rewrites).dump();
    nf::write_checkpoint(merged, std::filesystem::path(output), out_dtype);

    const auto pr = nf::pair_layers(c, s, opts.pairing);
    std::vector<nf::InterferenceReport> reports;
    for (const auto& p : pr.paired) {
      reports.push_back(nf::interference_report(c.layers.at(p.content_key), s.layers.at(p.style_key), cfg, p.style_key));
    }

    std::printf("%-48s %-6s %5s %12s %12s\n", "layer", "mode", "rank", "interf_pre", "interf_post");
    for (const auto& r : reports) {
      std::printf("%-48s %-6s %5zu %12s %12s\n", r.layer_key.c_str(), std::string(nf::to_string(cfg.mode)).c_str(),
                  merged.layers.at(r.layer_key).rank(), sci(r.content_energy_in_style_subspace).c_str(),
                  sci(r.post_merge_residual).c_str());
    }
    for (const auto& [key, layer] : merged.layers) {
      if (std::none_of(reports.begin(), reports.end(), [&](const auto& r) { return r.layer_key == key; })) {
        std::printf("%-48s %-6s %5zu %12s %12s\n", key.c_str(), "pass", layer.rank(), "-", "-");
      }
    }
    std::printf("merged %zu of %zu layers -> %s\n", reports.size(), merged.layers.size(), output.c_str());

    if (!report.empty()) emit(report, nf::report::interference_json(reports, nf::report::settings_of(cfg)).dump(2) + "\n");
    return kOk;
  }
};

// ---- analyze --------------------------------------------------------------

struct Outputs {
  std::string json, csv;

  void add_to(CLI::App& app) {
    app.add_option("--json", json, "write JSON report ('-' for stdout)");
    app.add_option("--csv", csv, "write CSV report ('-' for stdout)");
  }

  // Without explicit outputs the CSV goes to stdout.
  void write(const nlohmann::json& doc, const std::string& csv_text) const {
    if (!json.empty()) emit(json, doc.dump(2) + "\n");
    if (!csv.empty()) emit(csv, csv_text);
    if (json.empty() && csv.empty()) std::cout << csv_text;
  }
};

struct SpectrumCmd {
  std::vector<std::string> inputs;
  PairingFlags pairing;
  Outputs out;

  void add_to(CLI::App& app) {
    app.add_option("inputs", inputs, "adapters to analyze")->required();
    out.add_to(app);
  }

  int run() const {
    std::vector<nf::SpectrumReport> reports;
    const bool prefix = inputs.size() > 1;
    for (const auto& path : inputs) {
      const auto ckpt = load(path, pairing.pairing());
      for (const auto& [key, layer] : ckpt.layers) {
        reports.push_back(nf::spectrum(layer, prefix ? path + ":" + key : key));
      }
    }
    out.write(nf::report::spectrum_json(reports), nf::report::spectrum_csv(reports));
    return kOk;
  }
};

struct PairCmd {
  std::string content, style;
  ProjectionFlags proj;
  PairingFlags pairing;
  Outputs out;

  void add_to(CLI::App& app, bool projection) {
    app.add_option("content", content, "content adapter")->required();
    app.add_option("style", style, "style adapter")->required();
    if (projection) {
      proj.add_to(app, false);
    } else {
      app.add_option("--k", proj.k, "style subspace rank: 'full' or a positive integer")->capture_default_str();
    }
    pairing.add_to(app);
    out.add_to(app);
  }
};

int run_interference(const PairCmd& cmd) {
  const auto cfg = cmd.proj.config();
  const auto p = cmd.pairing.pairing();
  const auto c = load(cmd.content, p);
  const auto s = load(cmd.style, p);
  std::vector<nf::InterferenceReport> reports;
  for (const auto& l : paired_layers(c, s, p)) reports.push_back(nf::interference_report(*l.content, *l.style, cfg, l.key));
  const auto settings = nf::report::settings_of(cfg);
  cmd.out.write(nf::report::interference_json(reports, settings), nf::report::interference_csv(reports, settings));
  return kOk;
}

int run_colinearity(const PairCmd& cmd) {
  const auto k = nf::RankSelection::parse(cmd.proj.k);
  const auto p = cmd.pairing.pairing();
  const auto c = load(cmd.content, p);
  const auto s = load(cmd.style, p);
  std::vector<nf::report::ColinearityRow> rows;
  for (const auto& l : paired_layers(c, s, p)) rows.push_back({l.key, nf::colinearity_test(*l.content, *l.style, k)});
  cmd.out.write(nf::report::colinearity_json(rows, k.to_string()), nf::report::colinearity_csv(rows));
  return kOk;
}

int run_uv(const PairCmd& cmd) {
  const auto cfg = cmd.proj.config();
  const auto p = cmd.pairing.pairing();
  const auto c = load(cmd.content, p);
  const auto s = load(cmd.style, p);
  std::vector<nf::UvComparison> rows;
  for (const auto& l : paired_layers(c, s, p)) rows.push_back(nf::compare_uv_projection(*l.content, *l.style, cfg, l.key));
  const auto settings = nf::report::settings_of(cfg);
  cmd.out.write(nf::report::uv_json(rows, settings), nf::report::uv_csv(rows, settings));
  return kOk;
}

// ---- verify ---------------------------------------------------------------

struct VerifyCmd {
  nf::VerifyOptions opts;
  std::string json;

  void add_to(CLI::App& app) {
    app.add_option("--seed", opts.seed, "base seed")->capture_default_str();
    app.add_option("--n", opts.n, "input dimension")->capture_default_str();
    app.add_option("--m", opts.m, "output dimension, 0 = same as n")->capture_default_str();
    app.add_option("--rank", opts.rank, "adapter rank")->capture_default_str();
    app.add_option("--trials", opts.trials, "random instances per check")->capture_default_str();
    app.add_option("--json", json, "write results as JSON ('-' for stdout)");
    app.add_flag("--inject-fault", opts.inject_fault, "corrupt projection outputs (negative control)")
        ->group("");  // test-only, hidden from help
  }

  int run() const {
    const auto results = nf::run_verify(opts);
    bool ok = true;
    std::printf("%-24s %12s %12s %7s  %s\n", "check", "worst", "tolerance", "trials", "status");
    nlohmann::json doc = nf::report::envelope("verify");
    doc["settings"] = {{"seed", opts.seed}, {"m", opts.m == 0 ? opts.n : opts.m}, {"n", opts.n},
                       {"rank", opts.rank}, {"trials", opts.trials}, {"inject_fault", opts.inject_fault}};
    doc["checks"] = nlohmann::json::array();
    for (const auto& r : results) {
      ok = ok && r.passed();
      std::string status = r.passed() ? "PASS" : "FAIL (seed " + std::to_string(*r.failing_seed) + ")";
      std::printf("%-24s %12s %12s %7zu  %s\n", r.name.c_str(), sci(r.worst).c_str(), sci(r.tolerance).c_str(),
                  r.trials, status.c_str());
      doc["checks"].push_back({{"name", r.name},
                               {"worst", r.worst},
                               {"tolerance", r.tolerance},
                               {"trials", r.trials},
                               {"passed", r.passed()},
                               {"failing_seed", r.failing_seed ? nlohmann::json(*r.failing_seed) : nlohmann::json()}});
    }
    doc["passed"] = ok;
    if (!json.empty()) emit(json, doc.dump(2) + "\n");
    if (!ok) spdlog::error("verification failed");
    return ok ? kOk : kCheckFailed;
  }
};

// ---- bench ----------------------------------------------------------------

struct BenchCmd {
  nf::BenchOptions opts;
  std::string json;

  void add_to(CLI::App& app) {
    app.add_option("--m", opts.m, "output dimension")->capture_default_str();
    app.add_option("--n", opts.n, "input dimension")->capture_default_str();
    app.add_option("--rank", opts.rank, "adapter rank")->capture_default_str();
    app.add_option("--repeats", opts.repeats, "dense-SVD timing repetitions")->capture_default_str();
    app.add_option("--seed", opts.seed, "seed for the generated style adapter")->capture_default_str();
    app.add_option("--json", json, "write timings as JSON ('-' for stdout)");
  }

  int run() const {
    const auto r = nf::run_bench(opts);
    std::printf("m=%zu n=%zu rank=%zu\n", r.m, r.n, r.rank);
    std::printf("%-22s %12s %6s\n", "path", "median_s", "runs");
    std::printf("%-22s %12.6f %6zu\n", "svd (dense)", r.svd_seconds, r.svd_runs);
    std::printf("%-22s %12.6f %6zu\n", "qr", r.qr_seconds, r.qr_runs);
    std::printf("%-22s %12.6f %6zu\n", "svd (factored)", r.factored_svd_seconds, r.factored_runs);
    std::printf("speedup svd/qr: %.1fx   projector distance: %s\n", r.speedup, sci(r.projector_distance).c_str());
    if (!json.empty()) {
      nlohmann::json doc = nf::report::envelope("bench");
      doc["m"] = r.m;
      doc["n"] = r.n;
      doc["rank"] = r.rank;
      doc["seed"] = opts.seed;
      doc["timings"] = {{"svd_seconds", r.svd_seconds},
                        {"qr_seconds", r.qr_seconds},
                        {"factored_svd_seconds", r.factored_svd_seconds},
                        {"svd_runs", r.svd_runs},
                        {"qr_runs", r.qr_runs},
                        {"factored_runs", r.factored_runs}};
      doc["speedup"] = r.speedup;
      doc["projector_distance"] = r.projector_distance;
      emit(json, doc.dump(2) + "\n");
    }
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Null-space fusion of content and style low-rank adapters"};
  app.set_version_flag("--version", std::string(nf::kVersion));
  app.require_subcommand(1);

  MergeCmd merge;
  merge.add_to(*app.add_subcommand("merge", "merge a content adapter into a style adapter"));

  auto* analyze = app.add_subcommand("analyze", "diagnostics on adapters");
  analyze->require_subcommand(1);
  SpectrumCmd spectrum;
  spectrum.add_to(*analyze->add_subcommand("spectrum", "singular spectrum of every layer"));
  PairCmd interference, colinearity, uv;
  interference.add_to(*analyze->add_subcommand("interference", "content energy inside the style subspace"), true);
  colinearity.add_to(*analyze->add_subcommand("colinearity", "residual of the colinearity fit per layer"), false);
  uv.add_to(*analyze->add_subcommand("uv", "input-side vs output-side projection"), true);

  VerifyCmd verify;
  verify.add_to(*app.add_subcommand("verify", "check numerical invariants on random instances"));
  BenchCmd bench;
  bench.add_to(*app.add_subcommand("bench", "time SVD and QR subspace construction"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (app.got_subcommand("merge")) return merge.run();
    if (app.got_subcommand("verify")) return verify.run();
    if (app.got_subcommand("bench")) return bench.run();
    if (analyze->got_subcommand("spectrum")) return spectrum.run();
    if (analyze->got_subcommand("interference")) return run_interference(interference);
    if (analyze->got_subcommand("colinearity")) return run_colinearity(colinearity);
    if (analyze->got_subcommand("uv")) return run_uv(uv);
  } catch (const nf::Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", std::string(nf::to_string(e.kind())).c_str(), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", e.what());
    return kInternal;
  }
  return kUsage;
}
