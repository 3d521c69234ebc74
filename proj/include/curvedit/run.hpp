#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvedit/checkpoint.hpp"
#include "curvedit/config.hpp"
#include "curvedit/hash.hpp"
#include "curvedit/image.hpp"
#include "curvedit/metrics.hpp"
#include "curvedit/trainer.hpp"

#ifndef CURVEDIT_BUILD_ID
#define CURVEDIT_BUILD_ID "unknown"
#endif

namespace curvedit {

using json = nlohmann::json;

inline constexpr int kManifestVersion = 1;

inline std::string build_id() { return CURVEDIT_BUILD_ID; }

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

inline void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

inline std::string file_hash(const std::string& path) { return hex64(hash_bytes(read_file(path))); }

// ---- manifest ----

/// Re-parses the config snapshot stored in a manifest.
inline ParsedConfig manifest_config(const json& manifest) {
  std::string text;
  for (const auto& [k, v] : manifest.at("config").items()) text += k + " = " + v.get<std::string>() + "\n";
  return parse_config(text, "manifest config");
}

inline std::string manifest_dir(const std::string& manifest_path) {
  const auto p = std::filesystem::path(manifest_path).parent_path();
  return p.empty() ? "." : p.string();
}

inline json read_manifest(const std::string& path) {
  json m;
  try {
    m = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": not a JSON manifest: " + e.what());
  }
  if (!m.contains("manifest_version") || m["manifest_version"] != kManifestVersion)
    throw FormatError(path + ": unsupported manifest version");
  for (const char* key : {"config", "artifacts"})
    if (!m.contains(key)) throw FormatError(path + ": manifest lacks '" + key + "'");
  return m;
}

// ---- training ----

struct TrainRunResult {
  json manifest;
  std::string manifest_path;
  HeldOutReport heldout;
  bool aborted = false;
  std::string message;
};

struct TrainRunOptions {
  std::size_t log_every = 0;  // 0: silent
  std::ostream* log = nullptr;
  bool evaluate_heldout = true;
};

/// Trains from a parsed config into config.out_dir (or `out_dir` when given):
/// flow.ckpt, recon.ckpt, loss.csv and manifest.json. A non-finite loss stops
/// training; the models are left at the last healthy step and still saved.
inline TrainRunResult run_training(const ParsedConfig& pc, const std::string& out_dir_override = {},
                                   const TrainRunOptions& opts = {}) {
  const RunConfig& cfg = pc.config;
  const std::string out_dir = out_dir_override.empty() ? cfg.out_dir : out_dir_override;
  std::filesystem::create_directories(out_dir);
  const auto path = [&](const std::string& name) { return (std::filesystem::path(out_dir) / name).string(); };

  TrainRunResult result;
  json& m = result.manifest;
  m["manifest_version"] = kManifestVersion;
  m["build_id"] = build_id();
  m["started_at"] = utc_timestamp();
  m["config"] = pc.values;
  m["defaults_applied"] = pc.defaulted;
  m["seeds"] = {{"world", cfg.world.seed},
                {"flow", cfg.flow.seed},
                {"reconstructor", cfg.recon.seed},
                {"train", cfg.train.seed}};
  m["artifacts"] = {{"flow_checkpoint", "flow.ckpt"},
                    {"reconstructor_checkpoint", "recon.ckpt"},
                    {"loss_csv", "loss.csv"}};

  const SyntheticWorld world(cfg.world);
  FlowModel flow = FlowModel::create(cfg.flow);
  Reconstructor recon(cfg.recon);
  Trainer trainer(world, flow, recon, cfg.train);
  auto save = [&](std::size_t) {
    write_file_atomic(path("flow.ckpt"), flow.to_checkpoint().serialize());
    write_file_atomic(path("recon.ckpt"), recon.to_checkpoint().serialize());
  };
  auto on_step = [&](std::size_t it, const LossBreakdown& l) {
    if (opts.log && opts.log_every && it % opts.log_every == 0) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "iter %zu  L_cls %.4f  L_reg %.4f  L_nl %.3g  total %.4f\n", it, l.cls, l.reg,
                    l.nl, l.total);
      *opts.log << buf << std::flush;
    }
  };
  try {
    trainer.run(cfg.train.iterations, on_step, save);
    m["status"] = "completed";
  } catch (const TrainingAborted& e) {
    save(trainer.iteration());
    result.aborted = true;
    result.message = e.what();
    m["status"] = "aborted";
    m["abort_reason"] = e.what();
  }
  write_loss_csv(path("loss.csv"), trainer.history());
  m["iterations_completed"] = trainer.iteration();
  if (opts.evaluate_heldout && !result.aborted) {
    result.heldout = evaluate_reconstructor(world, flow, recon, cfg.train, cfg.eval.heldout_pairs,
                                            cfg.eval.heldout_seed);
    m["heldout"] = {{"k_accuracy", result.heldout.k_accuracy},
                    {"amount_mae", result.heldout.amount_mae},
                    {"pairs", result.heldout.pairs}};
  }
  m["hashes"] = {{"flow_checkpoint", file_hash(path("flow.ckpt"))},
                 {"reconstructor_checkpoint", file_hash(path("recon.ckpt"))},
                 {"loss_csv", file_hash(path("loss.csv"))}};
  m["finished_at"] = utc_timestamp();
  result.manifest_path = path("manifest.json");
  write_text(result.manifest_path, m.dump(2) + "\n");
  return result;
}

// ---- loading ----

/// A trained run reloaded from its manifest. Models are immutable after load.
struct LoadedRun {
  json manifest;
  std::string directory;
  RunConfig config;
  std::shared_ptr<const SyntheticWorld> world;
  std::shared_ptr<const FlowModel> flow;
  std::shared_ptr<const Reconstructor> recon;
};

inline LoadedRun load_run(const std::string& manifest_path) {
  LoadedRun r;
  r.manifest = read_manifest(manifest_path);
  r.directory = manifest_dir(manifest_path);
  r.config = manifest_config(r.manifest).config;
  const auto& art = r.manifest["artifacts"];
  const auto artifact = [&](const char* key) {
    if (!art.contains(key)) throw FormatError(manifest_path + ": manifest lacks artifact '" + key + "'");
    return (std::filesystem::path(r.directory) / art[key].get<std::string>()).string();
  };
  r.world = std::make_shared<const SyntheticWorld>(r.config.world);
  r.flow = std::make_shared<const FlowModel>(
      FlowModel::from_checkpoint(Checkpoint::deserialize(read_file(artifact("flow_checkpoint")))));
  r.recon = std::make_shared<const Reconstructor>(
      Reconstructor::from_checkpoint(Checkpoint::deserialize(read_file(artifact("reconstructor_checkpoint")))));
  if (r.flow->dim() != r.world->dim())
    throw FormatError(manifest_path + ": flow dimension does not match the world");
  return r;
}

/// The baseline directions of a linear flow: a_k = M^-1 e_k.
inline LinearBackend linear_backend_from(const FlowModel& f, std::size_t attributes) {
  if (f.kind() != FlowKind::linear) throw std::invalid_argument("linear baseline needs a linear flow");
  const Tensor dirs = LinearBackend::from_matrix(std::get<LinearFlow>(f.impl()).matrix()).directions();
  const std::size_t n = f.dim();
  return LinearBackend(Tensor(Shape{attributes, n},
                              std::vector<double>(dirs.storage().begin(), dirs.storage().begin() + attributes * n)));
}

/// Backend by name for a loaded run. `linear` needs either a linear-flow run
/// or a linear baseline run.
inline EditBackend make_backend(BackendKind kind, const LoadedRun& run, const LoadedRun* linear_baseline = nullptr) {
  const std::size_t attrs = run.config.train.edit_dims;
  switch (kind) {
    case BackendKind::decurved: return EditBackend(DecurvedBackend(run.flow, attrs));
    case BackendKind::linear: {
      const LoadedRun* src = run.flow->kind() == FlowKind::linear ? &run : linear_baseline;
      if (!src) throw std::invalid_argument("linear backend needs a linear-flow run (pass a baseline manifest)");
      return EditBackend(linear_backend_from(*src->flow, attrs));
    }
    case BackendKind::warped:
      return EditBackend(WarpedBackend::random(run.world->dim(), attrs, run.config.eval.warped_seed));
  }
  throw std::logic_error("unreachable backend kind");
}

// ---- evaluation ----

enum class Metric { commutativity, side_effect, identity };

inline Metric parse_metric(const std::string& s) {
  if (s == "commutativity") return Metric::commutativity;
  if (s == "side_effect") return Metric::side_effect;
  if (s == "identity") return Metric::identity;
  throw std::invalid_argument("unknown metric '" + s + "' (commutativity, side_effect, identity)");
}

inline EvaluationConfig evaluation_config(const RunConfig& c, const std::set<Metric>& metrics) {
  EvaluationConfig e;
  e.sweep = {c.eval.tau, c.eval.delta};
  e.sweep_samples = c.eval.sweep_samples;
  e.normalize_samples = c.eval.normalize_samples;
  e.metric_samples = c.eval.metric_samples;
  e.seed = c.eval.seed;
  e.commutativity = metrics.count(Metric::commutativity) > 0;
  e.side_effect = metrics.count(Metric::side_effect) > 0;
  e.identity = metrics.count(Metric::identity) > 0;
  return e;
}

struct EvalOutput {
  MetricReport report;
  std::string csv_path;
  std::string table_path;
  bool all_identified = true;
};

/// Writes report_<backend>.csv and report_<backend>.txt into out_dir.
inline EvalOutput evaluate_and_write(const EditBackend& backend, const LoadedRun& run,
                                     const std::set<Metric>& metrics, const std::string& out_dir) {
  EvalOutput out;
  out.report = evaluate_backend(backend, *run.world, evaluation_config(run.config, metrics));
  for (AttributeStatus s : out.report.status)
    if (s == AttributeStatus::unidentifiable) out.all_identified = false;
  std::filesystem::create_directories(out_dir);
  const std::string base = (std::filesystem::path(out_dir) / ("report_" + out.report.backend)).string();
  out.csv_path = base + ".csv";
  out.table_path = base + ".txt";
  write_text(out.csv_path, to_csv(out.report));
  write_text(out.table_path, format_report_table(out.report));
  return out;
}

// ---- latent and edit parsing for the command line ----

/// "k:t" items separated by commas, e.g. "0:1.5,3:-0.25".
inline std::vector<EditRequest> parse_edit_list(const std::string& s) {
  std::vector<EditRequest> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("edit '" + item + "' is not k:t");
    std::size_t used = 0;
    EditRequest r;
    try {
      r.k = std::stoul(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("k");
      const std::string ts = item.substr(colon + 1);
      r.t = std::stod(ts, &used);
      if (used != ts.size()) throw std::invalid_argument("t");
    } catch (const std::logic_error&) {
      throw std::invalid_argument("edit '" + item + "' is not k:t");
    }
    out.push_back(r);
  }
  return out;
}

/// Comma-separated latent values.
inline Tensor parse_latent(const std::string& s, std::size_t dim) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double x = 0.0;
    if (const std::string e = detail::parse_double(detail::trim(item), x); !e.empty())
      throw std::invalid_argument("latent: " + e);
    v.push_back(x);
  }
  if (v.size() != dim)
    throw std::invalid_argument("latent has " + std::to_string(v.size()) + " values, expected " + std::to_string(dim));
  return Tensor(Shape{dim}, std::move(v));
}

}  // namespace curvedit
