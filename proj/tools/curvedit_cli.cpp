#include <CLI11.hpp>
#include <httplib.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "curvedit/run.hpp"
#include "curvedit/service_http.hpp"

using namespace curvedit;

namespace {

enum Exit { kOk = 0, kError = 1, kAborted = 2, kUnidentifiable = 3 };

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::size_t log_every) {
  const std::string text = read_text(config_path);
  // A manifest re-runs its own config snapshot.
  const ParsedConfig pc = text.find_first_not_of(" \t\r\n") != std::string::npos &&
                                  text[text.find_first_not_of(" \t\r\n")] == '{'
                              ? manifest_config(read_manifest(config_path))
                              : parse_config(text, config_path);
  TrainRunOptions opts;
  opts.log = &std::cout;
  opts.log_every = log_every;
  const TrainRunResult r = run_training(pc, out_dir, opts);
  std::cout << "manifest: " << r.manifest_path << "\n";
  if (r.aborted) {
    std::cerr << "training aborted: " << r.message << "\n";
    return kAborted;
  }
  std::printf("held-out k-accuracy: %.2f%% over %zu pairs, mean |amount error| %.4f\n",
              100.0 * r.heldout.k_accuracy, r.heldout.pairs, r.heldout.amount_mae);
  return kOk;
}

int cmd_eval(const std::string& manifest, const std::string& baseline, const std::string& metrics_s,
             const std::string& backends_s, const std::string& out_dir) {
  const LoadedRun run = load_run(manifest);
  std::optional<LoadedRun> base;
  if (!baseline.empty()) base = load_run(baseline);
  std::set<Metric> metrics;
  if (metrics_s != "none")
    for (const std::string& m : split(metrics_s)) metrics.insert(parse_metric(m));
  if (metrics.empty()) {
    std::cout << "manifest ok; no metrics requested\n";
    return kOk;
  }
  const std::string dir = out_dir.empty() ? (std::filesystem::path(run.directory) / "eval").string() : out_dir;
  int code = kOk;
  for (const std::string& b : split(backends_s)) {
    const EditBackend backend = make_backend(parse_backend_kind(b), run, base ? &*base : nullptr);
    const EvalOutput out = evaluate_and_write(backend, run, metrics, dir);
    std::cout << format_report_table(out.report) << "wrote " << out.csv_path << "\n\n";
    if (!out.all_identified) code = kUnidentifiable;
  }
  return code;
}

int cmd_edit(const std::string& manifest, const std::string& backend_s, std::uint64_t seed, const std::string& z_s,
             const std::string& edits_s, const std::string& out_dir, const std::string& format, bool frames) {
  const LoadedRun run = load_run(manifest);
  const EditBackend backend = make_backend(parse_backend_kind(backend_s), run);
  const std::size_t n = run.world->dim();
  const Tensor z0 = z_s.empty() ? sample_latents(1, n, seed).reshaped({n}) : parse_latent(z_s, n);
  const std::vector<EditRequest> edits = parse_edit_list(edits_s);
  for (const EditRequest& e : edits) validate(backend, e);
  std::filesystem::create_directories(out_dir);
  const bool png = format == "png";
  const auto save = [&](const std::string& name, const Tensor& z) {
    const GrayImage img = run.world->generate_image(z);
    const std::string path = (std::filesystem::path(out_dir) / (name + (png ? ".png" : ".pgm"))).string();
    write_file(path, png ? encode_png(img) : encode_pgm(img));
    return hex64(hash_bytes(img.pixels));
  };
  const std::string before = save("before", z0);
  EditLog log;
  Tensor z = z0;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    z = edit(backend, z, edits[i], &log);
    if (frames) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu", i + 1);
      save(name, z);
    }
  }
  const std::string after = save("after", z);
  std::string trace;
  for (const TraceRecord& r : log.records) trace += format_trace_record(r) + "\n";
  write_text((std::filesystem::path(out_dir) / "trace.txt").string(), trace);
  for (const std::string& w : log.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "before " << before << "\nafter  " << after << "\n";
  return kOk;
}

int cmd_serve(const std::string& manifest, const std::string& baseline, const std::string& host, int port) {
  const LoadedRun run = load_run(manifest);
  std::optional<LoadedRun> base;
  if (!baseline.empty()) base = load_run(baseline);
  std::map<BackendKind, EditBackend> backends;
  backends.emplace(BackendKind::decurved, make_backend(BackendKind::decurved, run));
  backends.emplace(BackendKind::warped, make_backend(BackendKind::warped, run));
  if (run.flow->kind() == FlowKind::linear || base)
    backends.emplace(BackendKind::linear, make_backend(BackendKind::linear, run, base ? &*base : nullptr));
  ServiceConfig sc;
  sc.normalize_samples = run.config.eval.normalize_samples;
  sc.sweep_samples = run.config.eval.sweep_samples;
  sc.seed = run.config.eval.seed;
  EditService service(run.world, std::move(backends), sc);
  httplib::Server server;
  service.install(server);
  std::cout << "listening on http://" << host << ":" << port << "\n" << std::flush;
  if (!server.listen(host, port)) {
    std::cerr << "cannot listen on " << host << ":" << port << "\n";
    return kError;
  }
  return kOk;
}

int cmd_inspect(const std::string& path) {
  const Checkpoint c = Checkpoint::deserialize(read_file(path));
  std::cout << "version " << c.version << "\n";
  for (const auto& [k, v] : c.meta) std::cout << "meta " << k << " = " << v << "\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const Tensor& t = c.params.value(i);
    total += t.size();
    std::cout << "tensor " << c.params.name(i) << " " << shape_string(t.shape()) << " " << hex64(hash_tensor(t))
              << "\n";
  }
  std::cout << "parameters " << total << "\nfile hash " << file_hash(path) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curvilinear latent editing: train, evaluate, edit and serve"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::size_t log_every = 1000;
  auto* train = app.add_subcommand("train", "Train f and R from a config file (or re-run a manifest)");
  train->add_option("config", config_path, "config file or manifest.json")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "output directory (default: out_dir from the config)");
  train->add_option("--log-every", log_every, "print losses every N iterations (0: never)");

  std::string manifest, baseline, metrics = "commutativity,side_effect,identity", backends = "decurved,warped";
  std::string eval_out;
  auto* eval = app.add_subcommand("eval", "Identify indices, normalize amounts and write metric reports");
  eval->add_option("manifest", manifest, "run manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--baseline", baseline, "manifest of a linear-flow run for the linear backend");
  eval->add_option("--metrics", metrics, "comma-separated: commutativity, side_effect, identity; none only validates the run");
  eval->add_option("--backends", backends, "comma-separated: decurved, linear, warped");
  eval->add_option("--out", eval_out, "report directory (default: <run>/eval)");

  std::string edit_manifest, backend = "decurved", z, edits, edit_out = "edit_out", format = "png";
  std::uint64_t seed = 0;
  bool frames = false;
  auto* ed = app.add_subcommand("edit", "Apply a sequence of edits and write before/after images");
  ed->add_option("manifest", edit_manifest, "run manifest")->required()->check(CLI::ExistingFile);
  ed->add_option("--backend", backend, "decurved, linear or warped");
  ed->add_option("--seed", seed, "latent seed when --z is not given");
  ed->add_option("--z", z, "comma-separated latent");
  ed->add_option("--edits", edits, "edit list k:t,k:t (0-based k, latent amounts)");
  ed->add_option("--out", edit_out, "output directory");
  ed->add_option("--format", format, "png or pgm")->check(CLI::IsMember({"png", "pgm"}));
  ed->add_flag("--frames", frames, "also write one image per edit");

  std::string serve_manifest, serve_baseline, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve the JSON editing API over HTTP");
  serve->add_option("manifest", serve_manifest, "run manifest")->required()->check(CLI::ExistingFile);
  serve->add_option("--baseline", serve_baseline, "manifest of a linear-flow run");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  std::string ckpt;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print checkpoint metadata and tensors");
  inspect->add_option("checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config_path, out_dir, log_every);
    if (*eval) return cmd_eval(manifest, baseline, metrics, backends, eval_out);
    if (*ed) return cmd_edit(edit_manifest, backend, seed, z, edits, edit_out, format, frames);
    if (*serve) return cmd_serve(serve_manifest, serve_baseline, host, port);
    if (*inspect) return cmd_inspect(ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kOk;
}
