#include <gtest/gtest.h>

#include <filesystem>

#include "curvedit/run.hpp"

using namespace curvedit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("curvedit_run_" + name);
  fs::remove_all(p);
  return p;
}

std::string tiny_config(std::size_t iterations, const std::string& extra = "") {
  return "config_version = 1\n"
         "train.iterations = " + std::to_string(iterations) + "\n"
         "train.batch = 3\n"
         "flow.layers = 2\nflow.hidden = 8\n"
         "recon.hidden = 16\n"
         "eval.heldout_pairs = 10\n"
         "eval.sweep_samples = 6\neval.metric_samples = 6\neval.normalize_samples = 6\n" +
         extra;
}

TrainRunResult train_into(const fs::path& dir, std::size_t iterations, const std::string& extra = "") {
  return run_training(parse_config(tiny_config(iterations, extra)), dir.string());
}

}  // namespace

TEST(Run, ZeroIterationsWritesEveryArtifact) {
  const fs::path dir = scratch("zero");
  const TrainRunResult r = train_into(dir, 0);
  for (const char* f : {"flow.ckpt", "recon.ckpt", "loss.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const json m = read_manifest((dir / "manifest.json").string());
  EXPECT_EQ(m["manifest_version"], kManifestVersion);
  EXPECT_EQ(m["status"], "completed");
  EXPECT_EQ(m["iterations_completed"], 0);
  EXPECT_EQ(m["config"]["train.iterations"], "0");
  EXPECT_EQ(m["seeds"]["flow"], 1);
  EXPECT_TRUE(m.contains("build_id"));
  EXPECT_TRUE(m.contains("started_at"));
  EXPECT_EQ(m["hashes"]["flow_checkpoint"], file_hash((dir / "flow.ckpt").string()));
  EXPECT_EQ(m["hashes"]["loss_csv"], file_hash((dir / "loss.csv").string()));
  EXPECT_EQ(m["heldout"]["pairs"], 10);
  EXPECT_EQ(r.manifest, m);

  const auto defaults = m["defaults_applied"].get<std::vector<std::string>>();
  EXPECT_NE(std::find(defaults.begin(), defaults.end(), "train.lambda"), defaults.end());
  EXPECT_EQ(std::find(defaults.begin(), defaults.end(), "train.batch"), defaults.end());
}

TEST(Run, UntrainedCheckpointsMatchFreshModels) {
  const fs::path dir = scratch("fresh");
  train_into(dir, 0);
  const ParsedConfig pc = parse_config(tiny_config(0));
  const FlowModel fresh = FlowModel::create(pc.config.flow);
  EXPECT_EQ(Checkpoint::deserialize(read_file((dir / "flow.ckpt").string())), fresh.to_checkpoint());
}

TEST(Run, IdenticalConfigsGiveIdenticalArtifacts) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  const TrainRunResult ra = train_into(a, 3), rb = train_into(b, 3);
  EXPECT_EQ(ra.manifest["hashes"], rb.manifest["hashes"]);
  EXPECT_EQ(file_hash((a / "recon.ckpt").string()), file_hash((b / "recon.ckpt").string()));
  EXPECT_EQ(read_text((a / "loss.csv").string()), read_text((b / "loss.csv").string()));

  const TrainRunResult rc = train_into(scratch("det_c"), 3, "train.seed = 8\n");
  EXPECT_NE(ra.manifest["hashes"]["flow_checkpoint"], rc.manifest["hashes"]["flow_checkpoint"]);
}

TEST(Run, LoadRunRestoresModelsAndConfig) {
  const fs::path dir = scratch("load");
  train_into(dir, 2, "world.seed = 5\n");
  const LoadedRun run = load_run((dir / "manifest.json").string());
  EXPECT_EQ(run.config.world.seed, 5u);
  EXPECT_EQ(run.config.train.iterations, 2u);
  EXPECT_EQ(run.flow->to_checkpoint(), Checkpoint::deserialize(read_file((dir / "flow.ckpt").string())));
  EXPECT_EQ(run.recon->to_checkpoint(), Checkpoint::deserialize(read_file((dir / "recon.ckpt").string())));
  const Tensor z = sample_latents(3, 8, 1);
  EXPECT_EQ(run.world->generate(z), SyntheticWorld(run.config.world).generate(z));
}

TEST(Run, ConfigSnapshotReparsesToTheSameValues) {
  const fs::path dir = scratch("snapshot");
  const TrainRunResult r = train_into(dir, 0, "train.lambda = 0.125\n");
  const ParsedConfig again = manifest_config(r.manifest);
  EXPECT_EQ(again.config.train.lambda, 0.125);
  EXPECT_EQ(json(again.values), r.manifest["config"]);
}

TEST(Run, MalformedManifestsAreRejected) {
  const fs::path dir = scratch("bad");
  fs::create_directories(dir);
  const std::string path = (dir / "manifest.json").string();
  write_text(path, "{ not json");
  EXPECT_THROW(read_manifest(path), std::exception);
  write_text(path, R"({"manifest_version": 2, "config": {}, "artifacts": {}})");
  EXPECT_THROW(read_manifest(path), FormatError);
  write_text(path, R"({"manifest_version": 1, "config": {}})");
  EXPECT_THROW(read_manifest(path), FormatError);
  EXPECT_THROW(read_manifest((dir / "missing.json").string()), std::exception);
}

TEST(Run, MissingArtifactFailsToLoad) {
  const fs::path dir = scratch("missing_artifact");
  train_into(dir, 0);
  fs::remove(dir / "recon.ckpt");
  EXPECT_THROW(load_run((dir / "manifest.json").string()), std::exception);
}

TEST(Run, LinearBaselineDirectionsStraightenTheLinearFlow) {
  const fs::path dir = scratch("linear");
  train_into(dir, 2, "flow.kind = linear\nflow.output_scale = 0.3\n");
  const LoadedRun run = load_run((dir / "manifest.json").string());
  const EditBackend b = make_backend(BackendKind::linear, run);
  const Tensor z = sample_latents(1, 8, 4).reshaped({8});
  const Tensor v = run.flow->forward_values(z);
  for (std::size_t k = 0; k < 8; ++k) {
    const Tensor moved = run.flow->forward_values(b.apply(z, k, 0.75));
    for (std::size_t i = 0; i < 8; ++i)
      EXPECT_NEAR(moved[i] - v[i], i == k ? 0.75 : 0.0, 1e-12) << "k=" << k << " i=" << i;
  }
}

TEST(Run, LinearBackendNeedsALinearFlow) {
  const fs::path dir = scratch("nonlinear");
  train_into(dir, 0);
  const LoadedRun run = load_run((dir / "manifest.json").string());
  EXPECT_THROW(make_backend(BackendKind::linear, run), std::invalid_argument);
  EXPECT_NO_THROW(make_backend(BackendKind::decurved, run));
  EXPECT_NO_THROW(make_backend(BackendKind::warped, run));
}

TEST(Run, EvaluateAndWriteRoundTripsTheReport) {
  const fs::path dir = scratch("eval");
  train_into(dir, 0);
  const LoadedRun run = load_run((dir / "manifest.json").string());
  const EvalOutput out = evaluate_and_write(make_backend(BackendKind::decurved, run), run,
                                            {Metric::commutativity, Metric::identity}, (dir / "eval").string());
  EXPECT_EQ(parse_metric_csv(read_text(out.csv_path)), out.report);
  EXPECT_EQ(read_text(out.table_path), format_report_table(out.report));
  EXPECT_TRUE(out.report.side_effect.empty());
}

TEST(Run, ParsesMetricNames) {
  EXPECT_EQ(parse_metric("side_effect"), Metric::side_effect);
  EXPECT_THROW(parse_metric("sideeffect"), std::invalid_argument);
}

TEST(Run, ParsesEditLists) {
  EXPECT_TRUE(parse_edit_list("").empty());
  const auto e = parse_edit_list("0:1.5,3:-0.25,7:2e-1");
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0], (EditRequest{0, 1.5}));
  EXPECT_EQ(e[1], (EditRequest{3, -0.25}));
  EXPECT_EQ(e[2], (EditRequest{7, 0.2}));
  for (const char* bad : {"1", "a:1", "1:x", "1:2:3", "1.5:2", ":2"})
    EXPECT_THROW(parse_edit_list(bad), std::invalid_argument) << bad;
}

TEST(Run, ParsesLatents) {
  const Tensor z = parse_latent(" 1, -2.5,0,3e-1", 4);
  EXPECT_EQ(z, Tensor(Shape{4}, {1.0, -2.5, 0.0, 0.3}));
  EXPECT_THROW(parse_latent("1,2,3", 4), std::invalid_argument);
  EXPECT_THROW(parse_latent("1,2,x,4", 4), std::invalid_argument);
  EXPECT_THROW(parse_latent("1,2,inf,4", 4), std::invalid_argument);
}
