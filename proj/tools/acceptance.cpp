// Runs every primary acceptance criterion and prints one PASS/FAIL line each.
// The reference and linear-baseline runs are trained into --work unless a
// completed run with the same config and intact artifacts is already there.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>

#include "curvedit/run.hpp"
#include "fd_oracle.hpp"

using namespace curvedit;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({name, pass, detail});
  std::cout << (pass ? "PASS  " : "FAIL  ") << name << ": " << detail << "\n" << std::flush;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor row(const Tensor& batch, std::size_t i) {
  const std::size_t n = batch.dim(1);
  return Tensor(Shape{n}, std::vector<double>(batch.storage().begin() + i * n, batch.storage().begin() + (i + 1) * n));
}

// ---- runs ----

bool reusable(const fs::path& dir, const ParsedConfig& pc) {
  const fs::path mp = dir / "manifest.json";
  if (!fs::exists(mp)) return false;
  try {
    const json m = read_manifest(mp.string());
    if (m.value("status", "") != "completed" || !m.contains("heldout")) return false;
    if (manifest_config(m).values != parse_config(format_config(pc.config)).values) return false;
    for (const auto& [key, file] : m["artifacts"].items())
      if (m["hashes"].value(key, "") != file_hash((dir / file.get<std::string>()).string())) return false;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

LoadedRun ensure_run(const std::string& config_path, const fs::path& dir) {
  ParsedConfig pc = parse_config(read_text(config_path), config_path);
  pc.config.out_dir = dir.string();
  pc.values["out_dir"] = dir.string();
  if (reusable(dir, pc)) {
    std::cout << "reusing " << dir.string() << "\n";
  } else {
    std::cout << "training " << config_path << " into " << dir.string() << "\n" << std::flush;
    TrainRunOptions opts;
    opts.log = &std::cout;
    opts.log_every = 1000;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainRunResult r = run_training(pc, {}, opts);
    std::cout << fmt("trained in %.1f s\n", seconds_since(t0));
    if (r.aborted) throw std::runtime_error("training aborted: " + r.message);
  }
  return load_run((dir / "manifest.json").string());
}

MetricReport evaluate(const EditBackend& b, const LoadedRun& run, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const EvalOutput out =
      evaluate_and_write(b, run, {Metric::commutativity, Metric::side_effect, Metric::identity}, dir.string());
  std::cout << format_report_table(out.report) << fmt("(%s evaluated in %.1f s)\n\n", out.report.backend.c_str(),
                                                      seconds_since(t0));
  return out.report;
}

// ---- criteria ----

double commutativity_max(const EditBackend& b, std::size_t triples, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = b.dim(), a = b.attributes();
  std::uniform_real_distribution<double> amount(-2.0, 2.0);
  std::uniform_int_distribution<std::size_t> idx(0, a - 1);
  double worst = 0.0;
  for (std::size_t i = 0; i < triples; ++i) {
    const Tensor z = normal_tensor(rng, {n});
    const std::size_t k = idx(rng);
    std::size_t l = idx(rng);
    while (l == k) l = idx(rng);
    const double t = amount(rng), s = amount(rng);
    const Tensor kl = edit(b, edit(b, z, {k, t}), {l, s});
    const Tensor lk = edit(b, edit(b, z, {l, s}), {k, t});
    worst = std::max(worst, max_abs_diff(kl, lk));
  }
  return worst;
}

FlowConfig cnf_config(std::size_t dim, std::uint64_t seed) {
  FlowConfig c;
  c.kind = FlowKind::cnf;
  c.dim = dim;
  c.tol = {1e-6, 1e-6};
  c.horizon = 0.5;
  c.seed = seed;
  return c;
}

void latent_commutativity(const LoadedRun& ref) {
  const auto t0 = std::chrono::steady_clock::now();
  const double coupling = commutativity_max(make_backend(BackendKind::decurved, ref), 1000, 101);
  const EditBackend cnf(DecurvedBackend(std::make_shared<const FlowModel>(FlowModel::create(cnf_config(8, 5)))));
  const double cnf_err = commutativity_max(cnf, 1000, 102);
  const double secs = seconds_since(t0);
  report("latent commutativity", coupling <= 1e-8 && cnf_err <= 1e-4 && secs < 60.0,
         fmt("1000 triples each; coupling max %.3g (<= 1e-8), cnf max %.3g (<= 1e-4), %.1f s (< 60 s)", coupling,
             cnf_err, secs));
}

void score_commutativity(const MetricReport& dec, const MetricReport& lin, const MetricReport& warped) {
  const double d = dec.max_commutativity(), l = lin.max_commutativity(), w = warped.max_commutativity();
  report("score-level commutativity", d <= 0.7 && l <= 0.7 && w > 1.0,
         fmt("max %% of score range: decurved %.3f, linear %.3f (<= 0.7); warped %.3f (> 1)", d, l, w));
}

void linear_reduction(const LoadedRun& baseline) {
  const EditBackend dec(DecurvedBackend(baseline.flow, baseline.config.train.edit_dims));
  const EditBackend lin = make_backend(BackendKind::linear, baseline);
  Rng rng(103);
  std::uniform_real_distribution<double> amount(-6.0, 6.0);
  std::uniform_int_distribution<std::size_t> idx(0, dec.attributes() - 1);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Tensor z = normal_tensor(rng, {dec.dim()});
    const EditRequest r{idx(rng), amount(rng)};
    worst = std::max(worst, max_abs_diff(edit(dec, z, r), edit(lin, z, r)));
  }
  report("linear reduction", worst <= 1e-12,
         fmt("trained linear f, 1000 edits: max |decurved - linear| %.3g (<= 1e-12)", worst));
}

std::vector<EditRequest> zero_sum_sequence(Rng& rng, std::size_t attributes) {
  std::uniform_real_distribution<double> amount(-2.0, 2.0);
  std::uniform_int_distribution<std::size_t> idx(0, attributes - 1);
  std::vector<EditRequest> seq;
  for (int j = 0; j < 3; ++j) seq.push_back({idx(rng), amount(rng)});
  std::vector<EditRequest> undo;
  for (const EditRequest& e : seq) undo.push_back({e.k, -e.t});
  std::shuffle(undo.begin(), undo.end(), rng);
  seq.insert(seq.end(), undo.begin(), undo.end());
  return seq;
}

void round_trip(const LoadedRun& ref) {
  const EditBackend dec = make_backend(BackendKind::decurved, ref);
  const SyntheticWorld& world = *ref.world;
  Rng rng(104);
  double latent = 0.0;
  int gray = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor z = normal_tensor(rng, {dec.dim()});
    const Tensor back = edit_sequence(dec, z, zero_sum_sequence(rng, dec.attributes()));
    latent = std::max(latent, max_abs_diff(back, z));
    gray = std::max(gray, max_gray_difference(world.generate_image(back), world.generate_image(z)));
  }
  // Seeded demo: two attributes up then down again.
  const EditBackend warped = make_backend(BackendKind::warped, ref);
  const Tensor z0 = sample_latents(1, dec.dim(), 0).reshaped({dec.dim()});
  const std::vector<EditRequest> demo{{0, 1.5}, {1, 1.5}, {0, -1.5}, {1, -1.5}};
  const Tensor wback = edit_sequence(warped, z0, demo);
  const double wlatent = max_abs_diff(wback, z0);
  const int wgray = max_gray_difference(world.generate_image(wback), world.generate_image(z0));
  const double dlatent = max_abs_diff(edit_sequence(dec, z0, demo), z0);
  report("round-trip editing", latent <= 1e-6 && gray <= 1 && dlatent <= 1e-6 && wlatent > 1e-6,
         fmt("decurved 100 zero-sum sequences: latent %.3g (<= 1e-6), %d gray levels (<= 1); demo: decurved %.3g, "
             "warped %.3g latent / %d gray levels (must exceed 1e-6)",
             latent, gray, dlatent, wlatent, wgray));
}

double fd_logdet(const FlowModel& f, const Tensor& z, double h = 1e-5) {
  const std::size_t n = z.size();
  Tensor jac(Shape{n, n});
  for (std::size_t j = 0; j < n; ++j) {
    Tensor zp = z, zm = z;
    zp[j] += h;
    zm[j] -= h;
    const Tensor vp = f.forward_values(zp), vm = f.forward_values(zm);
    for (std::size_t i = 0; i < n; ++i) jac[i * n + j] = (vp[i] - vm[i]) / (2 * h);
  }
  return linalg::log_abs_det(jac).first;
}

void flow_numerics(const LoadedRun& ref) {
  Rng rng(105);
  const Tensor zs = normal_tensor(rng, {1000, 8}, 1.5);
  const FlowModel& coupling = *ref.flow;
  const double c_inv = std::max(max_abs_diff(coupling.inverse_values(coupling.forward_values(zs)), zs),
                                max_abs_diff(coupling.forward_values(coupling.inverse_values(zs)), zs));
  const FlowModel cnf = FlowModel::create(cnf_config(8, 5));
  const Tensor zc = normal_tensor(rng, {100, 8});
  const double n_inv = max_abs_diff(cnf.inverse_values(cnf.forward_values(zc)), zc);

  double ld = 0.0;
  for (std::size_t n : {2u, 4u, 6u}) {
    FlowConfig cc;
    cc.kind = FlowKind::coupling;
    cc.dim = n;
    cc.hidden = 16;
    cc.output_scale = 0.8;
    cc.seed = 10 + n;
    const FlowModel flows[] = {FlowModel::create(cc), FlowModel::create(cnf_config(n, 20 + n))};
    const Tensor z = normal_tensor(rng, {5, n});
    for (const FlowModel& f : flows)
      for (std::size_t i = 0; i < 5; ++i) {
        const Tensor zi = row(z, i);
        ld = std::max(ld, std::abs(f.forward_with_logdet(zi).second[0] - fd_logdet(f, zi)));
      }
  }

  Rng init(12);
  ConcatsquashDynamics dyn(6, 8, init);
  const Tensor u0 = normal_tensor(rng, {1, 6});
  double exact;
  {
    Tape t;
    exact = integrate_with_exact_trace(dyn.bind(t, false), t.constant(u0), 0.0, 0.1).second.value()[0];
  }
  Tape t;
  Rng probes(14);
  const HutchinsonResult h = logdet_hutchinson(dyn.bind(t, false), t.constant(u0), 0.0, 0.1, 1000, probes);
  double mean = 0.0, sq = 0.0;
  for (double v : h.per_probe.data()) mean += v;
  mean /= 1000.0;
  for (double v : h.per_probe.data()) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / 999.0 / 1000.0);
  const double sigmas = std::abs(mean - exact) / se;

  report("flow numerics", c_inv <= 1e-9 && n_inv <= 1e-5 && ld <= 1e-3 && sigmas <= 3.0,
         fmt("inverse consistency coupling %.3g (<= 1e-9), cnf %.3g (<= 1e-5); log-det vs FD Jacobian, N <= 6: "
             "%.3g (<= 1e-3); Hutchinson over 1000 probes %.2f sigma from exact (<= 3)",
             c_inv, n_inv, ld, sigmas));
}

void lie_bracket(const LoadedRun& ref) {
  const EditBackend dec = make_backend(BackendKind::decurved, ref);
  Rng rng(106);
  std::uniform_int_distribution<std::size_t> idx(0, dec.attributes() - 1);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Tensor z = normal_tensor(rng, {dec.dim()});
    const std::size_t k = idx(rng);
    std::size_t l = idx(rng);
    while (l == k) l = idx(rng);
    worst = std::max(worst, lie_bracket_residual(dec, z, k, l));
  }
  const EditBackend warped = make_backend(BackendKind::warped, ref);
  const double w = lie_bracket_residual(warped, sample_latents(1, dec.dim(), 0).reshaped({dec.dim()}), 0, 1);
  report("Lie bracket", worst <= 1e-5 && w >= 1e-2,
         fmt("decurved max residual over 100 points %.3g (<= 1e-5); warped at seeded point %.3g (>= 1e-2)", worst,
             w));
}

void gradient_checks() {
  WorldConfig wc;
  wc.dim = 4;
  wc.seed = 77;
  const SyntheticWorld world(wc);
  FlowConfig fc;
  fc.kind = FlowKind::coupling;
  fc.dim = 4;
  fc.layers = 2;
  fc.hidden = 8;
  fc.output_scale = 0.5;
  fc.seed = 3;
  FlowModel flow = FlowModel::create(fc);
  ReconstructorConfig rc;
  rc.attributes = 4;
  rc.channels = {2, 2, 2};
  rc.hidden = 8;
  rc.seed = 5;
  Reconstructor recon(rc);
  Rng jitter(21);
  for (std::size_t p = 0; p < recon.params().size(); ++p)
    if (recon.params().name(p).ends_with(".b"))
      recon.params().value(p) = uniform_tensor(jitter, recon.params().value(p).shape(), 0.1);
  TrainConfig cfg;
  cfg.batch = 3;
  cfg.edit_dims = 4;
  Rng rng(9);
  const Batch batch = sample_batch(rng, cfg.batch, 4, cfg);

  auto loss_value = [&]() {
    Tape tape;
    const Bound fb = flow.bind(tape, false), rb = recon.bind(tape, false), wb = world.bind_warp(tape);
    return objective(tape, world, flow, fb, recon, rb, wb, batch, cfg).values().total;
  };
  Tape tape;
  const Bound fb = flow.bind(tape, true), rb = recon.bind(tape, true), wb = world.bind_warp(tape);
  const ObjectiveTerms terms = objective(tape, world, flow, fb, recon, rb, wb, batch, cfg);
  std::vector<Var> params = fb.vars();
  params.insert(params.end(), rb.vars().begin(), rb.vars().end());
  const auto grads = tape.gradients(terms.total, params);

  double worst = 0.0;
  std::size_t checked = 0;
  auto check = [&](ParamStore& store, std::size_t offset) {
    for (std::size_t p = 0; p < store.size(); ++p) {
      Tensor& w = store.value(p);
      for (std::size_t j = 0; j < w.size(); j += std::max<std::size_t>(1, w.size() / 4)) {
        const double an = grads[offset + p] ? (*grads[offset + p])[j] : 0.0;
        const double fd_val = fd::gradient(
            [&](const Tensor& x) {
              const double keep = w[j];
              w[j] = x[0];
              const double v = loss_value();
              w[j] = keep;
              return v;
            },
            Tensor::vector({w[j]}))[0];
        worst = std::max(worst, std::abs(an - fd_val) / std::max(1.0, std::abs(fd_val)));
        ++checked;
      }
    }
  };
  check(flow.params(), 0);
  check(recon.params(), flow.params().size());
  report("gradient checks", worst <= 1e-4,
         fmt("full objective on N=4, %zu entries across every parameter tensor: max relative error %.3g (<= 1e-4)",
             checked, worst));
}

void training_outcome(const LoadedRun& ref, const MetricReport& dec, const MetricReport& lin) {
  const double acc = ref.manifest["heldout"]["k_accuracy"].get<double>();
  const std::size_t pairs = ref.manifest["heldout"]["pairs"].get<std::size_t>();
  const double sd = dec.mean_off_diagonal_side_effect(), sl = lin.mean_off_diagonal_side_effect();
  const double id = dec.mean_identity(), il = lin.mean_identity();
  report("training outcome (a) held-out k-accuracy", acc >= 0.9,
         fmt("%.2f%% over %zu pairs (>= 90%%)", 100.0 * acc, pairs));
  report("training outcome (b) side effect", sd < sl,
         fmt("mean off-diagonal side effect: decurved %.3f < linear %.3f", sd, sl));
  report("training outcome (c) identity", id < il, fmt("mean identity error: decurved %.3f < linear %.3f", id, il));
}

void eps_distribution() {
  Rng rng(107);
  const TrainConfig cfg;
  std::size_t inside = 0;
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double e = sample_edit(rng, cfg.edit_dims, cfg.eps_bound, cfg.eps_floor).eps;
    inside += std::abs(e) < 0.1;
    lo = std::min(lo, e);
    hi = std::max(hi, e);
  }
  report("eps sampling distribution", inside == 0 && lo >= -6.0 && hi <= 6.0,
         fmt("1e5 draws: %zu in (-0.1, 0.1) (0), range [%.4f, %.4f] within [-6, 6]", inside, lo, hi));
}

void determinism(const std::string& config_path, const fs::path& work, std::size_t iterations) {
  std::vector<std::string> hashes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = work / (i == 0 ? "determinism_a" : "determinism_b");
    fs::remove_all(dir);
    const std::string text = read_text(config_path);
    ParsedConfig pc = parse_config(text, config_path);
    pc.config.train.iterations = iterations;
    pc.config.eval.sweep_samples = pc.config.eval.metric_samples = pc.config.eval.normalize_samples = 20;
    pc.config.eval.heldout_pairs = 100;
    pc = parse_config(format_config(pc.config));
    run_training(pc, dir.string());
    const LoadedRun run = load_run((dir / "manifest.json").string());
    const EvalOutput out = evaluate_and_write(make_backend(BackendKind::decurved, run), run,
                                              {Metric::commutativity, Metric::side_effect, Metric::identity},
                                              (dir / "eval").string());
    hashes[i] = {file_hash((dir / "flow.ckpt").string()), file_hash((dir / "recon.ckpt").string()),
                 file_hash((dir / "loss.csv").string()), file_hash(out.csv_path)};
  }
  report("determinism", hashes[0] == hashes[1],
         fmt("two %zu-iteration runs from one config: flow %s/%s, recon %s/%s, report %s/%s", iterations,
             hashes[0][0].c_str(), hashes[1][0].c_str(), hashes[0][1].c_str(), hashes[1][1].c_str(),
             hashes[0][3].c_str(), hashes[1][3].c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Primary acceptance criteria"};
  std::string work = "acceptance", reference = "configs/reference.cfg", baseline = "configs/linear_baseline.cfg";
  std::size_t det_iterations = 200;
  app.add_option("--work", work, "directory for runs and reports");
  app.add_option("--reference", reference, "reference run config")->check(CLI::ExistingFile);
  app.add_option("--baseline", baseline, "linear baseline run config")->check(CLI::ExistingFile);
  app.add_option("--determinism-iterations", det_iterations, "iterations of each determinism run");
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path w(work);
    eps_distribution();
    gradient_checks();

    const LoadedRun ref = ensure_run(reference, w / "reference");
    const LoadedRun base = ensure_run(baseline, w / "linear_baseline");
    latent_commutativity(ref);
    linear_reduction(base);
    round_trip(ref);
    flow_numerics(ref);
    lie_bracket(ref);

    const MetricReport dec = evaluate(make_backend(BackendKind::decurved, ref), ref, w / "reports");
    const MetricReport lin = evaluate(make_backend(BackendKind::linear, ref, &base), ref, w / "reports");
    const MetricReport warped = evaluate(make_backend(BackendKind::warped, ref), ref, w / "reports");
    score_commutativity(dec, lin, warped);
    training_outcome(ref, dec, lin);
    determinism(reference, w, det_iterations);
  } catch (const std::exception& e) {
    report("harness", false, e.what());
  }

  std::size_t failed = 0;
  for (const Verdict& v : verdicts) failed += !v.pass;
  std::cout << "\n" << verdicts.size() - failed << " of " << verdicts.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
