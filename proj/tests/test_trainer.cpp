#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "curvedit/trainer.hpp"
#include "fd_oracle.hpp"

using namespace curvedit;

namespace {

FlowConfig small_flow(FlowKind kind, std::size_t dim) {
  FlowConfig c;
  c.kind = kind;
  c.dim = dim;
  c.layers = 2;
  c.hidden = 8;
  c.output_scale = 0.5;
  c.seed = 3;
  return c;
}

ReconstructorConfig small_recon(std::size_t attributes) {
  ReconstructorConfig c;
  c.attributes = attributes;
  c.channels = {2, 2, 2};
  c.hidden = 8;
  c.seed = 5;
  return c;
}

TrainConfig small_train(std::size_t edit_dims) {
  TrainConfig t;
  t.batch = 4;
  t.edit_dims = edit_dims;
  t.learning_rate = 1e-3;
  return t;
}

}  // namespace

TEST(AmountSampling, SmallDrawRoundsUpToFloor) {
  EXPECT_DOUBLE_EQ(round_up_amount(0.05, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(round_up_amount(-0.05, 0.1), -0.1);
  EXPECT_DOUBLE_EQ(round_up_amount(0.0, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(round_up_amount(-3.25, 0.1), -3.25);
}

TEST(AmountSampling, DistributionOverManyDraws) {
  Rng rng(11);
  const std::size_t n = 100000, dims = 8;
  std::vector<std::size_t> counts(dims);
  double sum = 0.0, sum_abs = 0.0;
  std::size_t floored = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const SampledEdit e = sample_edit(rng, dims, 6.0, 0.1);
    ASSERT_LT(e.k, dims);
    ASSERT_GE(std::abs(e.eps), 0.1);
    ASSERT_LE(std::abs(e.eps), 6.0);
    ++counts[e.k];
    sum += e.eps;
    sum_abs += std::abs(e.eps);
    floored += std::abs(e.eps) == 0.1;
  }
  for (std::size_t c : counts) EXPECT_NEAR(double(c) / n, 1.0 / dims, 0.005);
  EXPECT_NEAR(sum / n, 0.0, 0.05);
  // E|eps| = (0.1 * 0.1 + (36 - 0.01) / 2) / 6
  EXPECT_NEAR(sum_abs / n, (0.01 + 35.99 / 2.0) / 6.0, 0.03);
  EXPECT_NEAR(double(floored) / n, 0.1 / 6.0, 0.002);
}

TEST(TrainConfigValidation, RejectsBadValues) {
  TrainConfig t;
  t.edit_dims = 9;
  EXPECT_THROW(t.validate(8), std::invalid_argument);
  t.edit_dims = 8;
  t.batch = 0;
  EXPECT_THROW(t.validate(8), std::invalid_argument);
  t.batch = 1;
  t.lambda = -1;
  EXPECT_THROW(t.validate(8), std::invalid_argument);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  WorldConfig wc;
  wc.dim = 4;
  wc.seed = 77;
  const SyntheticWorld world(wc);
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 4));
  Reconstructor recon(small_recon(4));
  // Zero biases put dead relu inputs exactly on the kink.
  Rng jitter(21);
  for (std::size_t p = 0; p < recon.params().size(); ++p)
    if (recon.params().name(p).ends_with(".b"))
      recon.params().value(p) = uniform_tensor(jitter, recon.params().value(p).shape(), 0.1);
  TrainConfig cfg = small_train(4);
  cfg.batch = 2;
  Rng rng(9);
  const Batch batch = sample_batch(rng, 2, 4, cfg);

  auto loss_value = [&]() {
    Tape tape;
    const Bound fb = flow.bind(tape, false), rb = recon.bind(tape, false), wb = world.bind_warp(tape);
    return objective(tape, world, flow, fb, recon, rb, wb, batch, cfg).values().total;
  };

  Tape tape;
  const Bound fb = flow.bind(tape, true), rb = recon.bind(tape, true), wb = world.bind_warp(tape);
  ObjectiveTerms terms = objective(tape, world, flow, fb, recon, rb, wb, batch, cfg);
  std::vector<Var> params = fb.vars();
  params.insert(params.end(), rb.vars().begin(), rb.vars().end());
  const auto grads = tape.gradients(terms.total, params);

  // A few entries of every parameter tensor.
  auto check = [&](ParamStore& store, std::size_t offset) {
    for (std::size_t p = 0; p < store.size(); ++p) {
      Tensor& w = store.value(p);
      ASSERT_TRUE(grads[offset + p].has_value()) << store.name(p);
      for (std::size_t j = 0; j < w.size(); j += std::max<std::size_t>(1, w.size() / 3)) {
        const double keep = w[j], h = 1e-6;
        w[j] = keep + h;
        const double up = loss_value();
        w[j] = keep - h;
        const double down = loss_value();
        w[j] = keep;
        const double fd = (up - down) / (2 * h);
        const double an = (*grads[offset + p])[j];
        EXPECT_NEAR(an, fd, 1e-4 * std::max(1.0, std::abs(fd))) << store.name(p) << "[" << j << "]";
      }
    }
  };
  check(flow.params(), 0);
  check(recon.params(), flow.params().size());
}

TEST(Objective, IdentityFlowHasNoLogdetPenalty) {
  WorldConfig wc;
  wc.dim = 4;
  const SyntheticWorld world(wc);
  FlowModel flow = FlowModel::identity(4);
  Reconstructor recon(small_recon(4));
  TrainConfig cfg = small_train(4);
  Rng rng(1);
  const Batch batch = sample_batch(rng, 4, 4, cfg);
  Tape tape;
  const Bound fb = flow.bind(tape, true), rb = recon.bind(tape, true), wb = world.bind_warp(tape);
  const LossBreakdown lb = objective(tape, world, flow, fb, recon, rb, wb, batch, cfg).values();
  EXPECT_EQ(lb.nl, 0.0);
  EXPECT_NEAR(lb.total, lb.cls + 0.25 * lb.reg, 1e-12);
}

TEST(Objective, AlphaZeroDropsLogdetTerm) {
  WorldConfig wc;
  wc.dim = 4;
  const SyntheticWorld world(wc);
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 4));
  Reconstructor recon(small_recon(4));
  TrainConfig cfg = small_train(4);
  cfg.alpha = 0.0;
  Rng rng(1);
  const Batch batch = sample_batch(rng, 4, 4, cfg);
  Tape tape;
  const Bound fb = flow.bind(tape, true), rb = recon.bind(tape, true), wb = world.bind_warp(tape);
  const LossBreakdown lb = objective(tape, world, flow, fb, recon, rb, wb, batch, cfg).values();
  EXPECT_GT(lb.nl, 0.0);
  EXPECT_NEAR(lb.total, lb.cls + 0.25 * lb.reg, 1e-12);
}

TEST(Trainer, ZeroIterationsLeavesModelsUnchanged) {
  const SyntheticWorld world;
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
  Reconstructor recon(small_recon(8));
  const ParamStore f0 = flow.params(), r0 = recon.params();
  Trainer trainer(world, flow, recon, small_train(8));
  std::size_t saved = 0;
  trainer.run(0, {}, [&](std::size_t) { ++saved; });
  EXPECT_EQ(flow.params(), f0);
  EXPECT_EQ(recon.params(), r0);
  EXPECT_EQ(trainer.iteration(), 0u);
  EXPECT_EQ(saved, 1u);
}

TEST(Trainer, RejectsMismatchedHeads) {
  const SyntheticWorld world;
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
  Reconstructor recon(small_recon(6));
  EXPECT_THROW(Trainer(world, flow, recon, small_train(8)), std::invalid_argument);
}

TEST(Trainer, SameSeedGivesIdenticalParameters) {
  const SyntheticWorld world;
  auto run = [&]() {
    FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
    Reconstructor recon(small_recon(8));
    Trainer trainer(world, flow, recon, small_train(8));
    trainer.run(5);
    return std::make_pair(flow.params(), recon.params());
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, CheckpointCadence) {
  const SyntheticWorld world;
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
  Reconstructor recon(small_recon(8));
  TrainConfig cfg = small_train(8);
  cfg.checkpoint_every = 2;
  Trainer trainer(world, flow, recon, cfg);
  std::vector<std::size_t> at;
  trainer.run(5, {}, [&](std::size_t it) { at.push_back(it); });
  EXPECT_EQ(at, (std::vector<std::size_t>{2, 4, 5}));
}

TEST(Trainer, NonFiniteLossAbortsWithoutUpdating) {
  const SyntheticWorld world;
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
  Reconstructor recon(small_recon(8));
  recon.params().value(recon.params().size() - 1)[0] = std::numeric_limits<double>::quiet_NaN();
  const ParamStore f0 = flow.params();
  Trainer trainer(world, flow, recon, small_train(8));
  try {
    trainer.step();
    FAIL() << "expected abort";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.iteration(), 1u);
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos);
  }
  EXPECT_EQ(flow.params(), f0);
  EXPECT_EQ(trainer.iteration(), 0u);
}

TEST(Trainer, LossDecreasesOverFirstHundredSteps) {
  const SyntheticWorld world;
  FlowModel flow = FlowModel::create(small_flow(FlowKind::coupling, 8));
  Reconstructor recon(small_recon(8));
  TrainConfig cfg = small_train(8);
  cfg.batch = 16;
  Trainer trainer(world, flow, recon, cfg);
  trainer.run(100);
  const auto& h = trainer.history();
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) first += h[i].loss.total;
  for (std::size_t i = 90; i < 100; ++i) last += h[i].loss.total;
  EXPECT_LT(last, first);
}

TEST(Trainer, LossCsvHasOneRowPerIteration) {
  std::vector<LossRecord> h{{1, {1.0, 2.0, 3.0, 4.0}}, {2, {0.5, 0.25, 0.125, 0.0625}}};
  const std::string path = (std::filesystem::temp_directory_path() / "curvedit_loss.csv").string();
  write_loss_csv(path, h);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "iteration,L_cls,L_reg,L_nl,total");
  std::getline(f, line);
  EXPECT_EQ(line, "1,1,2,3,4");
  std::getline(f, line);
  EXPECT_EQ(line, "2,0.5,0.25,0.125,0.0625");
}

TEST(Trainer, ReferenceSizeIterationSpeed) {
  const SyntheticWorld world;
  FlowConfig fc;
  fc.kind = FlowKind::coupling;
  fc.output_scale = 0.1;
  FlowModel flow = FlowModel::create(fc);
  Reconstructor recon;
  TrainConfig cfg;
  Trainer trainer(world, flow, recon, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run(5);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 5;
  std::printf("seconds per iteration at batch %zu: %.4f\n", cfg.batch, s);
  RecordProperty("seconds_per_iteration", std::to_string(s));
}
