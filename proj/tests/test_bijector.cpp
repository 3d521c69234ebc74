#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "curvedit/flow.hpp"
#include "fd_oracle.hpp"

using namespace curvedit;

namespace {

Tensor random_batch(std::size_t b, std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return normal_tensor(rng, {b, n}, scale);
}

// log|det J| with J from central differences of the flow's forward map.
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

FlowConfig coupling_config(std::size_t dim, std::uint64_t seed) {
  FlowConfig c;
  c.kind = FlowKind::coupling;
  c.dim = dim;
  c.hidden = 16;
  c.seed = seed;
  return c;
}

FlowConfig cnf_config(std::size_t dim, std::uint64_t seed) {
  FlowConfig c;
  c.kind = FlowKind::cnf;
  c.dim = dim;
  c.seed = seed;
  return c;
}

Tensor row(const Tensor& batch, std::size_t i) {
  const std::size_t n = batch.dim(1);
  return Tensor(Shape{n}, std::vector<double>(batch.storage().begin() + i * n,
                                              batch.storage().begin() + (i + 1) * n));
}

}  // namespace

// ---- integrate_ode ----

TEST(Ode, ZeroFieldLeavesStateUnchanged) {
  Tape t;
  Var u0 = t.constant(random_batch(2, 3, 1));
  Var zero = t.constant(Tensor(Shape{3, 3}));
  Var u = integrate_ode(LinearDynamics(zero), u0, 0.0, 0.1);
  EXPECT_EQ(u.value(), u0.value());
}

TEST(Ode, ExponentialDecayMatchesClosedForm) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 1, {-1.0}));
  Var u = integrate_ode(LinearDynamics(a), t.constant(Tensor::matrix(1, 1, {1.0})), 0.0, 0.1);
  EXPECT_NEAR(u.value()[0], std::exp(-0.1), 1e-8);
}

TEST(Ode, ReverseIntegrationUndoesForward) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 2, {0.3, -1.0, 1.0, 0.2}));
  Var u0 = t.constant(Tensor::matrix(1, 2, {0.7, -0.4}));
  LinearDynamics g(a);
  Var u1 = integrate_ode(g, u0, 0.0, 0.8);
  Var back = integrate_ode(g, u1, 0.8, 0.0);
  EXPECT_LT(max_abs_diff(back.value(), u0.value()), 1e-5);
}

TEST(Ode, DormandPrinceAgreesWithFineRk4) {
  Rng rng(5);
  ConcatsquashDynamics dyn(4, 6, rng);
  Tape t;
  auto g = dyn.bind(t, false);
  Var u0 = t.constant(random_batch(1, 4, 6));
  SolverOptions tight{{1e-8, 1e-8}, 100000};
  Var dp = integrate_ode(g, u0, 0.0, 0.1, tight);
  auto f = [&g](const OdeState& s, double tt) { return OdeState{g(s[0], tt)}; };
  Var rk = integrate_rk4(f, OdeState{u0}, 0.0, 0.1, 10000)[0];
  EXPECT_LT(max_abs_diff(dp.value(), rk.value()), 1e-6);
}

TEST(Ode, MaxStepsRaisesIntegrationError) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 1, {-50.0}));
  SolverOptions opts{{1e-12, 1e-12}, 3};
  try {
    integrate_ode(LinearDynamics(a), t.constant(Tensor::matrix(1, 1, {1.0})), 0.0, 1.0, opts);
    FAIL();
  } catch (const IntegrationError& e) {
    EXPECT_GT(e.time(), -1.0);
  }
}

TEST(Ode, SolutionIsDifferentiableThroughTheSolver) {
  // d/da of u(1) for u' = a u, u(0) = 1 is exp(a).
  Tape t;
  Var a = t.leaf(Tensor::matrix(1, 1, {0.4}));
  Var u = integrate_ode(LinearDynamics(a), t.constant(Tensor::matrix(1, 1, {1.0})), 0.0, 1.0,
                        SolverOptions{{1e-10, 1e-10}, 100000});
  auto g = t.gradients(ops::sum(u), std::span<const Var>(&a, 1));
  EXPECT_NEAR((*g[0])[0], std::exp(0.4), 1e-6);
}

// ---- trace estimators ----

TEST(Trace, ExactTraceMatchesFiniteDifferenceJacobian) {
  Rng rng(8);
  ConcatsquashDynamics dyn(5, 6, rng);
  const Tensor u0 = random_batch(1, 5, 9);
  Tape t;
  auto g = dyn.bind(t, false);
  const double exact = exact_trace(g, t.constant(u0), 0.03).value()[0];
  double fd_tr = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    Tensor up = u0, um = u0;
    up[j] += 1e-6;
    um[j] -= 1e-6;
    Tape s;
    auto gs = dyn.bind(s, false);
    fd_tr += (gs(s.constant(up), 0.03).value()[j] - gs(s.constant(um), 0.03).value()[j]) / 2e-6;
  }
  EXPECT_NEAR(exact, fd_tr, 1e-7);
}

TEST(Trace, HutchinsonOnDiagonalLinearField) {
  const double horizon = 0.5;
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 2.0}));
  Rng rng(1);
  HutchinsonResult h = logdet_hutchinson(LinearDynamics(a), t.constant(random_batch(1, 2, 2)),
                                         0.0, horizon, 1000, rng);
  double mean = 0.0, sq = 0.0;
  for (double v : h.per_probe.data()) mean += v;
  mean /= 1000.0;
  for (double v : h.per_probe.data()) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / 999.0 / 1000.0);
  EXPECT_NEAR(h.estimate.value()[0], mean, 1e-12);
  EXPECT_LE(std::abs(mean - horizon * 3.0), std::max(3.0 * se, 1e-8));
}

TEST(Trace, HutchinsonIsExactInOneDimension) {
  Tape t;
  Var a = t.constant(Tensor::matrix(1, 1, {-0.7}));
  Rng rng(3);
  HutchinsonResult h = logdet_hutchinson(LinearDynamics(a), t.constant(Tensor::matrix(1, 1, {2.0})),
                                         0.0, 0.1, 1, rng);
  EXPECT_NEAR(h.estimate.value()[0], -0.07, 1e-12);
}

TEST(Trace, HutchinsonOfZeroFieldIsZero) {
  Tape t;
  Var a = t.constant(Tensor(Shape{3, 3}));
  Rng rng(3);
  HutchinsonResult h = logdet_hutchinson(LinearDynamics(a), t.constant(random_batch(2, 3, 4)),
                                         0.0, 0.1, 5, rng);
  EXPECT_EQ(h.estimate.value()[0], 0.0);
  EXPECT_EQ(h.estimate.value()[1], 0.0);
}

TEST(Trace, HutchinsonWithinThreeSigmaOnConcatsquash) {
  Rng init(12);
  ConcatsquashDynamics dyn(4, 6, init);
  const Tensor u0 = random_batch(1, 4, 13);
  double exact;
  {
    Tape t;
    exact = integrate_with_exact_trace(dyn.bind(t, false), t.constant(u0), 0.0, 0.1).second.value()[0];
  }
  Tape t;
  Rng rng(14);
  HutchinsonResult h = logdet_hutchinson(dyn.bind(t, false), t.constant(u0), 0.0, 0.1, 1000, rng);
  double mean = 0.0, sq = 0.0;
  for (double v : h.per_probe.data()) mean += v;
  mean /= 1000.0;
  for (double v : h.per_probe.data()) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / 999.0 / 1000.0);
  EXPECT_GT(se, 0.0);
  EXPECT_LE(std::abs(mean - exact), 3.0 * se);
}

TEST(Trace, ZeroProbesRejected) {
  Tape t;
  Var a = t.constant(Tensor(Shape{1, 1}));
  Rng rng(0);
  EXPECT_THROW(logdet_hutchinson(LinearDynamics(a), t.constant(Tensor(Shape{1, 1})), 0.0, 1.0, 0, rng),
               std::invalid_argument);
}

// ---- flows ----

TEST(Flow, IdentityFlow) {
  const FlowModel f = FlowModel::identity(2);
  const Tensor z = Tensor::vector({0.3, -1.2});
  const auto [v, ld] = f.forward_with_logdet(z);
  EXPECT_EQ(v, z);
  EXPECT_EQ(ld[0], 0.0);
  EXPECT_EQ(f.inverse_values(z), z);
}

TEST(Flow, DiagonalLinearFlow) {
  const FlowModel f = FlowModel::linear(Tensor::matrix(2, 2, {2.0, 0.0, 0.0, 0.5}));
  const auto [v, ld] = f.forward_with_logdet(Tensor::vector({1.0, 1.0}));
  EXPECT_EQ(v, Tensor::vector({2.0, 0.5}));
  EXPECT_NEAR(ld[0], 0.0, 1e-15);
  EXPECT_LT(max_abs_diff(f.inverse_values(Tensor::vector({2.0, 0.5})), Tensor::vector({1.0, 1.0})),
            1e-15);
}

TEST(Flow, WrongDimensionIsRejected) {
  const FlowModel f = FlowModel::create(coupling_config(4, 1));
  EXPECT_THROW(f.forward_values(Tensor::vector({1.0, 2.0})), ShapeError);
}

TEST(Flow, SingleCouplingLayerPassThroughAndLogdet) {
  FlowConfig c = coupling_config(5, 4);
  c.layers = 1;
  const FlowModel f = FlowModel::create(c);
  const auto& cf = std::get<CouplingFlow>(f.impl());
  const Tensor z = random_batch(4, 5, 5);
  const auto [v, ld] = f.forward_with_logdet(z);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k : cf.layer(0).keep) EXPECT_EQ(v[i * 5 + k], z[i * 5 + k]);
  Tape t;
  Bound b = f.bind(t, false);
  Var scale = cf.scale_shift(b, 0, ops::take_cols(t.constant(z), cf.layer(0).keep)).first;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < scale.dim(1); ++j) s += scale.value()[i * scale.dim(1) + j];
    EXPECT_DOUBLE_EQ(ld[i], s);
  }
}

TEST(Flow, CouplingLogdetMatchesFiniteDifferenceJacobian) {
  const FlowModel f = FlowModel::create(coupling_config(4, 7));
  const Tensor zs = random_batch(10, 4, 8);
  for (std::size_t i = 0; i < 10; ++i) {
    const Tensor z = row(zs, i);
    EXPECT_NEAR(f.forward_with_logdet(z).second[0], fd_logdet(f, z), 1e-4);
  }
}

TEST(Flow, EveryKindLogdetMatchesFiniteDifferenceUpToDimSix) {
  for (std::size_t n : {2u, 4u, 6u}) {
    Rng rng(n);
    std::vector<FlowModel> flows{FlowModel::identity(n),
                                 FlowModel::linear(linalg::identity(n) + normal_tensor(rng, {n, n}, 0.3)),
                                 FlowModel::create(coupling_config(n, 10 + n)),
                                 FlowModel::create(cnf_config(n, 20 + n))};
    const Tensor zs = random_batch(3, n, 30 + n);
    for (const FlowModel& f : flows)
      for (std::size_t i = 0; i < 3; ++i) {
        const Tensor z = row(zs, i);
        EXPECT_NEAR(f.forward_with_logdet(z).second[0], fd_logdet(f, z), 1e-3)
            << to_string(f.kind()) << " n=" << n;
      }
  }
}

TEST(Flow, CouplingRoundTripOverThousandSamples) {
  const FlowModel f = FlowModel::create(coupling_config(8, 11));
  const Tensor z = random_batch(1000, 8, 12, 1.5);
  EXPECT_LT(max_abs_diff(f.inverse_values(f.forward_values(z)), z), 1e-9);
  EXPECT_LT(max_abs_diff(f.forward_values(f.inverse_values(z)), z), 1e-9);
}

TEST(Flow, CnfRoundTripAtSolverTolerance) {
  const FlowModel f = FlowModel::create(cnf_config(8, 13));
  const Tensor z = random_batch(100, 8, 14);
  EXPECT_LT(max_abs_diff(f.inverse_values(f.forward_values(z)), z), 1e-5);
}

TEST(Flow, ForwardAndInverseLogdetsCancel) {
  for (FlowKind kind : {FlowKind::coupling, FlowKind::cnf}) {
    FlowConfig c = kind == FlowKind::cnf ? cnf_config(4, 15) : coupling_config(4, 15);
    const FlowModel f = FlowModel::create(c);
    const Tensor z = random_batch(5, 4, 16);
    const auto [v, ld] = f.forward_with_logdet(z);
    const auto [z2, ld_inv] = f.inverse_with_logdet(v);
    const double tol = kind == FlowKind::cnf ? 1e-5 : 1e-9;
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(ld[i] + ld_inv[i], 0.0, tol) << to_string(kind);
  }
  const FlowModel lin = FlowModel::linear(Tensor::matrix(2, 2, {1.5, 0.2, -0.3, 0.8}));
  const auto [v, ld] = lin.forward_with_logdet(Tensor::vector({0.1, 0.2}));
  EXPECT_NEAR(ld[0] + lin.inverse_with_logdet(v).second[0], 0.0, 1e-12);
}

TEST(Flow, HutchinsonPathAboveExactTraceThreshold) {
  const FlowModel f = FlowModel::create(cnf_config(4, 17));
  const Tensor z = random_batch(1, 4, 18);
  LogdetOptions lo;
  lo.exact_trace_max_dim = 0;
  lo.hutchinson_probes = 400;
  Rng rng(19);
  lo.rng = &rng;
  const double est = f.forward_with_logdet(z, lo).second[0];
  const double exact = f.forward_with_logdet(z).second[0];
  EXPECT_NEAR(est, exact, 0.05 * std::max(1.0, std::abs(exact)));
}

TEST(Flow, DirectionalDerivativeConvergesAtFirstOrder) {
  const FlowModel f = FlowModel::create(coupling_config(4, 21));
  const Tensor z = random_batch(1, 4, 22).reshaped({4});
  const Tensor d = random_batch(1, 4, 23).reshaped({4});
  auto one_sided = [&](double h) {
    return (f.forward_values(z + d * h) - f.forward_values(z)) * (1.0 / h);
  };
  const Tensor exact = (f.forward_values(z + d * 1e-7) - f.forward_values(z - d * 1e-7)) * (0.5e7);
  const double e1 = max_abs_diff(one_sided(1e-2), exact);
  const double e2 = max_abs_diff(one_sided(5e-3), exact);
  EXPECT_NEAR(e1 / e2, 2.0, 0.2);
}

TEST(Flow, CheckpointRoundTripPreservesOutputsBitExactly) {
  for (FlowKind kind : {FlowKind::linear, FlowKind::coupling, FlowKind::cnf}) {
    FlowConfig c = kind == FlowKind::cnf ? cnf_config(4, 25) : coupling_config(4, 25);
    c.kind = kind;
    const FlowModel f = FlowModel::create(c);
    const FlowModel g = FlowModel::from_checkpoint(Checkpoint::deserialize(f.to_checkpoint().serialize()));
    const Tensor z = random_batch(3, 4, 26);
    EXPECT_EQ(f.forward_values(z), g.forward_values(z)) << to_string(kind);
    EXPECT_EQ(g.kind(), kind);
  }
}

TEST(Flow, CheckpointLayoutMismatchIsReported) {
  Checkpoint c = FlowModel::create(coupling_config(4, 1)).to_checkpoint();
  c.meta["layers"] = "5";
  EXPECT_THROW(FlowModel::from_checkpoint(c), FormatError);
  c.meta.erase("kind");
  EXPECT_THROW(FlowModel::from_checkpoint(c), FormatError);
}

TEST(Flow, CnfGradientMatchesFiniteDifferences) {
  const FlowModel f = FlowModel::create(cnf_config(3, 27));
  const Tensor z = random_batch(2, 3, 28);
  const std::size_t pi = 0;  // first linear weight
  auto loss_at = [&](const Tensor& w) {
    FlowModel g = f;
    g.params().value(pi) = w;
    Tape t;
    Bound b = g.bind(t, false);
    FlowForward r = g.forward(b, t.constant(z));
    double s = 0.0;
    for (double v : r.v.value().data()) s += v * v;
    for (double v : r.logdet.value().data()) s += v * v;
    return s;
  };
  Tape t;
  Bound b = f.bind(t, true);
  FlowForward r = f.forward(b, t.constant(z));
  Var loss = ops::add(ops::sum(ops::square(r.v)), ops::sum(ops::square(r.logdet)));
  auto g = t.gradients(loss, std::span<const Var>(&b[pi], 1));
  // The adaptive step sequence is not differentiated, so compare at a loose level.
  EXPECT_LT(fd::rel_error(*g[0], fd::gradient(loss_at, f.params().value(pi), 1e-5)), 1e-4);
}
