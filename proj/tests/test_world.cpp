#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>

#include "curvedit/hash.hpp"
#include "curvedit/world.hpp"
#include "fd_oracle.hpp"

using namespace curvedit;

namespace {

Tensor randn(std::size_t b, std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return normal_tensor(rng, {b, n}, scale);
}

Tensor params_row(const RenderSpec& spec, double cx, double cy, double logr, double logasp,
                  double theta, double intensity, std::vector<double> nuis = {}) {
  Tensor p(Shape{1, spec.param_count()});
  const double v[6] = {cx, cy, logr, logasp, theta, intensity};
  for (int i = 0; i < 6; ++i) p[i] = v[i];
  for (std::size_t j = 0; j < nuis.size(); ++j) p[6 + j] = nuis[j];
  return p;
}

double logit(double s) { return std::log(s / (1.0 - s)); }

const SyntheticWorld& world() {
  static const SyntheticWorld w{WorldConfig{}};
  return w;
}

}  // namespace

TEST(Render, GradientMatchesFiniteDifferences) {
  RenderSpec spec;
  spec.size = 12;
  const Tensor p0 = params_row(spec, 0.45, 0.55, std::log(3.0), 0.4, 0.3, 0.8, {0.3, -0.6});
  Rng rng(2);
  const Tensor proj = normal_tensor(rng, {1, spec.pixel_count()});
  auto value = [&](const Tensor& p) {
    const Tensor img = render_values(spec, p);
    double s = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) s += img[i] * proj[i];
    return s;
  };
  Tape t;
  Var p = t.leaf(p0);
  Var loss = ops::sum(ops::mul(render(spec, p), t.constant(proj)));
  auto g = t.gradients(loss, std::span<const Var>(&p, 1));
  EXPECT_LT(fd::rel_error(*g[0], fd::gradient(value, p0)), 1e-6);
}

TEST(Render, VanishingRadiusLeavesPureBackground) {
  RenderSpec spec;
  const Tensor img = render_values(spec, params_row(spec, 0.5, 0.5, -40.0, 0.3, 0.2, 0.9, {0.5, -0.2}));
  for (std::size_t r = 0; r < spec.size; ++r)
    for (std::size_t c = 0; c < spec.size; ++c) {
      const double bg = spec.background + spec.texture_scale() * (0.5 * spec.texture(0, r + 0.5, c + 0.5) -
                                                                  0.2 * spec.texture(1, r + 0.5, c + 0.5));
      EXPECT_DOUBLE_EQ(img[r * spec.size + c], bg);
    }
}

TEST(Render, ValuesStayInUnitInterval) {
  const Tensor img = world().generate(randn(50, 8, 3, 2.0));
  for (double v : img.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(World, GenerateIsDeterministic) {
  const Tensor z = randn(4, 8, 5);
  EXPECT_EQ(world().generate(z), SyntheticWorld(WorldConfig{}).generate(z));
}

TEST(World, GoldenImage) {
  const Tensor z = randn(1, 8, 2024).reshaped({8});
  const auto bytes = encode_pgm(world().generate_image(z));
  const std::string path = std::string(CURVEDIT_GOLDEN_DIR) + "/world_seed1234.pgm";
  if (std::getenv("CURVEDIT_UPDATE_GOLDEN")) write_file(path, bytes);
  ASSERT_TRUE(std::filesystem::exists(path)) << "golden file missing; rerun with CURVEDIT_UPDATE_GOLDEN=1";
  const auto golden = read_file(path);
  EXPECT_EQ(hash_bytes(bytes), hash_bytes(golden));
  EXPECT_EQ(decode_pgm(golden), world().generate_image(z));
}

TEST(World, TapeGeneratorMatchesValuePath) {
  const Tensor z = randn(3, 8, 6);
  Tape t;
  Bound wb = world().bind_warp(t);
  EXPECT_LT(max_abs_diff(world().generate(wb, t.constant(z)).value(), world().generate(z)), 1e-15);
}

TEST(World, GeneratorGradientInLatentMatchesFiniteDifferences) {
  const SyntheticWorld w4(WorldConfig{4, 77});
  const Tensor z0 = randn(1, 4, 7);
  Rng rng(8);
  const Tensor proj = normal_tensor(rng, {1, w4.pixel_count()});
  auto value = [&](const Tensor& z) {
    const Tensor img = w4.generate(z);
    double s = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) s += img[i] * proj[i];
    return s;
  };
  Tape t;
  Bound wb = w4.bind_warp(t);
  Var z = t.leaf(z0);
  Var loss = ops::sum(ops::mul(w4.generate(wb, z), t.constant(proj)));
  auto g = t.gradients(loss, std::span<const Var>(&z, 1));
  EXPECT_LT(fd::rel_error(*g[0], fd::gradient(value, z0)), 1e-6);
}

TEST(World, CentredEllipseHasHalfPositionScore) {
  const RenderSpec& spec = world().render_spec();
  const Tensor img = render_values(spec, params_row(spec, 0.5, 0.5, std::log(4.0), 0.5, 0.4, 0.9, {0.2, 0.1}));
  const auto e = world().estimate_moments(img.storage().data());
  ASSERT_TRUE(e);
  EXPECT_NEAR(e->cx, 0.5, 1e-3);
  EXPECT_NEAR(e->cy, 0.5, 1e-3);
}

TEST(World, IntensityRecoveredByMoments) {
  const RenderSpec& spec = world().render_spec();
  const Tensor img = render_values(spec, params_row(spec, 0.45, 0.52, std::log(3.0), 0.4, -0.5, 0.8, {-0.4, 0.7}));
  const auto e = world().estimate_moments(img.storage().data());
  ASSERT_TRUE(e);
  EXPECT_NEAR(e->intensity, 0.8, 0.02);
}

TEST(World, EmptyImageHasNoMomentEstimate) {
  const RenderSpec& spec = world().render_spec();
  const Tensor img = render_values(spec, params_row(spec, 0.5, 0.5, -40.0, 0.3, 0.0, 0.9, {0.0, 0.0}));
  EXPECT_FALSE(world().estimate_moments(img.storage().data()).has_value());
}

TEST(World, MomentEstimatorAgreesWithGroundTruth) {
  const Tensor z = randn(100, 8, 9);
  const Tensor imgs = world().generate(z);
  const Tensor gt = world().scores(z);
  const auto& attrs = semantic_attributes();
  const std::size_t px = world().pixel_count();
  std::array<double, kSemanticCount> mad{};
  for (std::size_t i = 0; i < 100; ++i) {
    const auto e = world().estimate_moments(&imgs[i * px]);
    ASSERT_TRUE(e);
    const auto s = e->scores();
    for (std::size_t a = 0; a < kSemanticCount; ++a)
      mad[a] += std::abs(s[a] - gt[i * kSemanticCount + a]) / attrs[a].range / 100.0;
  }
  for (std::size_t a = 0; a < kSemanticCount; ++a) EXPECT_LT(mad[a], 0.05) << attrs[a].name;
}

TEST(World, RotationCoordinateOnlyTurnsTheEllipse) {
  const Tensor z = randn(1, 8, 10);
  Tensor w = world().warped(z);
  Tensor w2 = w;
  w2[4] += 1.5;
  const Tensor z2 = world().warp().inverse_values(w2);
  const Tensor both = linalg::matmul(Tensor::matrix(2, 1, {1, 0}), z) +
                      linalg::matmul(Tensor::matrix(2, 1, {0, 1}), z2);
  const Tensor imgs = world().generate(both);
  const std::size_t px = world().pixel_count();
  const auto a = world().estimate_moments(&imgs[0]);
  const auto b = world().estimate_moments(&imgs[px]);
  ASSERT_TRUE(a && b);
  EXPECT_NEAR(a->cx, b->cx, 1e-3);
  EXPECT_NEAR(a->cy, b->cy, 1e-3);
  EXPECT_NEAR(a->log_radius, b->log_radius, 0.02);
  EXPECT_NEAR(a->log_aspect, b->log_aspect, 0.03);
  EXPECT_NEAR(a->intensity, b->intensity, 0.01);
  const Tensor gt = world().scores(both);
  const double turned = gt[kSemanticCount + 4] - gt[4];
  EXPECT_GT(std::abs(turned), 5.0);
  EXPECT_NEAR(b->rotation_deg - a->rotation_deg, turned, 2.0);
}

TEST(World, WarpedCoordinatesRecoverableFromGroundTruth) {
  const Tensor z = randn(20, 8, 11);
  const Tensor sc = world().scores(z);
  const Tensor nu = world().nuisance(z);
  const auto& attrs = semantic_attributes();
  Tensor w(Shape{20, 8});
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t a = 0; a < kSemanticCount; ++a)
      w[i * 8 + a] = logit((sc[i * kSemanticCount + a] - attrs[a].low) / attrs[a].range);
    for (std::size_t j = 0; j < 2; ++j) w[i * 8 + 6 + j] = logit(0.5 * (nu[i * 2 + j] + 1.0));
  }
  EXPECT_LT(max_abs_diff(world().warp().inverse_values(w), z), 1e-9);
}

TEST(World, AttributeDirectionDependsOnPosition) {
  auto grad_x = [&](const Tensor& z0) {
    return fd::gradient([&](const Tensor& z) { return world().scores(z)[0]; }, z0);
  };
  const Tensor g1 = grad_x(randn(1, 8, 12).reshaped({8}) * 1.0);
  const Tensor g2 = grad_x(randn(1, 8, 13).reshaped({8}) * 1.0);
  double dot = 0.0;
  for (std::size_t i = 0; i < 8; ++i) dot += g1[i] * g2[i];
  const double angle = std::acos(dot / (l2_norm(g1) * l2_norm(g2))) * 180.0 / std::numbers::pi;
  EXPECT_GT(angle, 10.0);
}

TEST(Identity, ScoreProperties) {
  const Tensor z = randn(5, 8, 14);
  const Tensor z2 = randn(5, 8, 15);
  const Tensor self = world().identity_score(z, z);
  const Tensor ab = world().identity_score(z, z2), ba = world().identity_score(z2, z);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(self[i], 1.0);
    EXPECT_EQ(ab[i], ba[i]);
    EXPECT_GE(ab[i], 0.0);
    EXPECT_LE(ab[i], 1.0);
  }
}

TEST(Identity, SemanticOnlyChangeKeepsIdentityAndNuisanceOffsetDecays) {
  const Tensor z = randn(1, 8, 16);
  const Tensor w = world().warped(z);
  Tensor w_sem = w;
  w_sem[0] += 1.0;
  w_sem[3] -= 0.7;
  EXPECT_NEAR(world().identity_score(z, world().warp().inverse_values(w_sem))[0], 1.0, 1e-12);

  // Nuisance amplitudes a = 2 sigmoid(w) - 1; shift them by a known vector.
  const Tensor a = world().nuisance(z);
  const double da0 = 0.3, da1 = -0.4;
  Tensor w_nu = w;
  w_nu[6] = logit(0.5 * (a[0] + da0 + 1.0));
  w_nu[7] = logit(0.5 * (a[1] + da1 + 1.0));
  EXPECT_NEAR(world().identity_score(z, world().warp().inverse_values(w_nu))[0], std::exp(-0.5), 1e-9);
}

TEST(Image, PngAndPgmEncodings) {
  GrayImage img{3, 2, {0, 50, 100, 150, 200, 255}};
  EXPECT_EQ(decode_pgm(encode_pgm(img)), img);
  const auto png = encode_png(img);
  ASSERT_GT(png.size(), 8u);
  EXPECT_EQ(png[1], 'P');
  EXPECT_EQ(base64_decode(base64_encode(png)), png);
  EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
}
