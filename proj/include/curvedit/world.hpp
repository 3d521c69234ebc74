#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "curvedit/flow.hpp"
#include "curvedit/image.hpp"

namespace curvedit {

/// A semantic attribute of the synthetic world. Its score is
/// `low + range * sigmoid(w)` for the matching warped coordinate w.
struct AttributeInfo {
  const char* name;
  double low;
  double range;
  double target_change;  // score change that defines one normalized unit of 0.1
  const char* unit;
};

inline constexpr std::size_t kSemanticCount = 6;

inline const std::array<AttributeInfo, kSemanticCount>& semantic_attributes() {
  static const std::array<AttributeInfo, kSemanticCount> table{{
      {"x_position", 0.3, 0.4, 0.1, "image width"},
      {"y_position", 0.3, 0.4, 0.1, "image height"},
      {"log_radius", 0.91629073187415511, 0.87546873735389985, 0.1, "log px"},  // log 2.5 .. log 6
      {"log_aspect", 0.2, 0.6, 0.1, "log ratio"},
      {"rotation", -60.0, 120.0, 5.0, "degrees"},
      {"intensity", 0.45, 0.55, 0.1, "gray"},
  }};
  return table;
}

/// Geometry and pixel-parameter layout of the ellipse renderer. A parameter
/// row is [cx, cy, log r, log aspect, theta (rad), intensity, a_1..a_m] where
/// cx, cy are fractions of the image side and a_j modulate the background.
struct RenderSpec {
  std::size_t size = 32;
  std::size_t nuisance = 2;
  double edge_sharpness = 4.0;
  double background = 0.15;
  double texture_amplitude = 0.12;

  std::size_t param_count() const noexcept { return kSemanticCount + nuisance; }
  std::size_t pixel_count() const noexcept { return size * size; }

  /// Fixed cosine texture for nuisance j at pixel (row, col).
  double texture(std::size_t j, double py, double px) const {
    const double fx = 1.0 + static_cast<double>(j % 3);
    const double fy = 2.0 + static_cast<double>((2 * j) % 3);
    const double s = static_cast<double>(size);
    return std::cos(2.0 * std::numbers::pi * (fx * px + fy * py) / s + 0.7 * static_cast<double>(j));
  }

  double texture_scale() const {
    return nuisance ? texture_amplitude / static_cast<double>(nuisance) : 0.0;
  }
};

namespace detail {

struct PixelTerms {
  double coverage;  // sigmoid(kappa * d)
  double bg;
  double ur, vr, m, r, asp, c, s;
};

inline PixelTerms pixel_terms(const RenderSpec& spec, const double* p, double py, double px) {
  PixelTerms t{};
  const double side = static_cast<double>(spec.size);
  const double u = px - p[0] * side;
  const double v = py - p[1] * side;
  t.r = std::exp(p[2]);
  t.asp = std::exp(p[3]);
  t.c = std::cos(p[4]);
  t.s = std::sin(p[4]);
  t.ur = u * t.c + v * t.s;
  t.vr = -u * t.s + v * t.c;
  t.m = t.ur * t.ur / t.asp + t.vr * t.vr * t.asp + 0.25;
  const double d = 0.5 * t.r - t.m / (2.0 * t.r);
  t.coverage = 1.0 / (1.0 + std::exp(-spec.edge_sharpness * d));
  t.bg = spec.background;
  const double ts = spec.texture_scale();
  for (std::size_t j = 0; j < spec.nuisance; ++j)
    t.bg += ts * p[kSemanticCount + j] * spec.texture(j, py, px);
  return t;
}

}  // namespace detail

/// Renders each parameter row to a size*size image in [0,1] (before clamping):
///   pixel = bg * (1 - a) + intensity * a,   a = sigmoid(k * (r/2 - m/(2r)))
/// with m the squared elliptical radius (+1/4 pixel smoothing).
inline Tensor render_values(const RenderSpec& spec, const Tensor& params) {
  const std::size_t b = params.dim(0), pc = spec.param_count(), n = spec.size;
  if (params.rank() != 2 || params.dim(1) != pc)
    throw ShapeError("render: expected [B," + std::to_string(pc) + "] params, got " +
                     shape_string(params.shape()));
  Tensor img(Shape{b, n * n});
  for (std::size_t i = 0; i < b; ++i) {
    const double* p = &params[i * pc];
    for (std::size_t row = 0; row < n; ++row)
      for (std::size_t col = 0; col < n; ++col) {
        const auto t = detail::pixel_terms(spec, p, row + 0.5, col + 0.5);
        img[i * n * n + row * n + col] = t.bg * (1.0 - t.coverage) + p[5] * t.coverage;
      }
  }
  return img;
}

/// Differentiable renderer with an analytic backward pass.
inline Var render(const RenderSpec& spec, const Var& params) {
  Tensor img = render_values(spec, params.value());
  return params.tape().record(std::move(img), {params}, [spec](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const Tensor& pv = c.input(0);
    const Tensor& go = c.grad_out();
    const std::size_t b = pv.dim(0), pc = spec.param_count(), n = spec.size;
    const double side = static_cast<double>(n);
    const double kappa = spec.edge_sharpness;
    const double ts = spec.texture_scale();
    for (std::size_t i = 0; i < b; ++i) {
      const double* p = &pv[i * pc];
      double* gp = &(*g)[i * pc];
      for (std::size_t row = 0; row < n; ++row)
        for (std::size_t col = 0; col < n; ++col) {
          const double gy = go[i * n * n + row * n + col];
          if (gy == 0.0) continue;
          const double py = row + 0.5, px = col + 0.5;
          const auto t = detail::pixel_terms(spec, p, py, px);
          const double a = t.coverage;
          // pixel = bg + (I - bg) a
          const double dpix_dd = (p[5] - t.bg) * kappa * a * (1.0 - a);
          const double dd_dm = -1.0 / (2.0 * t.r);
          const double dm_dur = 2.0 * t.ur / t.asp;
          const double dm_dvr = 2.0 * t.vr * t.asp;
          // u = px - cx*side, v = py - cy*side
          const double dm_du = dm_dur * t.c - dm_dvr * t.s;
          const double dm_dv = dm_dur * t.s + dm_dvr * t.c;
          gp[0] += gy * dpix_dd * dd_dm * dm_du * (-side);
          gp[1] += gy * dpix_dd * dd_dm * dm_dv * (-side);
          gp[2] += gy * dpix_dd * (0.5 * t.r + t.m / (2.0 * t.r));
          const double dm_dlasp = -t.ur * t.ur / t.asp + t.vr * t.vr * t.asp;
          gp[3] += gy * dpix_dd * dd_dm * dm_dlasp;
          // d ur/d theta = vr, d vr/d theta = -ur
          const double dm_dtheta = 2.0 * t.ur * t.vr * (1.0 / t.asp - t.asp);
          gp[4] += gy * dpix_dd * dd_dm * dm_dtheta;
          gp[5] += gy * a;
          for (std::size_t j = 0; j < spec.nuisance; ++j)
            gp[kSemanticCount + j] += gy * (1.0 - a) * ts * spec.texture(j, py, px);
        }
    }
  });
}

struct WorldConfig {
  std::size_t dim = 8;
  std::uint64_t seed = 1234;
  std::size_t warp_layers = 6;
  std::size_t warp_hidden = 16;
  /// Multiplies the warp's output-layer weights; larger is more curved.
  double warp_strength = 1.0;
};

/// Parameters recovered from an image by moments. Empty when no ellipse is visible.
struct MomentEstimate {
  double cx, cy, log_radius, log_aspect, rotation_deg, intensity;
  double background;

  std::array<double, kSemanticCount> scores() const {
    return {cx, cy, log_radius, log_aspect, rotation_deg, intensity};
  }
};

/// The ground-truth generator G(z) = render(params(W(z))) with a frozen warp W.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(WorldConfig config = {}) : config_(config), warp_(make_warp(config)) {
    spec_.nuisance = config.dim > kSemanticCount ? config.dim - kSemanticCount : 0;
  }

  const WorldConfig& config() const noexcept { return config_; }
  std::size_t dim() const noexcept { return config_.dim; }
  const RenderSpec& render_spec() const noexcept { return spec_; }
  const FlowModel& warp() const noexcept { return warp_; }
  std::size_t semantic_count() const noexcept { return std::min(kSemanticCount, config_.dim); }
  std::size_t nuisance_count() const noexcept { return spec_.nuisance; }
  std::size_t image_side() const noexcept { return spec_.size; }
  std::size_t pixel_count() const noexcept { return spec_.pixel_count(); }

  /// W(z) for [B,N] or [N].
  Tensor warped(const Tensor& z) const { return warp_.forward_values(z); }

  /// Renderer parameters [B, 6 + m]. Attributes beyond N sit at mid-range.
  Tensor render_params(const Tensor& z) const {
    const Tensor w = warp_.forward_values(as_batch(z));
    return params_from_warped(w);
  }

  Tensor params_from_warped(const Tensor& w) const {
    const std::size_t b = w.dim(0), n = dim(), pc = spec_.param_count();
    const auto& attrs = semantic_attributes();
    Tensor p(Shape{b, pc});
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t a = 0; a < kSemanticCount; ++a) {
        const double s = a < n ? sigmoid(w[i * n + a]) : 0.5;
        p[i * pc + a] = attrs[a].low + attrs[a].range * s;
      }
      p[i * pc + 4] *= std::numbers::pi / 180.0;
      for (std::size_t j = 0; j < spec_.nuisance; ++j)
        p[i * pc + kSemanticCount + j] = 2.0 * sigmoid(w[i * n + kSemanticCount + j]) - 1.0;
    }
    return p;
  }

  /// Images [B, side*side] in [0,1].
  Tensor generate(const Tensor& z) const { return render_values(spec_, render_params(z)); }

  GrayImage generate_image(const Tensor& z) const {
    const Tensor img = generate(z.reshaped({1, dim()}));
    return quantize(img.storage().data(), spec_.size, spec_.size);
  }

  /// G on a tape, differentiable in z. `warp_bound` comes from bind_warp.
  Var generate(const Bound& warp_bound, const Var& z) const {
    return render(spec_, params_on_tape(warp_bound, z));
  }

  Bound bind_warp(Tape& tape) const { return warp_.bind(tape, false); }

  Var params_on_tape(const Bound& wb, const Var& z) const {
    Tape& tape = z.tape();
    const std::size_t b = z.dim(0), n = dim(), pc = spec_.param_count();
    const auto& attrs = semantic_attributes();
    Var s = ops::sigmoid(warp_.forward(wb, z, LogdetOptions{false}).v);
    Tensor scale(Shape{n}), offset(Shape{n});
    for (std::size_t a = 0; a < n; ++a) {
      if (a < kSemanticCount) {
        const double deg = a == 4 ? std::numbers::pi / 180.0 : 1.0;
        scale[a] = attrs[a].range * deg;
        offset[a] = attrs[a].low * deg;
      } else {
        scale[a] = 2.0;
        offset[a] = -1.0;
      }
    }
    Var mapped = ops::add_row(ops::mul_row(s, tape.constant(scale)), tape.constant(offset));
    if (n >= kSemanticCount) return mapped;
    Tensor fixed(Shape{b, pc - n});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t a = n; a < kSemanticCount; ++a) {
        const double deg = a == 4 ? std::numbers::pi / 180.0 : 1.0;
        fixed[i * (pc - n) + (a - n)] = (attrs[a].low + 0.5 * attrs[a].range) * deg;
      }
    return ops::concat_cols(mapped, tape.constant(std::move(fixed)));
  }

  /// Ground-truth attribute scores [B, 6] read through W.
  Tensor scores(const Tensor& z) const {
    const Tensor p = render_params(z);
    const std::size_t b = p.dim(0), pc = spec_.param_count();
    Tensor out(Shape{b, kSemanticCount});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t a = 0; a < kSemanticCount; ++a)
        out[i * kSemanticCount + a] = p[i * pc + a] * (a == 4 ? 180.0 / std::numbers::pi : 1.0);
    return out;
  }

  /// Nuisance amplitudes [B, m] in [-1, 1].
  Tensor nuisance(const Tensor& z) const {
    const Tensor p = render_params(z);
    const std::size_t b = p.dim(0), pc = spec_.param_count(), m = spec_.nuisance;
    Tensor out(Shape{b, m});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] = p[i * pc + kSemanticCount + j];
    return out;
  }

  /// exp(-|w (a - a')|) over nuisance amplitudes; one value per row.
  Tensor identity_score(const Tensor& z, const Tensor& z2, const std::vector<double>& weights = {}) const {
    const Tensor a = nuisance(z), b = nuisance(z2);
    const std::size_t rows = a.dim(0), m = spec_.nuisance;
    if (!weights.empty() && weights.size() != m)
      throw std::invalid_argument("identity weights must have one entry per nuisance parameter");
    Tensor out(Shape{rows});
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = (weights.empty() ? 1.0 : weights[j]) * (a[i * m + j] - b[i * m + j]);
        acc += d * d;
      }
      out[i] = std::exp(-std::sqrt(acc));
    }
    return out;
  }

  /// Recovers the renderer parameters of one image [side*side] from its moments.
  std::optional<MomentEstimate> estimate_moments(const double* img) const {
    const std::size_t n = spec_.size, m = spec_.nuisance;
    // Anything brighter than the background can get belongs to the ellipse.
    const double bg_ceiling = spec_.background + spec_.texture_amplitude;
    std::vector<char> mask(n * n, 0);
    bool any = false;
    for (std::size_t i = 0; i < n * n; ++i)
      if (img[i] > bg_ceiling + 0.05) mask[i] = 1, any = true;
    if (!any) return std::nullopt;

    // Least-squares background fit (constant + textures) on pixels well
    // clear of the ellipse.
    std::vector<char> far(n * n, 1);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        if (!mask[r * n + c]) continue;
        for (long dr = -3; dr <= 3; ++dr)
          for (long dc = -3; dc <= 3; ++dc) {
            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
            if (rr >= 0 && cc >= 0 && rr < static_cast<long>(n) && cc < static_cast<long>(n))
              far[static_cast<std::size_t>(rr) * n + static_cast<std::size_t>(cc)] = 0;
          }
      }
    const std::size_t q = m + 1;
    Tensor ata(Shape{q, q});
    std::vector<double> atb(q, 0.0), basis(q);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        if (!far[r * n + c]) continue;
        basis[0] = 1.0;
        for (std::size_t j = 0; j < m; ++j) basis[j + 1] = spec_.texture(j, r + 0.5, c + 0.5);
        for (std::size_t a = 0; a < q; ++a) {
          atb[a] += basis[a] * img[r * n + c];
          for (std::size_t b = 0; b < q; ++b) ata[a * q + b] += basis[a] * basis[b];
        }
      }
    std::vector<double> coef(q, 0.0);
    coef[0] = spec_.background;
    if (linalg::log_abs_det(ata).second != 0) {
      const Tensor inv = linalg::inverse(ata);
      for (std::size_t a = 0; a < q; ++a) {
        coef[a] = 0.0;
        for (std::size_t b = 0; b < q; ++b) coef[a] += inv[a * q + b] * atb[b];
      }
    }
    auto bg_at = [&](std::size_t r, std::size_t c) {
      double v = coef[0];
      for (std::size_t j = 0; j < m; ++j) v += coef[j + 1] * spec_.texture(j, r + 0.5, c + 0.5);
      return v;
    };

    double peak = 0.0, peak_bg = coef[0];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (img[r * n + c] > peak) peak = img[r * n + c], peak_bg = bg_at(r, c);

    MomentEstimate e{};
    e.background = coef[0];
    double intensity = peak;
    for (int pass = 0; pass < 2; ++pass) {
      double m0 = 0.0, mx = 0.0, my = 0.0;
      std::vector<double> cov(n * n, 0.0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double bg = bg_at(r, c);
          const double a = std::clamp((img[r * n + c] - bg) / (intensity - bg), 0.0, 1.0);
          cov[r * n + c] = a;
          m0 += a;
          mx += a * (c + 0.5);
          my += a * (r + 0.5);
        }
      mx /= m0;
      my /= m0;
      double sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double a = cov[r * n + c];
          const double dx = c + 0.5 - mx, dy = r + 0.5 - my;
          sxx += a * dx * dx;
          syy += a * dy * dy;
          sxy += a * dx * dy;
        }
      sxx /= m0;
      syy /= m0;
      sxy /= m0;
      const double tr = sxx + syy;
      const double disc = std::sqrt(std::max(0.0, 0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy));
      const double l1 = 0.5 * tr + disc, l2 = std::max(0.5 * tr - disc, 1e-12);
      // A uniform ellipse with semi-axes A, B has principal second moments A^2/4, B^2/4.
      const double r_eff2 = 4.0 * std::sqrt(l1 * l2);
      const double radius = std::sqrt(r_eff2 + 0.25);
      e.cx = mx / static_cast<double>(n);
      e.cy = my / static_cast<double>(n);
      e.log_radius = std::log(radius);
      e.log_aspect = 0.5 * std::log(l1 / l2);
      e.rotation_deg = 0.5 * std::atan2(2.0 * sxy, sxx - syy) * 180.0 / std::numbers::pi;
      // The centre pixel is not fully covered; undo that using the radius estimate.
      const double a0 = 1.0 / (1.0 + std::exp(-spec_.edge_sharpness *
                                              (0.5 * radius - 0.25 / (2.0 * radius))));
      intensity = (peak - peak_bg * (1.0 - a0)) / a0;
      e.intensity = intensity;
    }
    return e;
  }

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

 private:
  static FlowModel make_warp(const WorldConfig& c) {
    FlowConfig fc;
    fc.kind = FlowKind::coupling;
    fc.dim = c.dim;
    fc.layers = c.warp_layers;
    fc.hidden = c.warp_hidden;
    fc.output_scale = c.warp_strength;
    fc.seed = c.seed;
    return FlowModel::create(fc);
  }

  static Tensor as_batch(const Tensor& z) {
    return z.rank() == 1 ? z.reshaped({1, z.dim(0)}) : z;
  }

  WorldConfig config_;
  FlowModel warp_;
  RenderSpec spec_;
};

}  // namespace curvedit
