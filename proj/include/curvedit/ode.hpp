#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvedit/ops.hpp"

namespace curvedit {

using OdeState = std::vector<Var>;

struct Tolerances {
  double absolute = 1e-6;
  double relative = 1e-6;
};

struct SolverOptions {
  Tolerances tol;
  std::size_t max_steps = 100000;
};

struct IntegrationStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t evaluations = 0;
};

/// Raised when the adaptive solver cannot meet its tolerance.
class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double achieved_error, double time)
      : std::runtime_error(what), achieved_error_(achieved_error), time_(time) {}
  double achieved_error() const noexcept { return achieved_error_; }
  double time() const noexcept { return time_; }

 private:
  double achieved_error_;
  double time_;
};

namespace detail {

inline OdeState axpy_state(const OdeState& y, double h, std::span<const double> a,
                           const std::vector<OdeState>& k) {
  OdeState out;
  out.reserve(y.size());
  std::vector<double> coef(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) coef[j] = h * a[j];
  for (std::size_t c = 0; c < y.size(); ++c) {
    std::vector<Var> terms;
    terms.reserve(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) terms.push_back(k[j][c]);
    out.push_back(ops::lincomb(y[c], coef, terms));
  }
  return out;
}

inline double rms_norm(const OdeState& v, const OdeState& scale_ref, const Tolerances& tol) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < v.size(); ++c) {
    const Tensor& x = v[c].value();
    const Tensor& r = scale_ref[c].value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sc = tol.absolute + tol.relative * std::abs(r[i]);
      acc += (x[i] / sc) * (x[i] / sc);
      ++n;
    }
  }
  return n ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
}

}  // namespace detail

/// Adaptive Dormand-Prince 5(4) integration of dy/dt = f(y, t) from t0 to t1
/// (either direction). `f(const OdeState&, double) -> OdeState`. Every stage is
/// recorded on the tape, so the result is differentiable with respect to y0
/// and any parameters f reads; step-size selection itself is not.
template <class F>
OdeState integrate_dopri5(F&& f, OdeState y, double t0, double t1, const SolverOptions& opts = {},
                          IntegrationStats* stats = nullptr) {
  static constexpr std::array<double, 6> c{1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  static const std::array<std::vector<double>, 6> a{
      std::vector<double>{1.0 / 5},
      std::vector<double>{3.0 / 40, 9.0 / 40},
      std::vector<double>{44.0 / 45, -56.0 / 15, 32.0 / 9},
      std::vector<double>{19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
      std::vector<double>{9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176,
                          -5103.0 / 18656},
      std::vector<double>{35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784,
                          11.0 / 84}};
  // 5th-order weights minus embedded 4th-order weights.
  static constexpr std::array<double, 7> e{
      35.0 / 384 - 5179.0 / 57600,   0.0, 500.0 / 1113 - 7571.0 / 16695,
      125.0 / 192 - 393.0 / 640,     -2187.0 / 6784 + 92097.0 / 339200,
      11.0 / 84 - 187.0 / 2100,      -1.0 / 40};

  IntegrationStats local;
  IntegrationStats& st = stats ? *stats : local;
  if (t0 == t1 || y.empty()) return y;
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);

  auto eval = [&](const OdeState& s, double t) {
    ++st.evaluations;
    OdeState out = f(s, t);
    if (out.size() != s.size()) throw ShapeError("ode dynamics changed state arity");
    return out;
  };

  OdeState k1 = eval(y, t0);

  // Initial step size (Hairer, Norsett & Wanner, II.4).
  double h;
  {
    const double d0 = detail::rms_norm(y, y, opts.tol);
    const double d1 = detail::rms_norm(k1, y, opts.tol);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, span);
    const std::vector<double> one{1.0};
    OdeState y1 = detail::axpy_state(y, dir * h0, one, std::vector<OdeState>{k1});
    OdeState f1 = eval(y1, t0 + dir * h0);
    double d2 = 0.0;
    {
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t comp = 0; comp < y.size(); ++comp) {
        const Tensor& a1 = f1[comp].value();
        const Tensor& a0 = k1[comp].value();
        const Tensor& r = y[comp].value();
        for (std::size_t i = 0; i < a1.size(); ++i) {
          const double sc = opts.tol.absolute + opts.tol.relative * std::abs(r[i]);
          const double d = (a1[i] - a0[i]) / sc;
          acc += d * d;
          ++n;
        }
      }
      d2 = std::sqrt(acc / static_cast<double>(std::max<std::size_t>(n, 1))) / h0;
    }
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 1.0 / 5.0);
    h = std::min({100.0 * h0, h1, span});
  }

  double t = t0;
  double last_err = 0.0;
  std::size_t steps = 0;
  while (dir * (t1 - t) > 0.0) {
    if (++steps > opts.max_steps)
      throw IntegrationError("ode solver exceeded max steps", last_err, t);
    const double remaining = std::abs(t1 - t);
    bool last = false;
    if (h >= remaining) {
      h = remaining;
      last = true;
    }
    if (h < 1e-13 * std::max(1.0, std::abs(t)))
      throw IntegrationError("ode step size underflow", last_err, t);
    const double hs = dir * h;

    std::vector<OdeState> k{k1};
    k.reserve(7);
    for (std::size_t s = 0; s < 5; ++s) {
      OdeState ys = detail::axpy_state(y, hs, a[s], k);
      k.push_back(eval(ys, t + c[s] * hs));
    }
    OdeState ynew = detail::axpy_state(y, hs, a[5], k);
    const double tnew = last ? t1 : t + hs;
    k.push_back(eval(ynew, tnew));

    // Error estimate from values only.
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t comp = 0; comp < y.size(); ++comp) {
      const Tensor& y0v = y[comp].value();
      const Tensor& y1v = ynew[comp].value();
      for (std::size_t i = 0; i < y0v.size(); ++i) {
        double err = 0.0;
        for (std::size_t j = 0; j < 7; ++j)
          if (e[j] != 0.0) err += e[j] * k[j][comp].value()[i];
        err *= hs;
        const double sc = opts.tol.absolute +
                          opts.tol.relative * std::max(std::abs(y0v[i]), std::abs(y1v[i]));
        acc += (err / sc) * (err / sc);
        ++n;
      }
    }
    const double err_norm = std::sqrt(acc / static_cast<double>(std::max<std::size_t>(n, 1)));
    last_err = err_norm;
    if (!std::isfinite(err_norm))
      throw IntegrationError("ode solver produced non-finite state", err_norm, t);

    if (err_norm <= 1.0) {
      ++st.accepted;
      y = std::move(ynew);
      k1 = std::move(k[6]);
      t = tnew;
      const double fac = err_norm == 0.0 ? 10.0 : 0.9 * std::pow(err_norm, -0.2);
      h *= std::clamp(fac, 0.2, 10.0);
    } else {
      ++st.rejected;
      h *= std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 1.0);
    }
  }
  return y;
}

/// Classical fixed-step RK4 with `steps` equal steps from t0 to t1.
template <class F>
OdeState integrate_rk4(F&& f, OdeState y, double t0, double t1, std::size_t steps) {
  if (steps == 0 || t0 == t1) return y;
  const double h = (t1 - t0) / static_cast<double>(steps);
  static const std::vector<double> half{0.5};
  static const std::vector<double> full{1.0};
  static const std::vector<double> w{1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6};
  double t = t0;
  for (std::size_t s = 0; s < steps; ++s) {
    OdeState k1 = f(y, t);
    OdeState k2 = f(detail::axpy_state(y, h, half, {k1}), t + 0.5 * h);
    OdeState k3 = f(detail::axpy_state(y, h, half, {k2}), t + 0.5 * h);
    OdeState k4 = f(detail::axpy_state(y, h, full, {k3}), t + h);
    y = detail::axpy_state(y, h, w, {k1, k2, k3, k4});
    t = t0 + (t1 - t0) * static_cast<double>(s + 1) / static_cast<double>(steps);
  }
  return y;
}

}  // namespace curvedit
