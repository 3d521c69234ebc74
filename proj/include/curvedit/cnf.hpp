#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "curvedit/nn.hpp"
#include "curvedit/ode.hpp"

namespace curvedit {

/// Result of evaluating a vector field with forward-mode tangents.
struct Jvp {
  Var value;
  std::vector<Var> tangents;  // J(u) * tangent_i, one per input tangent
};

/// g(u, t) built from concatsquash layers: each layer computes
///   (W h + b) * sigmoid(t * gate_w + gate_b) + t * bias_w
/// followed by tanh on every layer except the last. Hidden width equals the
/// state dimension.
class ConcatsquashDynamics {
 public:
  struct LayerSlots {
    DenseSlot linear;
    std::size_t gate_w = 0;
    std::size_t gate_b = 0;
    std::size_t bias_w = 0;
  };

  ConcatsquashDynamics() = default;

  ConcatsquashDynamics(std::size_t dim, std::size_t layers, Rng& rng) : dim_(dim) {
    if (dim == 0 || layers == 0) throw std::invalid_argument("concatsquash needs dim, layers > 0");
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string p = "cs" + std::to_string(i);
      LayerSlots s;
      s.linear = add_dense(params_, p + ".lin", dim, dim, rng);
      s.gate_w = params_.add(p + ".gate_w", glorot_uniform(rng, dim, 1).reshaped({dim}));
      s.gate_b = params_.add(p + ".gate_b", Tensor(Shape{dim}));
      s.bias_w = params_.add(p + ".bias_w", glorot_uniform(rng, dim, 1).reshaped({dim}));
      slots_.push_back(s);
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t layer_count() const noexcept { return slots_.size(); }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// Tape-bound evaluator; also satisfies the dynamics interface used by the
  /// trace integrators below.
  class Evaluator {
   public:
    Evaluator(const ConcatsquashDynamics& d, Bound b) : d_(&d), b_(std::move(b)) {}

    Var operator()(const Var& u, double t) const { return jvp(u, t, {}).value; }

    Jvp jvp(const Var& u, double t, const std::vector<Var>& tangents) const {
      Var h = u;
      std::vector<Var> dh = tangents;
      const std::size_t n = d_->slots_.size();
      for (std::size_t i = 0; i < n; ++i) {
        const LayerSlots& s = d_->slots_[i];
        Var gate = ops::sigmoid(ops::add(ops::scale(b_[s.gate_w], t), b_[s.gate_b]));
        Var pre = ops::affine(h, b_[s.linear.w], b_[s.linear.b]);
        pre = ops::add_row(ops::mul_row(pre, gate), ops::scale(b_[s.bias_w], t));
        for (Var& d : dh) d = ops::mul_row(ops::affine(d, b_[s.linear.w]), gate);
        if (i + 1 < n) {
          h = ops::tanh(pre);
          if (!dh.empty()) {
            Var slope = ops::add_scalar(ops::neg(ops::square(h)), 1.0);
            for (Var& d : dh) d = ops::mul(d, slope);
          }
        } else {
          h = pre;
        }
      }
      return {h, std::move(dh)};
    }

   private:
    const ConcatsquashDynamics* d_;
    Bound b_;
  };

  Evaluator bind(Tape& tape, bool trainable) const { return Evaluator(*this, curvedit::bind(tape, params_, trainable)); }
  Evaluator bind(const Bound& bound) const { return Evaluator(*this, bound); }

 private:
  std::size_t dim_ = 0;
  ParamStore params_;
  std::vector<LayerSlots> slots_;
};

/// Linear dynamics du/dt = u A^T, mostly useful as a closed-form test field.
class LinearDynamics {
 public:
  explicit LinearDynamics(Var a) : a_(std::move(a)) {}
  Var operator()(const Var& u, double) const { return ops::affine(u, a_); }
  Jvp jvp(const Var& u, double, const std::vector<Var>& tangents) const {
    Jvp out{ops::affine(u, a_), {}};
    for (const Var& d : tangents) out.tangents.push_back(ops::affine(d, a_));
    return out;
  }

 private:
  Var a_;
};

/// Integrates u' = g(u,t) from t0 to t1.
template <class Dyn>
Var integrate_ode(const Dyn& g, const Var& u0, double t0, double t1,
                  const SolverOptions& opts = {}, IntegrationStats* stats = nullptr) {
  auto f = [&g](const OdeState& s, double t) { return OdeState{g(s[0], t)}; };
  return integrate_dopri5(f, OdeState{u0}, t0, t1, opts, stats)[0];
}

namespace detail {

inline Tensor unit_column_tangent(std::size_t batch, std::size_t dim, std::size_t j) {
  Tensor e(Shape{batch, dim});
  for (std::size_t b = 0; b < batch; ++b) e[b * dim + j] = 1.0;
  return e;
}

inline Tensor rademacher(Rng& rng, std::size_t batch, std::size_t dim) {
  std::bernoulli_distribution coin(0.5);
  Tensor e(Shape{batch, dim});
  for (double& v : e.data()) v = coin(rng) ? 1.0 : -1.0;
  return e;
}

}  // namespace detail

/// tr(dg/du) for every row of u, exactly, via one tangent per coordinate.
template <class Dyn>
Var exact_trace(const Dyn& g, const Var& u, double t, Var* value_out = nullptr) {
  Tape& tape = u.tape();
  const std::size_t b = u.dim(0), n = u.dim(1);
  std::vector<Var> tangents;
  for (std::size_t j = 0; j < n; ++j) tangents.push_back(tape.constant(detail::unit_column_tangent(b, n, j)));
  Jvp r = g.jvp(u, t, tangents);
  if (value_out) *value_out = r.value;
  Var tr;
  for (std::size_t j = 0; j < n; ++j) {
    Var col = ops::reshape(ops::take_cols(r.tangents[j], {j}), {b});
    tr = tr.valid() ? ops::add(tr, col) : col;
  }
  return tr;
}

/// Solution of the augmented system [u, l] with l' = tr(dg/du), l(t0) = 0.
/// Returns (u(t1), l(t1)) with l shaped [B].
template <class Dyn>
std::pair<Var, Var> integrate_with_exact_trace(const Dyn& g, const Var& u0, double t0, double t1,
                                               const SolverOptions& opts = {},
                                               IntegrationStats* stats = nullptr) {
  Tape& tape = u0.tape();
  auto f = [&g](const OdeState& s, double t) {
    Var value;
    Var tr = exact_trace(g, s[0], t, &value);
    return OdeState{value, tr};
  };
  OdeState y0{u0, tape.constant(Tensor(Shape{u0.dim(0)}))};
  OdeState y = integrate_dopri5(f, std::move(y0), t0, t1, opts, stats);
  return {y[0], y[1]};
}

struct HutchinsonResult {
  Var state;      // u(t1)
  Var estimate;   // [B] mean over probes
  Tensor per_probe;  // [P,B] individual probe estimates
};

/// Hutchinson estimate of the integrated trace, l_p' = eps_p^T (dg/du) eps_p,
/// with Rademacher probes held fixed along each trajectory.
template <class Dyn>
HutchinsonResult logdet_hutchinson(const Dyn& g, const Var& u0, double t0, double t1,
                                   std::size_t probe_count, Rng& rng,
                                   const SolverOptions& opts = {},
                                   IntegrationStats* stats = nullptr) {
  if (probe_count == 0) throw std::invalid_argument("probe_count must be >= 1");
  Tape& tape = u0.tape();
  const std::size_t b = u0.dim(0), n = u0.dim(1);
  std::vector<Var> probes;
  for (std::size_t p = 0; p < probe_count; ++p)
    probes.push_back(tape.constant(detail::rademacher(rng, b, n)));
  auto f = [&](const OdeState& s, double t) {
    Jvp r = g.jvp(s[0], t, probes);
    OdeState out{r.value};
    for (std::size_t p = 0; p < probe_count; ++p)
      out.push_back(ops::sum_cols(ops::mul(probes[p], r.tangents[p])));
    return out;
  };
  OdeState y0{u0};
  for (std::size_t p = 0; p < probe_count; ++p) y0.push_back(tape.constant(Tensor(Shape{b})));
  OdeState y = integrate_dopri5(f, std::move(y0), t0, t1, opts, stats);

  HutchinsonResult res;
  res.state = y[0];
  res.per_probe = Tensor(Shape{probe_count, b});
  Var acc;
  for (std::size_t p = 0; p < probe_count; ++p) {
    const Tensor& v = y[p + 1].value();
    for (std::size_t i = 0; i < b; ++i) res.per_probe[p * b + i] = v[i];
    acc = acc.valid() ? ops::add(acc, y[p + 1]) : y[p + 1];
  }
  res.estimate = ops::scale(acc, 1.0 / static_cast<double>(probe_count));
  return res;
}

}  // namespace curvedit
