#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "curvedit/checkpoint.hpp"
#include "curvedit/cnf.hpp"
#include "curvedit/nn.hpp"

namespace curvedit {

enum class FlowKind { identity, linear, coupling, cnf };

inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::identity: return "identity";
    case FlowKind::linear: return "linear";
    case FlowKind::coupling: return "coupling";
    case FlowKind::cnf: return "cnf";
  }
  return "?";
}

inline FlowKind parse_flow_kind(const std::string& s) {
  if (s == "identity") return FlowKind::identity;
  if (s == "linear") return FlowKind::linear;
  if (s == "coupling") return FlowKind::coupling;
  if (s == "cnf") return FlowKind::cnf;
  throw std::invalid_argument("unknown flow kind '" + s + "'");
}

struct FlowForward {
  Var v;
  Var logdet;  // [B]; invalid when not requested
};

/// How a cnf computes its log-determinant.
struct LogdetOptions {
  bool compute = true;
  /// Exact trace when dim <= this; Hutchinson above.
  std::size_t exact_trace_max_dim = 16;
  std::size_t hutchinson_probes = 1;
  Rng* rng = nullptr;  // required for Hutchinson; a fixed-seed generator is used otherwise
};

/// Architecture and solver settings. Only the fields relevant to `kind` apply.
struct FlowConfig {
  FlowKind kind = FlowKind::coupling;
  std::size_t dim = 8;
  std::size_t layers = 6;
  std::size_t hidden = 32;
  /// Multiplies the initial weights of each coupling sub-network's output
  /// layer; 0 starts the flow at the identity map.
  double output_scale = 1.0;
  double horizon = 0.1;  // cnf integration time T
  Tolerances tol{1e-6, 1e-6};
  std::uint64_t seed = 0;
};

class IdentityFlow {
 public:
  explicit IdentityFlow(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const noexcept { return dim_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  FlowForward forward(const Bound&, const Var& z, const LogdetOptions& lo) const {
    FlowForward out{z, {}};
    if (lo.compute) out.logdet = z.tape().constant(Tensor(Shape{z.dim(0)}));
    return out;
  }
  Var inverse(const Bound&, const Var& v) const { return v; }
  FlowForward inverse_with_logdet(const Bound& b, const Var& v, const LogdetOptions& lo) const {
    return forward(b, v, lo);
  }

 private:
  std::size_t dim_;
  ParamStore params_;
};

/// f(z) = M z.
class LinearFlow {
 public:
  LinearFlow(std::size_t dim, Tensor matrix) : dim_(dim) {
    if (matrix.shape() != Shape{dim, dim}) throw ShapeError("linear flow matrix must be [N,N]");
    m_ = params_.add("linear.m", std::move(matrix));
  }
  std::size_t dim() const noexcept { return dim_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const Tensor& matrix() const { return params_.value(m_); }

  FlowForward forward(const Bound& b, const Var& z, const LogdetOptions& lo) const {
    FlowForward out{ops::affine(z, b[m_]), {}};
    if (lo.compute) out.logdet = ops::broadcast(ops::log_abs_det(b[m_]), z.dim(0));
    return out;
  }
  Var inverse(const Bound& b, const Var& v) const {
    return ops::affine(v, ops::matrix_inverse(b[m_]));
  }
  FlowForward inverse_with_logdet(const Bound& b, const Var& v, const LogdetOptions& lo) const {
    FlowForward out{inverse(b, v), {}};
    if (lo.compute) out.logdet = ops::broadcast(ops::neg(ops::log_abs_det(b[m_])), v.dim(0));
    return out;
  }

 private:
  std::size_t dim_;
  ParamStore params_;
  std::size_t m_ = 0;
};

/// Stack of affine coupling layers with alternating mask parity. Each layer
/// keeps one half x_a and maps the other as x_b * exp(s(x_a)) + t(x_a).
class CouplingFlow {
 public:
  struct LayerSlots {
    std::vector<std::size_t> keep;
    std::vector<std::size_t> change;
    DenseSlot scale_hidden, scale_out, shift_hidden, shift_out;
  };

  CouplingFlow(std::size_t dim, std::size_t layers, std::size_t hidden, double output_scale,
               Rng& rng)
      : dim_(dim) {
    if (dim < 2) throw std::invalid_argument("coupling flow needs dim >= 2");
    for (std::size_t l = 0; l < layers; ++l) {
      LayerSlots s;
      const std::size_t parity = l % 2;
      for (std::size_t i = 0; i < dim; ++i) (i % 2 == parity ? s.keep : s.change).push_back(i);
      const std::string p = "coupling" + std::to_string(l);
      s.scale_hidden = add_dense(params_, p + ".scale.0", s.keep.size(), hidden, rng);
      s.scale_out = add_dense(params_, p + ".scale.1", hidden, s.change.size(), rng, output_scale);
      s.shift_hidden = add_dense(params_, p + ".shift.0", s.keep.size(), hidden, rng);
      s.shift_out = add_dense(params_, p + ".shift.1", hidden, s.change.size(), rng, output_scale);
      layers_.push_back(std::move(s));
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  const LayerSlots& layer(std::size_t i) const { return layers_.at(i); }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  /// Scale-network output s(x_a) and shift t(x_a) for layer l.
  std::pair<Var, Var> scale_shift(const Bound& b, std::size_t l, const Var& xa) const {
    const LayerSlots& s = layers_[l];
    const DenseVars sc[2] = {s.scale_hidden.on(b), s.scale_out.on(b)};
    const DenseVars sh[2] = {s.shift_hidden.on(b), s.shift_out.on(b)};
    Var scale = mlp_forward(sc, xa, Activation::tanh, Activation::tanh);
    Var shift = mlp_forward(sh, xa, Activation::tanh, Activation::none);
    return {scale, shift};
  }

  FlowForward forward(const Bound& b, const Var& z, const LogdetOptions& lo) const {
    Var x = z;
    Var logdet;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerSlots& s = layers_[l];
      Var xa = ops::take_cols(x, s.keep);
      Var xb = ops::take_cols(x, s.change);
      auto [scale, shift] = scale_shift(b, l, xa);
      Var yb = ops::add(ops::mul(xb, ops::exp(scale)), shift);
      x = ops::assemble_cols({xa, yb}, {s.keep, s.change}, dim_);
      if (lo.compute) {
        Var ld = ops::sum_cols(scale);
        logdet = logdet.valid() ? ops::add(logdet, ld) : ld;
      }
    }
    if (lo.compute && !logdet.valid()) logdet = z.tape().constant(Tensor(Shape{z.dim(0)}));
    return {x, logdet};
  }

  Var inverse(const Bound& b, const Var& v) const {
    return inverse_with_logdet(b, v, LogdetOptions{false}).v;
  }

  FlowForward inverse_with_logdet(const Bound& b, const Var& v, const LogdetOptions& lo) const {
    Var y = v;
    Var logdet;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const LayerSlots& s = layers_[l];
      Var ya = ops::take_cols(y, s.keep);
      Var yb = ops::take_cols(y, s.change);
      auto [scale, shift] = scale_shift(b, l, ya);
      Var xb = ops::mul(ops::sub(yb, shift), ops::exp(ops::neg(scale)));
      y = ops::assemble_cols({ya, xb}, {s.keep, s.change}, dim_);
      if (lo.compute) {
        Var ld = ops::neg(ops::sum_cols(scale));
        logdet = logdet.valid() ? ops::add(logdet, ld) : ld;
      }
    }
    if (lo.compute && !logdet.valid()) logdet = v.tape().constant(Tensor(Shape{v.dim(0)}));
    return {y, logdet};
  }

 private:
  std::size_t dim_;
  ParamStore params_;
  std::vector<LayerSlots> layers_;
};

/// f(z) = u(T) for u' = g(u,t), u(0) = z; the inverse integrates from T to 0.
class CnfFlow {
 public:
  CnfFlow(std::size_t dim, std::size_t layers, double horizon, Tolerances tol, Rng& rng)
      : dyn_(dim, layers, rng), horizon_(horizon), tol_(tol) {}

  std::size_t dim() const noexcept { return dyn_.dim(); }
  ParamStore& params() noexcept { return dyn_.params(); }
  const ParamStore& params() const noexcept { return dyn_.params(); }
  const ConcatsquashDynamics& dynamics() const noexcept { return dyn_; }
  double horizon() const noexcept { return horizon_; }
  const Tolerances& tolerances() const noexcept { return tol_; }
  SolverOptions solver() const { return SolverOptions{tol_, 100000}; }

  FlowForward forward(const Bound& b, const Var& z, const LogdetOptions& lo) const {
    return integrate(b, z, 0.0, horizon_, lo);
  }

  Var inverse(const Bound& b, const Var& v) const {
    return integrate_ode(dyn_.bind(b), v, horizon_, 0.0, solver());
  }

  FlowForward inverse_with_logdet(const Bound& b, const Var& v, const LogdetOptions& lo) const {
    return integrate(b, v, horizon_, 0.0, lo);
  }

 private:
  FlowForward integrate(const Bound& b, const Var& u0, double t0, double t1,
                        const LogdetOptions& lo) const {
    auto g = dyn_.bind(b);
    if (!lo.compute) return {integrate_ode(g, u0, t0, t1, solver()), {}};
    if (dim() <= lo.exact_trace_max_dim) {
      auto [u, ld] = integrate_with_exact_trace(g, u0, t0, t1, solver());
      return {u, ld};
    }
    Rng fallback(0);
    Rng& rng = lo.rng ? *lo.rng : fallback;
    HutchinsonResult h = logdet_hutchinson(g, u0, t0, t1, lo.hutchinson_probes, rng, solver());
    return {h.state, h.estimate};
  }

  ConcatsquashDynamics dyn_;
  double horizon_;
  Tolerances tol_;
};

/// Smooth bijection f: Z -> V behind one contract, with log|det df/dz|.
/// Immutable during inference; every call records on a caller-owned tape.
class FlowModel {
 public:
  using Impl = std::variant<IdentityFlow, LinearFlow, CouplingFlow, CnfFlow>;

  explicit FlowModel(Impl impl, FlowConfig config) : impl_(std::move(impl)), config_(config) {}

  static FlowModel identity(std::size_t dim) {
    FlowConfig c;
    c.kind = FlowKind::identity;
    c.dim = dim;
    return FlowModel(IdentityFlow(dim), c);
  }

  static FlowModel linear(Tensor matrix) {
    FlowConfig c;
    c.kind = FlowKind::linear;
    c.dim = matrix.dim(0);
    return FlowModel(LinearFlow(c.dim, std::move(matrix)), c);
  }

  /// Builds a freshly initialized flow from `config` (seeded by config.seed).
  static FlowModel create(const FlowConfig& config) {
    Rng rng(config.seed);
    switch (config.kind) {
      case FlowKind::identity: return FlowModel(IdentityFlow(config.dim), config);
      case FlowKind::linear: return FlowModel(LinearFlow(config.dim, linalg::identity(config.dim)), config);
      case FlowKind::coupling:
        return FlowModel(CouplingFlow(config.dim, config.layers, config.hidden, config.output_scale, rng),
                         config);
      case FlowKind::cnf:
        return FlowModel(CnfFlow(config.dim, config.layers, config.horizon, config.tol, rng), config);
    }
    throw std::logic_error("unreachable flow kind");
  }

  FlowKind kind() const noexcept { return config_.kind; }
  const FlowConfig& config() const noexcept { return config_; }
  std::size_t dim() const noexcept { return config_.dim; }
  const Impl& impl() const noexcept { return impl_; }

  ParamStore& params() {
    return std::visit([](auto& f) -> ParamStore& { return f.params(); }, impl_);
  }
  const ParamStore& params() const {
    return std::visit([](const auto& f) -> const ParamStore& { return f.params(); }, impl_);
  }

  Bound bind(Tape& tape, bool trainable) const { return curvedit::bind(tape, params(), trainable); }

  FlowForward forward(const Bound& b, const Var& z, const LogdetOptions& lo = {}) const {
    check_dim(z, "forward");
    return std::visit([&](const auto& f) { return f.forward(b, z, lo); }, impl_);
  }

  Var inverse(const Bound& b, const Var& v) const {
    check_dim(v, "inverse");
    return std::visit([&](const auto& f) { return f.inverse(b, v); }, impl_);
  }

  /// f^-1(v) with log|det d f^-1/dv|.
  FlowForward inverse_with_logdet(const Bound& b, const Var& v, const LogdetOptions& lo = {}) const {
    check_dim(v, "inverse");
    return std::visit([&](const auto& f) { return f.inverse_with_logdet(b, v, lo); }, impl_);
  }

  // Value-level conveniences over a private tape.

  Tensor forward_values(const Tensor& z) const {
    Tape tape;
    const Bound b = bind(tape, false);
    return forward(b, tape.constant(as_batch(z)), LogdetOptions{false}).v.value().reshaped(z.shape());
  }

  /// (v, logdet) for a batch [B,N] (or a single vector).
  std::pair<Tensor, Tensor> forward_with_logdet(const Tensor& z, LogdetOptions lo = {}) const {
    Tape tape;
    const Bound b = bind(tape, false);
    lo.compute = true;
    FlowForward r = forward(b, tape.constant(as_batch(z)), lo);
    return {r.v.value().reshaped(z.shape()), r.logdet.value()};
  }

  std::pair<Tensor, Tensor> inverse_with_logdet(const Tensor& v, LogdetOptions lo = {}) const {
    Tape tape;
    const Bound b = bind(tape, false);
    lo.compute = true;
    FlowForward r = inverse_with_logdet(b, tape.constant(as_batch(v)), lo);
    return {r.v.value().reshaped(v.shape()), r.logdet.value()};
  }

  Tensor inverse_values(const Tensor& v) const {
    Tape tape;
    const Bound b = bind(tape, false);
    return inverse(b, tape.constant(as_batch(v))).value().reshaped(v.shape());
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.meta["kind"] = to_string(config_.kind);
    c.meta["dim"] = std::to_string(config_.dim);
    c.meta["layers"] = std::to_string(config_.layers);
    c.meta["hidden"] = std::to_string(config_.hidden);
    c.meta["seed"] = std::to_string(config_.seed);
    if (config_.kind == FlowKind::cnf) {
      c.meta["horizon"] = exact_string(config_.horizon);
      c.meta["atol"] = exact_string(config_.tol.absolute);
      c.meta["rtol"] = exact_string(config_.tol.relative);
    }
    c.params = params();
    return c;
  }

  static FlowModel from_checkpoint(const Checkpoint& c) {
    FlowConfig cfg;
    cfg.kind = parse_flow_kind(c.require_meta("kind"));
    cfg.dim = std::stoul(c.require_meta("dim"));
    cfg.layers = std::stoul(c.require_meta("layers"));
    cfg.hidden = std::stoul(c.require_meta("hidden"));
    cfg.seed = std::stoull(c.require_meta("seed"));
    if (cfg.kind == FlowKind::cnf) {
      cfg.horizon = std::stod(c.require_meta("horizon"));
      cfg.tol.absolute = std::stod(c.require_meta("atol"));
      cfg.tol.relative = std::stod(c.require_meta("rtol"));
    }
    FlowModel m = cfg.kind == FlowKind::linear
                      ? FlowModel::linear(linalg::identity(cfg.dim))
                      : create(cfg);
    m.config_ = cfg;
    ParamStore& ps = m.params();
    if (ps.size() != c.params.size())
      throw FormatError("checkpoint has " + std::to_string(c.params.size()) +
                        " tensors, flow expects " + std::to_string(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps.name(i) != c.params.name(i) || ps.value(i).shape() != c.params.value(i).shape())
        throw FormatError("checkpoint tensor '" + c.params.name(i) + "' does not match flow layout");
      ps.value(i) = c.params.value(i);
    }
    return m;
  }

  static std::string exact_string(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }

 private:
  void check_dim(const Var& x, const char* op) const {
    if (x.shape().size() != 2 || x.dim(1) != config_.dim)
      throw ShapeError(std::string("flow ") + op + ": expected [B," + std::to_string(config_.dim) +
                       "], got " + shape_string(x.shape()));
  }

  static Tensor as_batch(const Tensor& t) {
    if (t.rank() == 1) return t.reshaped({1, t.dim(0)});
    return t;
  }

  Impl impl_;
  FlowConfig config_;
};

}  // namespace curvedit
