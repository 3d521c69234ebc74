#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "curvedit/flow.hpp"
#include "curvedit/hash.hpp"

namespace curvedit {

/// Edit attribute k (0-based) by amount t.
struct EditRequest {
  std::size_t k = 0;
  double t = 0.0;

  friend bool operator==(const EditRequest&, const EditRequest&) = default;
};

inline constexpr double kMaxEditAmount = 6.0;

class EditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BackendKind { decurved, linear, warped };

inline std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::decurved: return "decurved";
    case BackendKind::linear: return "linear";
    case BackendKind::warped: return "warped";
  }
  return "?";
}

inline BackendKind parse_backend_kind(const std::string& s) {
  if (s == "decurved") return BackendKind::decurved;
  if (s == "linear") return BackendKind::linear;
  if (s == "warped") return BackendKind::warped;
  throw std::invalid_argument("unknown backend '" + s + "'");
}

/// One applied edit, for replay and debugging.
struct TraceRecord {
  BackendKind backend;
  std::size_t k;
  double t;
  std::uint64_t input_hash;
  std::uint64_t output_hash;
  bool clamped = false;
};

inline std::string format_trace_record(const TraceRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s k=%zu t=%.17g in=%s out=%s%s", to_string(r.backend).c_str(),
                r.k, r.t, hex64(r.input_hash).c_str(), hex64(r.output_hash).c_str(),
                r.clamped ? " clamped" : "");
  return buf;
}

/// Collects trace records and clamp warnings from edit calls.
struct EditLog {
  std::vector<TraceRecord> records;
  std::vector<std::string> warnings;
};

// ---- backends ----

/// z' = f^-1(f(z) + t e_k).
class DecurvedBackend {
 public:
  DecurvedBackend(std::shared_ptr<const FlowModel> flow, std::size_t attributes)
      : flow_(std::move(flow)), attributes_(attributes) {
    if (!flow_) throw std::invalid_argument("decurved backend needs a flow");
    if (attributes_ == 0 || attributes_ > flow_->dim())
      throw std::invalid_argument("decurved backend: attribute count must be in [1, N]");
  }
  explicit DecurvedBackend(std::shared_ptr<const FlowModel> flow)
      : DecurvedBackend(flow, flow ? flow->dim() : 0) {}

  std::size_t dim() const { return flow_->dim(); }
  std::size_t attributes() const noexcept { return attributes_; }
  const FlowModel& flow() const { return *flow_; }

  Tensor apply(const Tensor& z, std::size_t k, double t) const {
    if (t == 0.0) return z;
    Tensor v = flow_->forward_values(z);
    const std::size_t n = dim();
    for (std::size_t i = 0; i < v.size() / n; ++i) v[i * n + k] += t;
    return flow_->inverse_values(v);
  }

  /// Columns of d f^-1 / dv at v = f(z), as rows of a [N', N] tensor. One
  /// backward pass: v is replicated N times and each copy is seeded with e_i.
  Tensor fields(const Tensor& z) const {
    const std::size_t n = dim();
    const Tensor v = flow_->forward_values(z.reshaped({1, n}));
    Tensor rep(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) rep[i * n + j] = v[j];
    Tape tape;
    const Bound b = flow_->bind(tape, false);
    Var vin = tape.leaf(rep);
    Var zout = flow_->inverse(b, vin);
    const auto g = tape.vjp(zout, linalg::identity(n), std::span<const Var>(&vin, 1));
    // g row i = d z_i / d v, i.e. row i of the Jacobian; field k is column k.
    Tensor out(Shape{attributes_, n});
    for (std::size_t k = 0; k < attributes_; ++k)
      for (std::size_t i = 0; i < n; ++i) out[k * n + i] = (*g[0])[i * n + k];
    return out;
  }

 private:
  std::shared_ptr<const FlowModel> flow_;
  std::size_t attributes_;
};

/// z' = z + t a_k with fixed directions a_k (rows of `directions`).
class LinearBackend {
 public:
  explicit LinearBackend(Tensor directions) : directions_(std::move(directions)) {
    if (directions_.rank() != 2) throw ShapeError("linear backend directions must be [N',N]");
  }

  /// a_k = M^-1 e_k.
  static LinearBackend from_matrix(const Tensor& m) {
    return LinearBackend(linalg::transpose(linalg::inverse(m)));
  }

  std::size_t dim() const { return directions_.dim(1); }
  std::size_t attributes() const { return directions_.dim(0); }
  const Tensor& directions() const noexcept { return directions_; }

  Tensor apply(const Tensor& z, std::size_t k, double t) const {
    Tensor out = z;
    const std::size_t n = dim();
    for (std::size_t i = 0; i < out.size() / n; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += t * directions_[k * n + j];
    return out;
  }

  Tensor fields(const Tensor&) const { return directions_; }

 private:
  Tensor directions_;
};

/// Gradient flows of radial-basis potentials, one potential per attribute:
///   phi_k(z) = sum_j w_kj exp(-|z - c_kj|^2 / (2 s^2)),  X_k = grad phi_k / |grad phi_k|.
/// Edits integrate X_k with fixed-step RK4.
class WarpedBackend {
 public:
  struct Potential {
    Tensor centers;  // [M, N]
    Tensor weights;  // [M]
  };

  WarpedBackend(std::vector<Potential> potentials, double width, std::size_t steps_per_unit = 64)
      : potentials_(std::move(potentials)), width_(width), steps_per_unit_(steps_per_unit) {
    if (potentials_.empty()) throw std::invalid_argument("warped backend needs potentials");
    dim_ = potentials_[0].centers.dim(1);
  }

  /// Centers from the standard normal prior, weights uniform in [-1, 1].
  static WarpedBackend random(std::size_t dim, std::size_t attributes, std::uint64_t seed,
                              std::size_t centers = 8, double width = 1.5) {
    Rng rng(seed);
    std::uniform_real_distribution<double> uw(-1.0, 1.0);
    std::vector<Potential> ps;
    for (std::size_t k = 0; k < attributes; ++k) {
      Potential p{normal_tensor(rng, {centers, dim}), Tensor(Shape{centers})};
      for (double& w : p.weights.data()) w = uw(rng);
      ps.push_back(std::move(p));
    }
    return WarpedBackend(std::move(ps), width);
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t attributes() const noexcept { return potentials_.size(); }
  double width() const noexcept { return width_; }
  const std::vector<Potential>& potentials() const noexcept { return potentials_; }

  /// X_k at a single point z (length N).
  std::vector<double> field(const double* z, std::size_t k) const {
    const Potential& p = potentials_.at(k);
    const std::size_t m = p.weights.size();
    const double inv_s2 = 1.0 / (width_ * width_);
    std::vector<double> g(dim_, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < dim_; ++i) {
        const double d = z[i] - p.centers[j * dim_ + i];
        d2 += d * d;
      }
      const double c = -p.weights[j] * std::exp(-0.5 * d2 * inv_s2) * inv_s2;
      for (std::size_t i = 0; i < dim_; ++i) g[i] += c * (z[i] - p.centers[j * dim_ + i]);
    }
    double norm = 0.0;
    for (double v : g) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-300) return std::vector<double>(dim_, 0.0);
    for (double& v : g) v /= norm;
    return g;
  }

  Tensor apply(const Tensor& z, std::size_t k, double t) const {
    Tensor out = z;
    const std::size_t steps = static_cast<std::size_t>(
        std::ceil(static_cast<double>(steps_per_unit_) * std::abs(t)));
    if (steps == 0) return out;
    const double h = t / static_cast<double>(steps);
    std::vector<double> y(dim_), tmp(dim_);
    for (std::size_t r = 0; r < out.size() / dim_; ++r) {
      double* zr = &out[r * dim_];
      for (std::size_t s = 0; s < steps; ++s) {
        const auto k1 = field(zr, k);
        for (std::size_t i = 0; i < dim_; ++i) tmp[i] = zr[i] + 0.5 * h * k1[i];
        const auto k2 = field(tmp.data(), k);
        for (std::size_t i = 0; i < dim_; ++i) tmp[i] = zr[i] + 0.5 * h * k2[i];
        const auto k3 = field(tmp.data(), k);
        for (std::size_t i = 0; i < dim_; ++i) tmp[i] = zr[i] + h * k3[i];
        const auto k4 = field(tmp.data(), k);
        for (std::size_t i = 0; i < dim_; ++i)
          zr[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      }
    }
    return out;
  }

  Tensor fields(const Tensor& z) const {
    Tensor out(Shape{attributes(), dim_});
    for (std::size_t k = 0; k < attributes(); ++k) {
      const auto f = field(z.storage().data(), k);
      for (std::size_t i = 0; i < dim_; ++i) out[k * dim_ + i] = f[i];
    }
    return out;
  }

 private:
  std::vector<Potential> potentials_;
  double width_;
  std::size_t steps_per_unit_;
  std::size_t dim_ = 0;
};

/// One of the three editing realizations behind a common interface.
class EditBackend {
 public:
  using Impl = std::variant<DecurvedBackend, LinearBackend, WarpedBackend>;

  EditBackend(DecurvedBackend b) : impl_(std::move(b)) {}
  EditBackend(LinearBackend b) : impl_(std::move(b)) {}
  EditBackend(WarpedBackend b) : impl_(std::move(b)) {}

  BackendKind kind() const noexcept { return static_cast<BackendKind>(impl_.index()); }
  const Impl& impl() const noexcept { return impl_; }
  std::size_t dim() const {
    return std::visit([](const auto& b) { return b.dim(); }, impl_);
  }
  std::size_t attributes() const {
    return std::visit([](const auto& b) { return b.attributes(); }, impl_);
  }

  /// Raw edit of every row of z ([N] or [B,N]); no validation or clamping.
  Tensor apply(const Tensor& z, std::size_t k, double t) const {
    return std::visit([&](const auto& b) { return b.apply(z, k, t); }, impl_);
  }

  /// Attribute vector fields X_k(z) at one point, as rows of [N', N].
  Tensor fields(const Tensor& z) const {
    return std::visit([&](const auto& b) { return b.fields(z); }, impl_);
  }

 private:
  Impl impl_;
};

// ---- operations ----

inline void validate(const EditBackend& backend, const EditRequest& req) {
  if (req.k >= backend.attributes())
    throw std::out_of_range("attribute index " + std::to_string(req.k) + " outside [0, " +
                            std::to_string(backend.attributes()) + ")");
  if (!std::isfinite(req.t)) throw std::invalid_argument("edit amount must be finite");
}

/// Validates, clamps |t| to kMaxEditAmount (with a warning), and applies one edit.
inline Tensor edit(const EditBackend& backend, const Tensor& z, EditRequest req,
                   EditLog* log = nullptr) {
  validate(backend, req);
  const std::size_t n = backend.dim();
  const bool ok = (z.rank() == 1 && z.size() == n) || (z.rank() == 2 && z.dim(1) == n);
  if (!ok)
    throw ShapeError("edit: latent of shape " + shape_string(z.shape()) + " for N=" +
                     std::to_string(n));
  bool clamped = false;
  if (std::abs(req.t) > kMaxEditAmount) {
    const double orig = req.t;
    req.t = std::copysign(kMaxEditAmount, req.t);
    clamped = true;
    if (log)
      log->warnings.push_back("edit amount " + std::to_string(orig) + " for k=" +
                              std::to_string(req.k) + " clamped to " + std::to_string(req.t));
  }
  Tensor out;
  try {
    out = backend.apply(z, req.k, req.t);
  } catch (const std::exception& e) {
    throw EditError(to_string(backend.kind()) + " edit failed (k=" + std::to_string(req.k) +
                    ", t=" + std::to_string(req.t) + "): " + e.what());
  }
  if (log)
    log->records.push_back(
        TraceRecord{backend.kind(), req.k, req.t, hash_tensor(z), hash_tensor(out), clamped});
  return out;
}

/// Left-to-right application of the requests.
inline Tensor edit_sequence(const EditBackend& backend, Tensor z,
                            const std::vector<EditRequest>& requests, EditLog* log = nullptr) {
  for (const EditRequest& r : requests) validate(backend, r);
  for (const EditRequest& r : requests) z = edit(backend, z, r, log);
  return z;
}

/// X_k(z) = (d f^-1/dv) e_k at v = f(z).
inline Tensor pushforward_field(const FlowModel& f, const Tensor& z, std::size_t k) {
  const DecurvedBackend b(std::shared_ptr<const FlowModel>(&f, [](const FlowModel*) {}));
  const Tensor all = b.fields(z);
  const std::size_t n = f.dim();
  if (k >= n) throw std::out_of_range("pushforward_field: k out of range");
  return Tensor(Shape{n}, std::vector<double>(all.storage().begin() + k * n,
                                              all.storage().begin() + (k + 1) * n));
}

namespace detail {

inline Tensor field_row(const EditBackend& b, const Tensor& z, std::size_t k) {
  const Tensor all = b.fields(z);
  const std::size_t n = b.dim();
  return Tensor(Shape{n}, std::vector<double>(all.storage().begin() + k * n,
                                              all.storage().begin() + (k + 1) * n));
}

// (DY) X at z by central differences along X: (Y(z + hX) - Y(z - hX)) / 2h.
inline Tensor directional(const EditBackend& b, const Tensor& z, std::size_t y, const Tensor& x,
                          double h) {
  const Tensor yp = field_row(b, z + x * h, y);
  const Tensor ym = field_row(b, z - x * h, y);
  return (yp - ym) * (0.5 / h);
}

inline Tensor bracket(const EditBackend& b, const Tensor& z, std::size_t k, std::size_t l,
                      double h) {
  const Tensor xk = field_row(b, z, k);
  const Tensor xl = field_row(b, z, l);
  return directional(b, z, l, xk, h) - directional(b, z, k, xl, h);
}

}  // namespace detail

struct BracketEstimate {
  double residual;        // |[X_k, X_l](z)| after Richardson refinement
  double coarse;          // at h
  double fine;            // at h/2
};

/// Euclidean norm of the finite-difference Lie bracket [X_k, X_l] at z.
inline BracketEstimate lie_bracket(const EditBackend& b, const Tensor& z, std::size_t k,
                                   std::size_t l, double h = 1e-4) {
  if (k == l) throw std::invalid_argument("lie bracket needs k != l");
  const std::size_t n = b.dim();
  if (k >= b.attributes() || l >= b.attributes())
    throw std::out_of_range("lie bracket: attribute index out of range");
  const Tensor zr = z.reshaped({n});
  const Tensor c = detail::bracket(b, zr, k, l, h);
  const Tensor f = detail::bracket(b, zr, k, l, 0.5 * h);
  const Tensor r = (f * 4.0 - c) * (1.0 / 3.0);
  return {l2_norm(r), l2_norm(c), l2_norm(f)};
}

inline double lie_bracket_residual(const EditBackend& b, const Tensor& z, std::size_t k,
                                   std::size_t l, double h = 1e-4) {
  return lie_bracket(b, z, k, l, h).residual;
}

/// Edit on a tape for training: z' = f^-1(f(z) + t_i e_{k_i}) per row, with
/// the forward log-det at z.
struct TapeEdit {
  Var edited;
  Var logdet;
};

inline TapeEdit decurved_edit_on_tape(const FlowModel& f, const Bound& b, const Var& z,
                                      const std::vector<std::size_t>& ks,
                                      const std::vector<double>& ts,
                                      const LogdetOptions& lo = {}) {
  const std::size_t bsz = z.dim(0), n = f.dim();
  if (ks.size() != bsz || ts.size() != bsz) throw ShapeError("decurved_edit_on_tape: batch mismatch");
  FlowForward fw = f.forward(b, z, lo);
  Tensor shift(Shape{bsz, n});
  for (std::size_t i = 0; i < bsz; ++i) shift[i * n + ks.at(i)] = ts[i];
  Var moved = ops::add(fw.v, z.tape().constant(std::move(shift)));
  return {f.inverse(b, moved), fw.logdet};
}

}  // namespace curvedit
