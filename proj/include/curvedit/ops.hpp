#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "curvedit/tape.hpp"

// Differentiable operations over Var. Per-sample scalars are rank-1 [B];
// batches of vectors are rank-2 [B,N].
namespace curvedit::ops {

namespace detail {

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(v.shape()));
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
}

template <class F, class D>
Var unary(const Var& x, F f, D dfdx_from_xy) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return x.tape().record(std::move(y), {x}, [dfdx_from_xy](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const Tensor& go = c.grad_out();
    const Tensor& xv = c.input(0);
    const Tensor& yv = c.out();
    for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * dfdx_from_xy(xv[i], yv[i]);
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tensor y = a.value() + b.value();
  return a.tape().record(std::move(y), {a, b}, [](BackwardContext& c) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = c.grad_in(k)) *g += c.grad_out();
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tensor y = a.value() - b.value();
  return a.tape().record(std::move(y), {a, b}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) *g += c.grad_out();
    if (Tensor* g = c.grad_in(1)) *g -= c.grad_out();
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.tape().record(std::move(y), {a, b}, [](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& bv = c.input(1);
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * bv[i];
    }
    if (Tensor* g = c.grad_in(1)) {
      const Tensor& av = c.input(0);
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor y = a.value() * s;
  return a.tape().record(std::move(y), {a}, [s](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& go = c.grad_out();
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += s * go[i];
    }
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v += s;
  return a.tape().record(std::move(y), {a}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) *g += c.grad_out();
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var square(const Var& x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var abs(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Tensor::scalar(s), {x}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const double go = c.grad_out()[0];
      for (double& v : g->data()) v += go;
    }
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

/// [B,N] -> [B]
inline Var sum_cols(const Var& x) {
  detail::require_rank(x, 2, "sum_cols");
  const std::size_t b = x.dim(0), n = x.dim(1);
  const Tensor& xv = x.value();
  Tensor y(Shape{b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += xv[i * n + j];
  return x.tape().record(std::move(y), {x}, [n](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& go = c.grad_out();
      for (std::size_t i = 0; i < go.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += go[i];
    }
  });
}

/// [B,N] + [N] broadcast over rows.
inline Var add_row(const Var& x, const Var& row) {
  detail::require_rank(x, 2, "add_row");
  const std::size_t b = x.dim(0), n = x.dim(1);
  if (row.value().size() != n)
    throw ShapeError("add_row: row of size " + std::to_string(row.value().size()) +
                     " for width " + std::to_string(n));
  Tensor y = x.value();
  const Tensor& r = row.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += r[j];
  return x.tape().record(std::move(y), {x, row}, [b, n](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) *g += go;
    if (Tensor* g = c.grad_in(1))
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += go[i * n + j];
  });
}

/// [B,N] * [N] broadcast over rows.
inline Var mul_row(const Var& x, const Var& row) {
  detail::require_rank(x, 2, "mul_row");
  const std::size_t b = x.dim(0), n = x.dim(1);
  if (row.value().size() != n) throw ShapeError("mul_row: width mismatch");
  Tensor y = x.value();
  const Tensor& r = row.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= r[j];
  return x.tape().record(std::move(y), {x, row}, [b, n](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& r = c.input(1);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += go[i * n + j] * r[j];
    }
    if (Tensor* g = c.grad_in(1)) {
      const Tensor& xv = c.input(0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += go[i * n + j] * xv[i * n + j];
    }
  });
}

/// [B,N] * [B] broadcast over columns.
inline Var mul_col(const Var& x, const Var& col) {
  detail::require_rank(x, 2, "mul_col");
  const std::size_t b = x.dim(0), n = x.dim(1);
  if (col.value().size() != b) throw ShapeError("mul_col: batch mismatch");
  Tensor y = x.value();
  const Tensor& cv = col.value();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= cv[i];
  return x.tape().record(std::move(y), {x, col}, [b, n](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& cv = c.input(1);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += go[i * n + j] * cv[i];
    }
    if (Tensor* g = c.grad_in(1)) {
      const Tensor& xv = c.input(0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i] += go[i * n + j] * xv[i * n + j];
    }
  });
}

/// Scalar [] or [1] repeated into a [B] vector.
inline Var broadcast(const Var& s, std::size_t b) {
  if (s.value().size() != 1) throw ShapeError("broadcast expects a scalar");
  Tensor y(Shape{b}, s.value()[0]);
  return s.tape().record(std::move(y), {s}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      double acc = 0.0;
      for (double v : c.grad_out().data()) acc += v;
      (*g)[0] += acc;
    }
  });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor y = linalg::matmul(a.value(), b.value());
  return a.tape().record(std::move(y), {a, b}, [m, k, n](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& bv = c.input(1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
          (*g)[i * k + p] += acc;
        }
    }
    if (Tensor* g = c.grad_in(1)) {
      const Tensor& av = c.input(0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double a_ip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*g)[p * n + j] += a_ip * go[i * n + j];
        }
    }
  });
}

/// x W^T (+ bias): x [B,in], W [out,in], bias [out] (bias may be invalid Var).
inline Var affine(const Var& x, const Var& w, const Var& bias) {
  detail::require_rank(x, 2, "affine");
  detail::require_rank(w, 2, "affine");
  const std::size_t bsz = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("affine: input width " + std::to_string(in) + " vs weight " +
                     shape_string(w.shape()));
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().size() != out) throw ShapeError("affine: bias size mismatch");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor y(Shape{bsz, out});
  for (std::size_t i = 0; i < bsz; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = has_bias ? bias.value()[o] : 0.0;
      const double* xr = &xv[i * in];
      const double* wr = &wv[o * in];
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      y[i * out + o] = acc;
    }
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record(std::move(y), std::move(inputs),
                         [bsz, in, out, has_bias](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& wv = c.input(1);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t o = 0; o < out; ++o) {
          const double gv = go[i * out + o];
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < in; ++p) (*g)[i * in + p] += gv * wv[o * in + p];
        }
    }
    if (Tensor* g = c.grad_in(1)) {
      const Tensor& xv = c.input(0);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t o = 0; o < out; ++o) {
          const double gv = go[i * out + o];
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < in; ++p) (*g)[o * in + p] += gv * xv[i * in + p];
        }
    }
    if (has_bias)
      if (Tensor* g = c.grad_in(2))
        for (std::size_t i = 0; i < bsz; ++i)
          for (std::size_t o = 0; o < out; ++o) (*g)[o] += go[i * out + o];
  });
}

inline Var affine(const Var& x, const Var& w) { return affine(x, w, Var{}); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(y), {x}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& go = c.grad_out();
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
    }
  });
}

/// Selected columns of a [B,N] tensor, in the given order.
inline Var take_cols(const Var& x, std::vector<std::size_t> cols) {
  detail::require_rank(x, 2, "take_cols");
  const std::size_t b = x.dim(0), n = x.dim(1), m = cols.size();
  for (std::size_t c : cols)
    if (c >= n) throw ShapeError("take_cols: column " + std::to_string(c) + " out of range");
  const Tensor& xv = x.value();
  Tensor y(Shape{b, m});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] = xv[i * n + cols[j]];
  return x.tape().record(std::move(y), {x}, [b, n, m, cols = std::move(cols)](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const Tensor& go = c.grad_out();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < m; ++j) (*g)[i * n + cols[j]] += go[i * m + j];
    }
  });
}

/// Inverse of take_cols over a partition: places parts[i] at columns idx[i].
inline Var assemble_cols(const std::vector<Var>& parts,
                         const std::vector<std::vector<std::size_t>>& idx, std::size_t width) {
  if (parts.empty() || parts.size() != idx.size())
    throw ShapeError("assemble_cols: parts/index mismatch");
  const std::size_t b = parts[0].dim(0);
  Tensor y(Shape{b, width});
  for (std::size_t p = 0; p < parts.size(); ++p) {
    detail::require_rank(parts[p], 2, "assemble_cols");
    const std::size_t m = idx[p].size();
    if (parts[p].dim(1) != m || parts[p].dim(0) != b)
      throw ShapeError("assemble_cols: part " + std::to_string(p) + " has shape " +
                       shape_string(parts[p].shape()));
    const Tensor& pv = parts[p].value();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < m; ++j) y[i * width + idx[p][j]] = pv[i * m + j];
  }
  return parts[0].tape().record(std::move(y), parts, [idx, b, width](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    for (std::size_t p = 0; p < idx.size(); ++p) {
      Tensor* g = c.grad_in(p);
      if (!g) continue;
      const std::size_t m = idx[p].size();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < m; ++j) (*g)[i * m + j] += go[i * width + idx[p][j]];
    }
  });
}

/// [B,n] ++ [B,m] -> [B,n+m]
inline Var concat_cols(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  const std::size_t n = a.dim(1), m = b.dim(1);
  std::vector<std::size_t> ia(n), ib(m);
  for (std::size_t i = 0; i < n; ++i) ia[i] = i;
  for (std::size_t i = 0; i < m; ++i) ib[i] = n + i;
  return assemble_cols({a, b}, {ia, ib}, n + m);
}

/// Mean softmax cross-entropy of logits [B,K] against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
  const Tensor& lv = logits.value();
  Tensor probs(Shape{b, k});
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) throw ShapeError("cross_entropy: label out of range");
    double mx = lv[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lv[i * k + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(lv[i * k + j] - lse);
    total += lse - lv[i * k + labels[i]];
  }
  return logits.tape().record(
      Tensor::scalar(total / static_cast<double>(b)), {logits},
      [probs = std::move(probs), labels, b, k](BackwardContext& c) {
        if (Tensor* g = c.grad_in(0)) {
          const double go = c.grad_out()[0] / static_cast<double>(b);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < k; ++j)
              (*g)[i * k + j] += go * (probs[i * k + j] - (j == labels[i] ? 1.0 : 0.0));
        }
      });
}

/// 2-D convolution. x [B,C,H,W], w [O,C,K,K], bias [O]; zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride,
                  std::size_t pad) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t bsz = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t oc = w.dim(0), ks = w.dim(2);
  if (w.dim(1) != ch || w.dim(3) != ks)
    throw ShapeError("conv2d: weight " + shape_string(w.shape()) + " for input " +
                     shape_string(x.shape()));
  if (bias.value().size() != oc) throw ShapeError("conv2d: bias size mismatch");
  const std::size_t oh = (h + 2 * pad - ks) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - ks) / stride + 1;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  Tensor y(Shape{bsz, oc, oh, ow});
  const auto in_at = [&](std::size_t n, std::size_t c) { return &xv[(n * ch + c) * h * wd]; };
  for (std::size_t n = 0; n < bsz; ++n)
    for (std::size_t o = 0; o < oc; ++o) {
      double* yo = &y[(n * oc + o) * oh * ow];
      for (std::size_t i = 0; i < oh * ow; ++i) yo[i] = bv[o];
      for (std::size_t c = 0; c < ch; ++c) {
        const double* xc = in_at(n, c);
        const double* wk = &wv[(o * ch + c) * ks * ks];
        for (std::size_t ki = 0; ki < ks; ++ki)
          for (std::size_t kj = 0; kj < ks; ++kj) {
            const double wgt = wk[ki * ks + kj];
            for (std::size_t r = 0; r < oh; ++r) {
              const long ir = static_cast<long>(r * stride + ki) - static_cast<long>(pad);
              if (ir < 0 || ir >= static_cast<long>(h)) continue;
              const double* xrow = xc + ir * wd;
              double* yrow = yo + r * ow;
              for (std::size_t q = 0; q < ow; ++q) {
                const long iq = static_cast<long>(q * stride + kj) - static_cast<long>(pad);
                if (iq < 0 || iq >= static_cast<long>(wd)) continue;
                yrow[q] += wgt * xrow[iq];
              }
            }
          }
      }
    }
  return x.tape().record(std::move(y), {x, w, bias},
                         [bsz, ch, h, wd, oc, ks, oh, ow, stride, pad](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    const Tensor& xv = c.input(0);
    const Tensor& wv = c.input(1);
    Tensor* gx = c.grad_in(0);
    Tensor* gw = c.grad_in(1);
    Tensor* gb = c.grad_in(2);
    for (std::size_t n = 0; n < bsz; ++n)
      for (std::size_t o = 0; o < oc; ++o) {
        const double* g = &go[(n * oc + o) * oh * ow];
        if (gb)
          for (std::size_t i = 0; i < oh * ow; ++i) (*gb)[o] += g[i];
        for (std::size_t ch_i = 0; ch_i < ch; ++ch_i) {
          const std::size_t xoff = (n * ch + ch_i) * h * wd;
          const std::size_t woff = (o * ch + ch_i) * ks * ks;
          for (std::size_t ki = 0; ki < ks; ++ki)
            for (std::size_t kj = 0; kj < ks; ++kj) {
              const double wgt = wv[woff + ki * ks + kj];
              double wacc = 0.0;
              for (std::size_t r = 0; r < oh; ++r) {
                const long ir = static_cast<long>(r * stride + ki) - static_cast<long>(pad);
                if (ir < 0 || ir >= static_cast<long>(h)) continue;
                for (std::size_t q = 0; q < ow; ++q) {
                  const long iq = static_cast<long>(q * stride + kj) - static_cast<long>(pad);
                  if (iq < 0 || iq >= static_cast<long>(wd)) continue;
                  const double gv = g[r * ow + q];
                  const std::size_t xi = xoff + static_cast<std::size_t>(ir) * wd +
                                         static_cast<std::size_t>(iq);
                  wacc += gv * xv[xi];
                  if (gx) (*gx)[xi] += gv * wgt;
                }
              }
              if (gw) (*gw)[woff + ki * ks + kj] += wacc;
            }
        }
      }
  });
}

/// Matrix inverse of a square [N,N] value.
inline Var matrix_inverse(const Var& m) {
  detail::require_rank(m, 2, "matrix_inverse");
  Tensor inv = linalg::inverse(m.value());
  return m.tape().record(std::move(inv), {m}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      // d(inv) = -inv dM inv  =>  dL/dM = -inv^T G inv^T
      const Tensor inv_t = linalg::transpose(c.out());
      *g -= linalg::matmul(linalg::matmul(inv_t, c.grad_out()), inv_t);
    }
  });
}

/// log|det M| as a scalar.
inline Var log_abs_det(const Var& m) {
  detail::require_rank(m, 2, "log_abs_det");
  const auto [lad, sign] = linalg::log_abs_det(m.value());
  if (sign == 0) throw std::domain_error("log_abs_det of singular matrix");
  return m.tape().record(Tensor::scalar(lad), {m}, [](BackwardContext& c) {
    if (Tensor* g = c.grad_in(0)) {
      const Tensor inv_t = linalg::transpose(linalg::inverse(c.input(0)));
      *g += inv_t * c.grad_out()[0];
    }
  });
}

}  // namespace curvedit::ops

namespace curvedit::ops {

/// base + sum_j coef[j] * terms[j], recorded as one node. Zero coefficients are skipped.
inline Var lincomb(const Var& base, std::span<const double> coef, std::span<const Var> terms) {
  if (coef.size() != terms.size()) throw ShapeError("lincomb: coefficient count mismatch");
  Tensor y = base.value();
  std::vector<Var> inputs{base};
  std::vector<double> used;
  for (std::size_t j = 0; j < terms.size(); ++j) {
    if (coef[j] == 0.0) continue;
    detail::require_same(base, terms[j], "lincomb");
    const Tensor& tv = terms[j].value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += coef[j] * tv[i];
    inputs.push_back(terms[j]);
    used.push_back(coef[j]);
  }
  return base.tape().record(std::move(y), std::move(inputs),
                            [used = std::move(used)](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (Tensor* g = c.grad_in(0)) *g += go;
    for (std::size_t j = 0; j < used.size(); ++j)
      if (Tensor* g = c.grad_in(j + 1))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += used[j] * go[i];
  });
}

}  // namespace curvedit::ops
