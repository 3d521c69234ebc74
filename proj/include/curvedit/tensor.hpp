#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace curvedit {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1)
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Row `r` of a rank-2 tensor as a 1-D tensor.
  Tensor row(std::size_t r) const {
    const std::size_t cols = shape_.at(1);
    return Tensor::vector(std::vector<double>(data_.begin() + r * cols,
                                              data_.begin() + (r + 1) * cols));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool has_nan() const noexcept {
    return std::any_of(data_.begin(), data_.end(),
                       [](double v) { return std::isnan(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void check_same(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string("shape mismatch in ") + what + ": " +
                       shape_string(shape_) + " vs " + shape_string(o.shape_));
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.check_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l2_norm(const Tensor& t) { return l2_norm(t.data()); }

namespace linalg {

// LU decomposition with partial pivoting; returns false if singular.
inline bool lu_decompose(std::vector<double>& a, std::size_t n,
                         std::vector<std::size_t>& perm, int& sign) {
  perm.resize(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  sign = 1;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(a[k * n + k]);
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i * n + k]) > best) {
        best = std::abs(a[i * n + k]);
        piv = i;
      }
    }
    if (best == 0.0) return false;
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[piv * n + j]);
      std::swap(perm[k], perm[piv]);
      sign = -sign;
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      a[i * n + k] /= a[k * n + k];
      const double f = a[i * n + k];
      for (std::size_t j = k + 1; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
    }
  }
  return true;
}

/// log|det A| and sign of det A for a square matrix.
inline std::pair<double, int> log_abs_det(const Tensor& m) {
  const std::size_t n = m.dim(0);
  if (m.rank() != 2 || m.dim(1) != n) throw ShapeError("log_abs_det needs a square matrix");
  std::vector<double> a = m.storage();
  std::vector<std::size_t> perm;
  int sign = 1;
  if (!lu_decompose(a, n, perm, sign)) return {-std::numeric_limits<double>::infinity(), 0};
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i * n + i];
    if (d < 0) sign = -sign;
    acc += std::log(std::abs(d));
  }
  return {acc, sign};
}

inline Tensor inverse(const Tensor& m) {
  const std::size_t n = m.dim(0);
  if (m.rank() != 2 || m.dim(1) != n) throw ShapeError("inverse needs a square matrix");
  std::vector<double> a = m.storage();
  std::vector<std::size_t> perm;
  int sign = 1;
  if (!lu_decompose(a, n, perm, sign)) throw std::domain_error("matrix is singular");
  Tensor inv(Shape{n, n});
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) col[i] = perm[i] == c ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) col[i] -= a[i * n + j] * col[j];
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t j = ii + 1; j < n; ++j) col[ii] -= a[ii * n + j] * col[j];
      col[ii] /= a[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) inv.at(i, c) = col[i];
  }
  return inv;
}

inline Tensor transpose(const Tensor& m) {
  Tensor t(Shape{m.dim(1), m.dim(0)});
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) t.at(j, i) = m.at(i, j);
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
  return c;
}

inline Tensor identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace linalg
}  // namespace curvedit
