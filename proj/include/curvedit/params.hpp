#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "curvedit/tape.hpp"

namespace curvedit {

using Rng = std::mt19937_64;

/// Ordered, named collection of parameter tensors owned by a model.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  Tensor& value(std::size_t i) { return values_.at(i); }
  const Tensor& value(std::size_t i) const { return values_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.size();
    return n;
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// ParamStore values recorded on a tape, indexed like the store.
class Bound {
 public:
  Bound() = default;
  explicit Bound(std::vector<Var> vars) : vars_(std::move(vars)) {}
  const Var& operator[](std::size_t i) const { return vars_.at(i); }
  std::size_t size() const noexcept { return vars_.size(); }
  const std::vector<Var>& vars() const noexcept { return vars_; }

 private:
  std::vector<Var> vars_;
};

inline Bound bind(Tape& tape, const ParamStore& store, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i)
    vars.push_back(tape.leaf(store.value(i), trainable));
  return Bound(std::move(vars));
}

/// Uniform in ±sqrt(6/(fan_in+fan_out)).
inline Tensor glorot_uniform(Rng& rng, std::size_t fan_out, std::size_t fan_in) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(Shape{fan_out, fan_in});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor uniform_tensor(Rng& rng, Shape shape, double limit) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace curvedit
