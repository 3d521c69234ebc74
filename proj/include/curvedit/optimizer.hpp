#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvedit/tensor.hpp"

namespace curvedit {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One parameter as seen by the optimizer.
struct ParamSlot {
  const std::string* name;
  Tensor* value;
  const std::optional<Tensor>* grad;
};

/// Adam moment state. Moment buffers are created on the first step and keyed
/// by slot position, so the slot order must stay fixed across steps.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

  void step(std::span<const ParamSlot> slots) {
    if (m_.empty()) {
      for (const ParamSlot& s : slots) {
        m_.emplace_back(s.value->shape());
        v_.emplace_back(s.value->shape());
      }
    }
    if (m_.size() != slots.size())
      throw std::invalid_argument("optimizer: parameter count changed between steps");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const ParamSlot& s = slots[i];
      if (m_[i].shape() != s.value->shape())
        throw ShapeError("optimizer: moment shape mismatch for parameter '" + *s.name + "'");
      if (s.grad->has_value() && (*s.grad)->shape() != s.value->shape())
        throw ShapeError("optimizer: gradient shape " + shape_string((*s.grad)->shape()) +
                         " does not match parameter '" + *s.name + "' of shape " +
                         shape_string(s.value->shape()));
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (!slots[i].grad->has_value()) continue;
      const Tensor& g = **slots[i].grad;
      Tensor& p = *slots[i].value;
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t step_ = 0;
};

}  // namespace curvedit
