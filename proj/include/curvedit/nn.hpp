#pragma once

#include <span>
#include <string>
#include <vector>

#include "curvedit/ops.hpp"
#include "curvedit/params.hpp"

namespace curvedit {

enum class Activation { tanh, relu, none };

inline Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::tanh: return ops::tanh(x);
    case Activation::relu: return ops::relu(x);
    case Activation::none: return x;
  }
  return x;
}

/// One affine layer as recorded on a tape: W [out,in], b [out].
struct DenseVars {
  Var w;
  Var b;
};

/// Parameter indices of one affine layer inside a ParamStore.
struct DenseSlot {
  std::size_t w = 0;
  std::size_t b = 0;

  DenseVars on(const Bound& bound) const { return {bound[w], bound[b]}; }
};

inline DenseSlot add_dense(ParamStore& store, const std::string& prefix, std::size_t in,
                           std::size_t out, Rng& rng, double weight_scale = 1.0) {
  Tensor w = glorot_uniform(rng, out, in);
  w *= weight_scale;
  DenseSlot slot;
  slot.w = store.add(prefix + ".w", std::move(w));
  slot.b = store.add(prefix + ".b", Tensor(Shape{out}));
  return slot;
}

/// Affine-then-activation composition. `hidden` follows every layer but the
/// last; `output` follows the last.
inline Var mlp_forward(std::span<const DenseVars> layers, Var x, Activation hidden,
                       Activation output = Activation::none) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::size_t in = x.shape().size() == 2 ? x.dim(1) : 0;
    if (layers[i].w.shape().size() != 2 || layers[i].w.dim(1) != in)
      throw ShapeError("mlp layer " + std::to_string(i) + ": expects input width " +
                       (layers[i].w.shape().size() == 2 ? std::to_string(layers[i].w.dim(1))
                                                        : std::string("?")) +
                       ", got " + shape_string(x.shape()));
    x = ops::affine(x, layers[i].w, layers[i].b);
    x = activate(x, i + 1 == layers.size() ? output : hidden);
  }
  return x;
}

inline std::vector<DenseVars> bind_layers(std::span<const DenseSlot> slots, const Bound& bound) {
  std::vector<DenseVars> out;
  out.reserve(slots.size());
  for (const DenseSlot& s : slots) out.push_back(s.on(bound));
  return out;
}

}  // namespace curvedit
