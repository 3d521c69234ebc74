#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "curvedit/checkpoint.hpp"
#include "curvedit/nn.hpp"

namespace curvedit {

struct ReconstructorConfig {
  std::size_t image_side = 32;
  std::size_t attributes = 8;  // N'
  std::array<std::size_t, 3> channels{8, 16, 32};
  std::size_t hidden = 128;
  std::uint64_t seed = 0;
};

/// R(x, x'): three stride-2 3x3 convolutions with relu over the channels
/// (x, x'), one hidden dense layer, then a logit head over the N' indices
/// and a scalar head for the change amount.
class Reconstructor {
 public:
  struct Output {
    Var logits;  // [B, N']
    Var amount;  // [B]
  };

  explicit Reconstructor(ReconstructorConfig config = {}) : config_(config) {
    Rng rng(config.seed);
    std::size_t in_ch = 2, side = config.image_side;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t out_ch = config.channels[s];
      const double limit = std::sqrt(6.0 / static_cast<double>((in_ch + out_ch) * 9));
      ConvSlot c;
      c.w = params_.add("conv" + std::to_string(s) + ".w", uniform_tensor(rng, {out_ch, in_ch, 3, 3}, limit));
      c.b = params_.add("conv" + std::to_string(s) + ".b", Tensor(Shape{out_ch}));
      convs_.push_back(c);
      in_ch = out_ch;
      side = (side + 1) / 2;
    }
    flat_ = in_ch * side * side;
    hidden_ = add_dense(params_, "fc", flat_, config.hidden, rng);
    head_k_ = add_dense(params_, "head_k", config.hidden, config.attributes, rng);
    head_amount_ = add_dense(params_, "head_amount", config.hidden, 1, rng);
  }

  const ReconstructorConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  Bound bind(Tape& tape, bool trainable) const { return curvedit::bind(tape, params_, trainable); }

  /// x, x2: [B, side*side] images.
  Output forward(const Bound& b, const Var& x, const Var& x2) const {
    const std::size_t bsz = x.dim(0), side = config_.image_side;
    if (x.shape() != x2.shape() || x.shape().size() != 2 || x.dim(1) != side * side)
      throw ShapeError("reconstructor: image pair shapes " + shape_string(x.shape()) + " and " +
                       shape_string(x2.shape()) + " for side " + std::to_string(side));
    Var h = ops::reshape(ops::concat_cols(x, x2), {bsz, 2, side, side});
    for (const ConvSlot& c : convs_) h = ops::relu(ops::conv2d(h, b[c.w], b[c.b], 2, 1));
    h = ops::relu(ops::affine(ops::reshape(h, {bsz, flat_}), b[hidden_.w], b[hidden_.b]));
    Var logits = ops::affine(h, b[head_k_.w], b[head_k_.b]);
    Var amount = ops::reshape(ops::affine(h, b[head_amount_.w], b[head_amount_.b]), {bsz});
    return {logits, amount};
  }

  /// Value-level convenience.
  std::pair<Tensor, Tensor> predict(const Tensor& x, const Tensor& x2) const {
    Tape t;
    const Bound b = bind(t, false);
    Output o = forward(b, t.constant(x), t.constant(x2));
    return {o.logits.value(), o.amount.value()};
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.meta["kind"] = "reconstructor";
    c.meta["image_side"] = std::to_string(config_.image_side);
    c.meta["attributes"] = std::to_string(config_.attributes);
    c.meta["channels"] = std::to_string(config_.channels[0]) + "," +
                         std::to_string(config_.channels[1]) + "," +
                         std::to_string(config_.channels[2]);
    c.meta["hidden"] = std::to_string(config_.hidden);
    c.meta["seed"] = std::to_string(config_.seed);
    c.params = params_;
    return c;
  }

  static Reconstructor from_checkpoint(const Checkpoint& c) {
    if (c.require_meta("kind") != "reconstructor")
      throw FormatError("checkpoint is not a reconstructor");
    ReconstructorConfig cfg;
    cfg.image_side = std::stoul(c.require_meta("image_side"));
    cfg.attributes = std::stoul(c.require_meta("attributes"));
    cfg.hidden = std::stoul(c.require_meta("hidden"));
    cfg.seed = std::stoull(c.require_meta("seed"));
    const std::string ch = c.require_meta("channels");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t next = ch.find(',', pos);
      cfg.channels[i] = std::stoul(ch.substr(pos, next - pos));
      pos = next + 1;
    }
    Reconstructor r(cfg);
    if (r.params_.names() != c.params.names())
      throw FormatError("reconstructor checkpoint layout mismatch");
    for (std::size_t i = 0; i < r.params_.size(); ++i) {
      if (r.params_.value(i).shape() != c.params.value(i).shape())
        throw FormatError("reconstructor tensor '" + c.params.name(i) + "' has wrong shape");
      r.params_.value(i) = c.params.value(i);
    }
    return r;
  }

 private:
  struct ConvSlot {
    std::size_t w = 0, b = 0;
  };

  ReconstructorConfig config_;
  ParamStore params_;
  std::vector<ConvSlot> convs_;
  std::size_t flat_ = 0;
  DenseSlot hidden_, head_k_, head_amount_;
};

}  // namespace curvedit
