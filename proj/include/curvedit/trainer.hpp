#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "curvedit/editor.hpp"
#include "curvedit/optimizer.hpp"
#include "curvedit/reconstructor.hpp"
#include "curvedit/world.hpp"

namespace curvedit {

struct TrainConfig {
  double lambda = 0.25;
  double alpha = 1.0;
  double learning_rate = 1e-4;
  std::size_t batch = 32;
  std::size_t iterations = 20000;
  std::size_t edit_dims = 8;  // N'
  double eps_bound = 6.0;
  double eps_floor = 0.1;
  std::uint64_t seed = 7;  // latent, index and amount sampling
  std::size_t hutchinson_probes = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t log_every = 0;

  void validate(std::size_t latent_dim) const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (batch == 0) throw std::invalid_argument("batch must be >= 1");
    if (edit_dims == 0 || edit_dims > latent_dim)
      throw std::invalid_argument("edit_dims must be in [1, N]");
    if (!(eps_floor >= 0.0 && eps_floor < eps_bound))
      throw std::invalid_argument("eps_floor must be in [0, eps_bound)");
  }
};

struct LossBreakdown {
  double cls = 0.0;
  double reg = 0.0;
  double nl = 0.0;
  double total = 0.0;
};

struct LossRecord {
  std::size_t iteration;
  LossBreakdown loss;
};

/// Small change amounts are rounded away from zero: sign(e) * max(|e|, floor).
inline double round_up_amount(double raw, double floor) {
  const double sign = raw < 0.0 ? -1.0 : 1.0;
  return sign * std::max(std::abs(raw), floor);
}

struct SampledEdit {
  std::size_t k;
  double eps;
};

/// k uniform on [0, N'); eps' uniform on [-bound, bound], then rounded up.
inline SampledEdit sample_edit(Rng& rng, std::size_t edit_dims, double bound, double floor) {
  std::uniform_int_distribution<std::size_t> pick(0, edit_dims - 1);
  std::uniform_real_distribution<double> amount(-bound, bound);
  const std::size_t k = pick(rng);
  return {k, round_up_amount(amount(rng), floor)};
}

/// One minibatch of the training objective.
struct Batch {
  Tensor z;  // [B, N]
  std::vector<std::size_t> k;
  std::vector<double> eps;
};

inline Batch sample_batch(Rng& rng, std::size_t batch, std::size_t dim, const TrainConfig& cfg) {
  Batch out{normal_tensor(rng, {batch, dim}), {}, {}};
  for (std::size_t i = 0; i < batch; ++i) {
    const SampledEdit e = sample_edit(rng, cfg.edit_dims, cfg.eps_bound, cfg.eps_floor);
    out.k.push_back(e.k);
    out.eps.push_back(e.eps);
  }
  return out;
}

struct ObjectiveTerms {
  Var cls, reg, nl, total;

  LossBreakdown values() const {
    return {cls.value().item(), reg.value().item(), nl.value().item(), total.value().item()};
  }
};

/// The joint objective on a tape: edit z along f's coordinate k by eps,
/// render both images, reconstruct (k, eps) and add the log-det penalty.
///   total = L_cls + lambda * L_reg + alpha * L_nl
inline ObjectiveTerms objective(Tape& tape, const SyntheticWorld& world, const FlowModel& flow,
                                const Bound& flow_b, const Reconstructor& recon,
                                const Bound& recon_b, const Bound& warp_b, const Batch& batch,
                                const TrainConfig& cfg, Rng* probe_rng = nullptr) {
  const std::size_t bsz = batch.z.dim(0);
  LogdetOptions lo;
  lo.hutchinson_probes = cfg.hutchinson_probes;
  lo.rng = probe_rng;
  Var z = tape.constant(batch.z);
  TapeEdit e = decurved_edit_on_tape(flow, flow_b, z, batch.k, batch.eps, lo);
  Var x = tape.constant(world.generate(batch.z));
  Var x2 = world.generate(warp_b, e.edited);
  Reconstructor::Output r = recon.forward(recon_b, x, x2);

  ObjectiveTerms t;
  t.cls = ops::cross_entropy(r.logits, batch.k);
  t.reg = ops::mean(ops::abs(ops::sub(r.amount, tape.constant(Tensor(Shape{bsz}, batch.eps)))));
  t.nl = ops::mean(ops::square(e.logdet));
  t.total = ops::lincomb(t.cls, std::vector<double>{cfg.lambda, cfg.alpha},
                         std::vector<Var>{t.reg, t.nl});
  return t;
}

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::size_t iteration)
      : std::runtime_error(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Joint training of f and R with one Adam optimizer over both parameter sets.
class Trainer {
 public:
  using Callback = std::function<void(std::size_t iteration, const LossBreakdown&)>;

  Trainer(const SyntheticWorld& world, FlowModel& flow, Reconstructor& recon, TrainConfig config)
      : world_(world), flow_(flow), recon_(recon), config_(config),
        optimizer_(AdamConfig{config.learning_rate, 0.9, 0.999, 1e-8}), rng_(config.seed),
        probe_rng_(config.seed ^ 0x9e3779b97f4a7c15ULL) {
    config_.validate(world.dim());
    if (flow.dim() != world.dim()) throw std::invalid_argument("flow and world dimensions differ");
    if (recon.config().attributes != config_.edit_dims)
      throw std::invalid_argument("reconstructor head size must equal edit_dims");
  }

  const TrainConfig& config() const noexcept { return config_; }
  std::size_t iteration() const noexcept { return iteration_; }
  const std::vector<LossRecord>& history() const noexcept { return history_; }
  const Adam& optimizer() const noexcept { return optimizer_; }

  /// One optimizer step. Throws TrainingAborted (parameters untouched) on a
  /// non-finite loss or gradient.
  LossBreakdown step() {
    const Batch batch = sample_batch(rng_, config_.batch, world_.dim(), config_);
    Tape tape;
    const Bound fb = flow_.bind(tape, true);
    const Bound rb = recon_.bind(tape, true);
    const Bound wb = world_.bind_warp(tape);
    ObjectiveTerms terms = objective(tape, world_, flow_, fb, recon_, rb, wb, batch, config_, &probe_rng_);
    const LossBreakdown lb = terms.values();
    if (!std::isfinite(lb.total))
      throw TrainingAborted("non-finite loss at iteration " + std::to_string(iteration_ + 1),
                            iteration_ + 1);

    std::vector<Var> params = fb.vars();
    params.insert(params.end(), rb.vars().begin(), rb.vars().end());
    const auto grads = tape.gradients(terms.total, params);
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (grads[i] && !grads[i]->all_finite())
        throw TrainingAborted("non-finite gradient at iteration " + std::to_string(iteration_ + 1),
                              iteration_ + 1);

    std::vector<ParamSlot> slots;
    slots.reserve(params.size());
    ParamStore& fp = flow_.params();
    ParamStore& rp = recon_.params();
    for (std::size_t i = 0; i < fp.size(); ++i) slots.push_back({&fp.name(i), &fp.value(i), &grads[i]});
    for (std::size_t i = 0; i < rp.size(); ++i)
      slots.push_back({&rp.name(i), &rp.value(i), &grads[fp.size() + i]});
    optimizer_.step(slots);
    ++iteration_;
    history_.push_back({iteration_, lb});
    return lb;
  }

  /// Runs `iterations` steps. `on_checkpoint` fires every checkpoint_every
  /// iterations and at the end; on abort the last healthy state stays on disk.
  void run(std::size_t iterations, const Callback& on_step = {},
           const std::function<void(std::size_t)>& on_checkpoint = {}) {
    for (std::size_t i = 0; i < iterations; ++i) {
      const LossBreakdown lb = step();
      if (on_step) on_step(iteration_, lb);
      if (on_checkpoint && config_.checkpoint_every && iteration_ % config_.checkpoint_every == 0)
        on_checkpoint(iteration_);
    }
    if (on_checkpoint && (!config_.checkpoint_every || iteration_ % config_.checkpoint_every != 0))
      on_checkpoint(iteration_);
  }

 private:
  const SyntheticWorld& world_;
  FlowModel& flow_;
  Reconstructor& recon_;
  TrainConfig config_;
  Adam optimizer_;
  Rng rng_;
  Rng probe_rng_;
  std::size_t iteration_ = 0;
  std::vector<LossRecord> history_;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "iteration,L_cls,L_reg,L_nl,total\n";
  char buf[160];
  for (const LossRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.loss.cls,
                  r.loss.reg, r.loss.nl, r.loss.total);
    f << buf;
  }
}

struct HeldOutReport {
  double k_accuracy = 0.0;
  double amount_mae = 0.0;
  std::size_t pairs = 0;
};

/// Reconstructor accuracy on freshly sampled pairs edited through `flow`.
inline HeldOutReport evaluate_reconstructor(const SyntheticWorld& world, const FlowModel& flow,
                                            const Reconstructor& recon, const TrainConfig& cfg,
                                            std::size_t pairs, std::uint64_t seed) {
  Rng rng(seed);
  HeldOutReport rep;
  const std::size_t chunk = 100;
  std::size_t correct = 0;
  double abs_err = 0.0;
  for (std::size_t done = 0; done < pairs; done += chunk) {
    const std::size_t b = std::min(chunk, pairs - done);
    const Batch batch = sample_batch(rng, b, world.dim(), cfg);
    Tensor v = flow.forward_values(batch.z);
    const std::size_t n = world.dim();
    for (std::size_t i = 0; i < b; ++i) v[i * n + batch.k[i]] += batch.eps[i];
    const Tensor z2 = flow.inverse_values(v);
    const auto [logits, amount] = recon.predict(world.generate(batch.z), world.generate(z2));
    const std::size_t kk = logits.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      const double* row = &logits[i * kk];
      const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + kk) - row);
      correct += arg == batch.k[i];
      abs_err += std::abs(amount[i] - batch.eps[i]);
    }
  }
  rep.pairs = pairs;
  rep.k_accuracy = static_cast<double>(correct) / static_cast<double>(pairs);
  rep.amount_mae = abs_err / static_cast<double>(pairs);
  return rep;
}

}  // namespace curvedit
