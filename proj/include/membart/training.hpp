#pragma once

#include <chrono>

#include "membart/data.hpp"
#include "membart/model.hpp"

namespace membart {

// Horizon-length window of consecutive timesteps plus the memory entering it.
template <typename T>
struct Rollout {
  std::vector<StepBatch> steps;
  MemoryState<T> initial_memory;  // plain (off-tape) slots

  void validate(const ModelConfig& cfg) const {
    if (steps.empty()) throw UsageError("rollout must contain at least one step");
    if (initial_memory.slots.rank() != 3 || initial_memory.slots.dim(0) != steps[0].lanes() ||
        initial_memory.slots.dim(1) != cfg.memory_size || initial_memory.slots.dim(2) != cfg.hidden_size)
      throw UsageError("rollout memory is inconsistent with the batch/model shapes");
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int64_t warmup_steps = 100;
  double weight_decay = 0.01;
  double dropout = 0.0;
  int64_t horizon = 2;
  int64_t batch_size = 8;
  int64_t max_steps = 2000;
  uint64_t seed = 0;
  double clip_norm = 1.0;

  void validate() const {
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (warmup_steps < 0) throw ConfigError("warmup must be >= 0");
    if (batch_size < 1 || max_steps < 0) throw ConfigError("bad batch_size/max_steps");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
  }
};

struct StepDiagnostics {
  int64_t step = 0;
  double loss = 0.0;              // nats per active target token over the rollout
  double memory_grad_norm = 0.0;  // L2 of the gradient seeded into the oldest replayed step
  double gate_mean = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  size_t peak_tape_nodes = 0;
  bool finite = true;
};

namespace detail {

template <typename T>
std::vector<T> to_weights(const std::vector<float>& w) {
  std::vector<T> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) out[i] = static_cast<T>(w[i]);
  return out;
}

template <typename T>
double rollout_total_weight(const Rollout<T>& rollout) {
  double w = 0;
  for (const StepBatch& s : rollout.steps) w += s.total_weight();
  return w;
}

template <typename T>
double mean_value(const Tensor<T>& t) {
  if (!t.defined() || t.numel() == 0) return 0.0;
  double acc = 0;
  for (int64_t i = 0; i < t.numel(); ++i) acc += static_cast<double>(t.data()[i]);
  return acc / static_cast<double>(t.numel());
}

}  // namespace detail

template <typename T>
struct MrbpResult {
  MemoryState<T> final_memory;  // memory after the newest step, detached
  StepDiagnostics diag;
};

// Memory-replay back-propagation: forward over the rollout without gradient
// recording, storing only the memory snapshots; then walk the steps newest to
// oldest, recomputing each one on a fresh tape and backpropagating its loss
// together with the seeded memory gradient from the younger step. Parameter
// gradients accumulate exactly as full unrolled BPTT while the live tape
// never holds more than one step.
template <typename T>
MrbpResult<T> mrbp_step(Model<T>& model, const Rollout<T>& rollout, double dropout = 0.0, uint64_t noise_seed = 0) {
  rollout.validate(model.config());
  int64_t horizon = static_cast<int64_t>(rollout.steps.size());
  double denom = std::max(detail::rollout_total_weight(rollout), 1.0);
  bool stateful = model.config().stateful();

  auto step_options = [&](int64_t i, std::mt19937_64& rng) {
    ForwardOptions fo;
    if (dropout > 0.0) {
      rng.seed(seed_for(noise_seed, static_cast<uint64_t>(i)));
      fo.train = true;
      fo.dropout = dropout;
      fo.rng = &rng;
    }
    return fo;
  };

  // Forward pass, no gradient: replay list of memories entering each step.
  std::vector<Tensor<T>> replay;
  replay.reserve(static_cast<size_t>(horizon));
  replay.push_back(rollout.initial_memory.slots.detach());
  Tensor<T> final_slots = rollout.initial_memory.slots.detach();
  for (int64_t i = 0; i < horizon; ++i) {
    const StepBatch& sb = rollout.steps[static_cast<size_t>(i)];
    std::mt19937_64 rng;
    auto fo = step_options(i, rng);
    MemoryState<T> mem{replay.back(), rollout.initial_memory.timestep + i};
    auto enc = model.encode(sb.src, mem, sb.reset, sb.src_valid, fo);
    final_slots = stateful ? enc.next_memory.slots.detach() : replay.back();
    if (i + 1 < horizon) replay.push_back(final_slots);
  }

  MrbpResult<T> result;
  result.final_memory = MemoryState<T>{final_slots, rollout.initial_memory.timestep + horizon};

  // Backward pass with recomputation, newest step first.
  Tensor<T> grad_mem(rollout.initial_memory.slots.shape());  // zeros: nothing younger than the newest step
  double loss_acc = 0.0;
  double gate_acc = 0.0;
  int64_t gate_steps = 0;
  size_t peak_nodes = 0;
  bool finite = true;
  for (int64_t i = horizon - 1; i >= 0; --i) {
    const StepBatch& sb = rollout.steps[static_cast<size_t>(i)];
    Tensor<T> leaf = replay.back().detach().set_requires_grad();
    replay.pop_back();

    Tape<T> tape;
    {
      TapeScope<T> scope(tape);
      std::mt19937_64 rng;
      auto fo = step_options(i, rng);
      auto out = model.seq2seq_forward(sb.src, sb.dec_input, MemoryState<T>{leaf, rollout.initial_memory.timestep + i},
                                       sb.reset, sb.src_valid, fo);
      auto ce = cross_entropy_sum(out.logits, sb.labels, detail::to_weights<T>(sb.label_weight));
      auto loss = mul_scalar(ce, static_cast<T>(1.0 / denom));
      double lv = static_cast<double>(loss.item());
      loss_acc += lv;
      if (!std::isfinite(lv)) finite = false;
      if (out.gate_values.defined()) {
        gate_acc += detail::mean_value(out.gate_values);
        ++gate_steps;
      }
      std::vector<GradSeed<T>> seeds{GradSeed<T>{loss, Tensor<T>::scalar(T(1))}};
      if (stateful) seeds.push_back(GradSeed<T>{out.next_memory.slots, grad_mem});
      tape.backward_seeded(seeds);
    }
    peak_nodes = std::max(peak_nodes, tape.node_count());
    if (i == 0) {
      // seed that entered the oldest replayed step
      double norm = 0;
      for (int64_t j = 0; j < grad_mem.numel(); ++j)
        norm += static_cast<double>(grad_mem.data()[j]) * static_cast<double>(grad_mem.data()[j]);
      result.diag.memory_grad_norm = std::sqrt(norm);
    }
    grad_mem = stateful ? leaf.grad() : grad_mem;
  }

  result.diag.loss = loss_acc;
  result.diag.gate_mean = gate_steps ? gate_acc / static_cast<double>(gate_steps) : 0.0;
  result.diag.peak_tape_nodes = peak_nodes;
  result.diag.finite = finite;
  return result;
}

// Oracle: one tape across the whole horizon, single backward call.
template <typename T>
struct BpttResult {
  MemoryState<T> final_memory;
  double loss = 0.0;
  size_t tape_nodes = 0;
};

template <typename T>
BpttResult<T> unrolled_bptt_step(Model<T>& model, const Rollout<T>& rollout, double dropout = 0.0,
                                 uint64_t noise_seed = 0) {
  rollout.validate(model.config());
  int64_t horizon = static_cast<int64_t>(rollout.steps.size());
  double denom = std::max(detail::rollout_total_weight(rollout), 1.0);
  BpttResult<T> result;

  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> mem_slots = rollout.initial_memory.slots.detach();
    Tensor<T> total;
    for (int64_t i = 0; i < horizon; ++i) {
      const StepBatch& sb = rollout.steps[static_cast<size_t>(i)];
      std::mt19937_64 rng;
      ForwardOptions fo;
      if (dropout > 0.0) {
        rng.seed(seed_for(noise_seed, static_cast<uint64_t>(i)));
        fo.train = true;
        fo.dropout = dropout;
        fo.rng = &rng;
      }
      auto out = model.seq2seq_forward(sb.src, sb.dec_input, MemoryState<T>{mem_slots, 0}, sb.reset, sb.src_valid, fo);
      auto loss = mul_scalar(cross_entropy_sum(out.logits, sb.labels, detail::to_weights<T>(sb.label_weight)),
                             static_cast<T>(1.0 / denom));
      total = total.defined() ? add(total, loss) : loss;
      mem_slots = out.next_memory.slots;  // stays on the tape: gradient flows across steps
    }
    result.loss = static_cast<double>(total.item());
    tape.backward(total);
    result.final_memory = MemoryState<T>{mem_slots.detach(), rollout.initial_memory.timestep + horizon};
  }
  result.tape_nodes = tape.node_count();
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Linear warm-up to the base rate, then inverse-square-root decay.
inline double lr_schedule(double base, int64_t warmup, int64_t step) {
  double w = static_cast<double>(std::max<int64_t>(warmup, 1));
  double s = static_cast<double>(std::max<int64_t>(step, 1));
  return base * std::min(s / w, std::sqrt(w / s));
}

// Returns the global gradient norm; scales gradients in place when it
// exceeds max_norm.
template <typename T>
double clip_global_norm(ParamSet<T>& params, double max_norm) {
  double sq = 0;
  for (auto& [name, p] : params.items()) {
    if (!p.has_grad()) continue;
    auto& g = p.impl_->grad;
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params.items()) {
      if (!p.has_grad()) continue;
      for (T& v : p.impl_->grad) v *= scale;
    }
  }
  return norm;
}

// Decoupled-weight-decay adaptive moment estimation.
template <typename T>
class AdamW {
 public:
  AdamW(double base_lr, int64_t warmup, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : base_lr_(base_lr), warmup_(warmup), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update using the gradients accumulated in `params`.
  // step_index is 1-based and drives the schedule. A non-finite gradient
  // anywhere skips the whole update (counted, parameters untouched).
  double update(ParamSet<T>& params, int64_t step_index) {
    double lr = lr_schedule(base_lr_, warmup_, step_index);
    for (auto& [name, p] : params.items()) {
      if (!p.has_grad()) continue;
      for (T v : p.impl_->grad)
        if (!std::isfinite(static_cast<double>(v))) {
          ++skipped_;
          return lr;
        }
    }
    ++updates_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(updates_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(updates_));
    for (auto& [name, p] : params.items()) {
      auto& slot = moments_[name];
      if (!slot.m.defined()) {
        slot.m = Tensor<T>(p.shape());
        slot.v = Tensor<T>(p.shape());
      }
      const std::vector<T>* g = p.has_grad() ? &p.impl_->grad : nullptr;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double gi = g ? static_cast<double>((*g)[static_cast<size_t>(i)]) : 0.0;
        double m = beta1_ * static_cast<double>(slot.m.data()[i]) + (1.0 - beta1_) * gi;
        double v = beta2_ * static_cast<double>(slot.v.data()[i]) + (1.0 - beta2_) * gi * gi;
        slot.m.data()[i] = static_cast<T>(m);
        slot.v.data()[i] = static_cast<T>(v);
        double step = (m / bc1) / (std::sqrt(v / bc2) + eps_) + weight_decay_ * static_cast<double>(p.data()[i]);
        p.data()[i] = static_cast<T>(static_cast<double>(p.data()[i]) - lr * step);
      }
    }
    return lr;
  }

  int64_t skipped() const { return skipped_; }
  int64_t updates() const { return updates_; }

  struct Moments {
    Tensor<T> m, v;
  };
  std::unordered_map<std::string, Moments>& moments() { return moments_; }
  void set_updates(int64_t u) { updates_ = u; }

 private:
  double base_lr_;
  int64_t warmup_;
  double weight_decay_, beta1_, beta2_, eps_;
  int64_t updates_ = 0;
  int64_t skipped_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace membart
