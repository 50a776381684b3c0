#pragma once

#include <atomic>
#include <functional>
#include <utility>
#include <vector>

#include "membart/tensor.hpp"

namespace membart {

// Seed for backward(): gradient to inject at a recorded tensor.
template <typename T>
struct GradSeed {
  Tensor<T> target;
  Tensor<T> gradient;
};

// Reverse-mode tape. Ops record a backward closure per executed operation;
// backward() walks the record once in reverse execution order. Gradient
// buffers for intermediates live only for the duration of one backward call,
// so repeated backward calls accumulate into leaf tensors without
// double-propagating earlier passes.
template <typename T>
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }

  // Total registered nodes (ops + gradient leaves). The MRBP constant-memory
  // check counts these as the stored-activation proxy.
  size_t node_count() const { return nodes_.size(); }
  size_t op_count() const { return op_count_; }

  bool owns(const Tensor<T>& t) const { return t.defined() && t.impl_->tape_id == id_ && t.impl_->node >= 0; }

  // Registers a tensor as a node (leaf if no backward fn recorded for it).
  int ensure_node(const Tensor<T>& t) {
    if (owns(t)) return t.impl_->node;
    int idx = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{nullptr, t.impl_, false});
    t.impl_->tape_id = id_;
    t.impl_->node = idx;
    return idx;
  }

  // Records an op producing `out`. The closure receives the output node's
  // gradient buffer and distributes contributions via add_grad().
  void record(const Tensor<T>& out, std::function<void(Tape&, const std::vector<T>&)> backward) {
    int idx = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(backward), out.impl_, true});
    out.impl_->tape_id = id_;
    out.impl_->node = idx;
    ++op_count_;
  }

  // Called from backward closures to push gradient toward an input.
  void add_grad(const Tensor<T>& input, const T* g, int64_t n) {
    if (!owns(input)) return;  // constant input, nothing flows
    auto& buf = grads_[static_cast<size_t>(input.impl_->node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(input.numel()), T(0));
    T* dst = buf.data();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
  }

  void add_grad_at(const Tensor<T>& input, int64_t offset, T g) {
    if (!owns(input)) return;
    auto& buf = grads_[static_cast<size_t>(input.impl_->node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(input.numel()), T(0));
    buf[static_cast<size_t>(offset)] += g;
  }

  bool needs_grad(const Tensor<T>& t) const { return t.defined() && (t.requires_grad() || owns(t)); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    backward_seeded(std::vector<GradSeed<T>>{GradSeed<T>{loss, Tensor<T>::full(loss.shape(), T(1))}});
  }

  void backward_seeded(std::initializer_list<GradSeed<T>> seeds) {
    backward_seeded(std::vector<GradSeed<T>>(seeds.begin(), seeds.end()));
  }

  template <typename Seq>
  void backward_seeded(const Seq& seeds) {
    grads_.assign(nodes_.size(), {});
    for (const GradSeed<T>& s : seeds) {
      if (!owns(s.target))
        throw UsageError("backward: seed target is not recorded on this tape");
      if (s.gradient.shape() != s.target.shape())
        throw ShapeError("backward: seed gradient shape " + shape_str(s.gradient.shape()) + " vs target " +
                         shape_str(s.target.shape()));
      add_grad(s.target, s.gradient.data(), s.gradient.numel());
    }
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.is_op) continue;
      const auto& gbuf = grads_[i];
      if (gbuf.empty()) continue;  // nothing reached this op's output
      node.backward(*this, gbuf);
    }
    // Fold leaf gradients into their tensors' persistent accumulators.
    for (size_t i = 0; i < nodes_.size(); ++i) {
      Node& node = nodes_[i];
      if (node.is_op) continue;
      auto impl = node.out.lock();
      if (!impl || !impl->requires_grad) continue;
      const auto& gbuf = grads_[i];
      if (gbuf.empty()) continue;
      if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
      for (size_t j = 0; j < gbuf.size(); ++j) impl->grad[j] += gbuf[j];
    }
    grads_.clear();
  }

 private:
  struct Node {
    std::function<void(Tape&, const std::vector<T>&)> backward;
    std::weak_ptr<TensorImpl<T>> out;
    bool is_op;
  };

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;  // per-node scratch, alive during backward
  size_t op_count_ = 0;
};

template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* active_tape() {
  return active_tape_slot<T>();
}

// RAII: installs a tape as the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape_slot<T>()) { active_tape_slot<T>() = &tape; }
  ~TapeScope() { active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace membart
