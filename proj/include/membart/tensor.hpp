#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "membart/common.hpp"

namespace membart {

template <typename T>
class Tape;

template <typename T>
struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<T> data;
  // Accumulated leaf gradient; empty until the first backward touches it.
  std::vector<T> grad;
  bool requires_grad = false;
  // Registration on a tape (valid only while tape_id matches the live tape).
  uint64_t tape_id = 0;
  int node = -1;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// Shared handle to a dense row-major array. Copying a Tensor copies the
// handle, not the storage; detach() makes an independent copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), T(0));
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("from_data: " + std::to_string(data.size()) + " elements for shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from_data({}, {v}); }

  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.impl_->data) x = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i >= 0 ? i : rank() + i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<T>& raw() { return impl_->data; }
  const std::vector<T>& raw() const { return impl_->data; }
  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor with " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  Tensor& set_requires_grad(bool b = true) {
    impl_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  // Copy of the accumulated leaf gradient (zeros if backward never reached it).
  Tensor grad() const {
    Tensor g(impl_->shape);
    if (!impl_->grad.empty()) g.impl_->data = impl_->grad;
    return g;
  }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void zero_grad() {
    if (impl_) impl_->grad.clear();
  }

  // Value copy with no graph membership. Gradient does not flow past this.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  Tensor clone_shape() const { return Tensor(impl_->shape); }

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (T x : impl_->data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<size_t>(a.numel())) == 0;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace membart
