#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "membart/tensor.hpp"

namespace membart {

enum class ParamInit { normal, zeros, ones };

// Ordered registry of named trainable tensors. Each parameter is initialized
// from its own RNG stream seeded by (base seed, name), so two models built
// with the same seed agree on every parameter they share by name, regardless
// of what other parameters either of them registers.
template <typename T>
class ParamSet {
 public:
  explicit ParamSet(uint64_t seed_base = 0) : seed_base_(seed_base) {}

  Tensor<T> add(const std::string& name, std::vector<int64_t> shape, ParamInit init, double stddev = 0.02) {
    if (index_.count(name)) throw UsageError("parameter registered twice: " + name);
    Tensor<T> t(shape);
    switch (init) {
      case ParamInit::zeros:
        break;
      case ParamInit::ones:
        std::fill(t.raw().begin(), t.raw().end(), T(1));
        break;
      case ParamInit::normal: {
        std::mt19937_64 rng(seed_for(seed_base_, name));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& x : t.raw()) x = static_cast<T>(dist(rng));
        break;
      }
    }
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  uint64_t seed_base_;
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace membart
