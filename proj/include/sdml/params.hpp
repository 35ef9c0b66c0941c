#pragma once

#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdml/errors.hpp"
#include "sdml/rng.hpp"
#include "sdml/tensor.hpp"

namespace sdml {

// Ordered registry of named trainable tensors. Names are unique; the
// registration order is the optimizer/checkpoint iteration order.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(bool trainable = true) : trainable_(trainable) {}

  Tensor<T> add(const std::string& name, std::vector<int> shape, std::vector<T> data) {
    if (!names_.insert(name).second) {
      throw ConfigError("duplicate parameter name: " + name);
    }
    auto t = Tensor<T>::from_data(std::move(shape), std::move(data), trainable_);
    t.raw()->name = name;
    params_.push_back(t);
    return t;
  }

  Tensor<T> add_gaussian(const std::string& name, std::vector<int> shape, Rng& rng, double stdev) {
    std::vector<T> data(numel(shape));
    Rng r = rng.split(name);
    for (auto& v : data) v = static_cast<T>(r.normal(0.0, stdev));
    return add(name, std::move(shape), std::move(data));
  }

  Tensor<T> add_constant(const std::string& name, std::vector<int> shape, T value) {
    std::vector<T> data(numel(shape), value);
    return add(name, std::move(shape), std::move(data));
  }

  std::vector<Tensor<T>>& tensors() { return params_; }
  const std::vector<Tensor<T>>& tensors() const { return params_; }
  std::size_t count() const { return params_.size(); }
  bool trainable() const { return trainable_; }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // value copy: this <- other, matched by position (twin init / EMA source).
  void copy_values_from(const ParamStore<T>& other) {
    if (other.count() != count()) {
      throw ConfigError("copy_values_from: parameter count mismatch");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto src = other.params_[i].data();
      auto dst = params_[i].mutable_data();
      if (src.size() != dst.size()) {
        throw ConfigError("copy_values_from: size mismatch at " + params_[i].name());
      }
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j];
    }
  }

 private:
  bool trainable_;
  std::vector<Tensor<T>> params_;
  std::unordered_set<std::string> names_;
};

}  // namespace sdml
