#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "msformer/ops.hpp"

namespace msformer::nn {

using Rng = std::mt19937_64;

/// Ordered registry of every named tensor a model owns. Trainable
/// parameters and non-trainable buffers (batch-norm statistics) share one
/// namespace so checkpoints can address both by name.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable;
  };

  Var<T> add_parameter(const std::string& name, Tensor<T> init) { return add(name, std::move(init), true); }
  Var<T> add_buffer(const std::string& name, Tensor<T> init) { return add(name, std::move(init), false); }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.var);
    }
    return out;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Var<T>& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].var;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  void clear_grads() {
    for (auto& e : entries_) e.var.clear_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.var.value().size();
    }
    return n;
  }

 private:
  Var<T> add(const std::string& name, Tensor<T> init, bool trainable) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
    Var<T> v(std::move(init), trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, v, trainable});
    return v;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  // Kaiming-normal (fan_out, ReLU gain) weights, zero bias.
  Conv2d(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, int stride, int padding,
         bool bias, Rng& rng)
      : stride_(stride), padding_(padding) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(out) * kernel * kernel));
    weight_ = store.add_parameter(name + ".weight", normal_tensor<T>({out, in, kernel, kernel}, stddev, rng));
    if (bias) bias_ = store.add_parameter(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::conv2d(x, weight_, bias_.defined() ? &bias_ : nullptr, stride_, padding_);
  }

  const Var<T>& weight() const { return weight_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
  int stride_ = 1;
  int padding_ = 0;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<T>& store, const std::string& name, int channels) {
    gamma_ = store.add_parameter(name + ".weight", Tensor<T>({channels}, T(1)));
    beta_ = store.add_parameter(name + ".bias", Tensor<T>({channels}));
    running_mean_ = store.add_buffer(name + ".running_mean", Tensor<T>({channels}));
    running_var_ = store.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)));
  }

  Var<T> operator()(const Var<T>& x, bool training) const {
    // Buffers are shared handles; updating them through a const module is intended.
    Var<T> mean = running_mean_;
    Var<T> var = running_var_;
    return ops::batch_norm(x, gamma_, beta_, mean.mutable_value(), var.mutable_value(), training);
  }

 private:
  Var<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  // Xavier-uniform weights stored as [in, out], zero bias.
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, bool bias, Rng& rng) {
    const double bound = std::sqrt(6.0 / (static_cast<double>(in) + out));
    weight_ = store.add_parameter(name + ".weight", uniform_tensor<T>({in, out}, bound, rng));
    if (bias) bias_ = store.add_parameter(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight_, bias_.defined() ? &bias_ : nullptr); }

  Var<T>& weight() { return weight_; }
  const Var<T>& weight() const { return weight_; }
  Var<T>& bias() { return bias_; }
  const Var<T>& bias() const { return bias_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int channels) {
    gamma_ = store.add_parameter(name + ".weight", Tensor<T>({channels}, T(1)));
    beta_ = store.add_parameter(name + ".bias", Tensor<T>({channels}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma_, beta_); }

 private:
  Var<T> gamma_, beta_;
};

}  // namespace msformer::nn
