#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "msformer/autograd.hpp"
#include "msformer/ops.hpp"
#include "msformer/tensor.hpp"

namespace msformer::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

/// Analytic gradient of loss() w.r.t. x against central differences on up to
/// `max_probes` evenly spaced elements.
inline ::testing::AssertionResult gradient_matches(const std::function<Var<double>()>& loss, Var<double> x,
                                                   double rtol = 1e-5, double atol = 1e-7, std::size_t max_probes = 64,
                                                   double step = 1e-6) {
  Var<double> l = loss();
  // earlier sweeps may have left gradients on shared leaves
  for (const Node<double>* leaf : reachable_leaves(l)) const_cast<Node<double>*>(leaf)->grad = Tensor<double>();
  l.backward();
  if (!x.has_grad()) return ::testing::AssertionFailure() << "no gradient reached the input";
  const Tensor<double> analytic = x.grad();
  Tensor<double>& value = x.mutable_value();
  const std::size_t n = value.size();
  const std::size_t stride = std::max<std::size_t>(1, n / max_probes);
  for (std::size_t i = 0; i < n; i += stride) {
    const double saved = value[i];
    value[i] = saved + step;
    const double up = loss().value().item();
    value[i] = saved - step;
    const double down = loss().value().item();
    value[i] = saved;
    const double numeric = (up - down) / (2 * step);
    if (std::abs(numeric - analytic[i]) > atol + rtol * std::abs(numeric)) {
      return ::testing::AssertionFailure() << "element " << i << ": analytic " << analytic[i] << " vs numeric "
                                           << numeric;
    }
  }
  return ::testing::AssertionSuccess();
}

/// Fixed random projection to a scalar so every output element gets a distinct weight.
template <typename T>
Var<T> probe(const Var<T>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor<T> w = random_tensor<T>(y.shape(), rng);
  return ops::sum(ops::mul(y, Var<T>(w)));
}

}  // namespace msformer::testing
