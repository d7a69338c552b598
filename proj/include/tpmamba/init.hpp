#pragma once

#include "tpmamba/tensor.hpp"

#include <cmath>
#include <random>

namespace tpmamba {

// Draws are made in double and rounded, so float and double models built from
// the same seed hold the same values up to rounding.

template <typename S>
Tensor<S> uniform_tensor(const Shape& shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<S> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
Tensor<S> normal_tensor(const Shape& shape, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  Tensor<S> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(dist(rng));
  return t;
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
Tensor<S> fan_in_uniform(const Shape& shape, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  return uniform_tensor<S>(shape, -bound, bound, rng);
}

}  // namespace tpmamba
