#pragma once
// Shared helpers for unit tests.

#include <vector>

#include "mat/common.hpp"
#include "mat/tensor.hpp"

namespace testutil {

// Random tensor with entries of magnitude in [0.2, 1.5] and random sign:
// comfortably away from the kinks of relu/maxpool so central differences
// stay clean.
inline mat::gradcore::Tensor rand_tensor(std::vector<int> shape, uint64_t seed,
                                         bool requires_grad = false) {
  mat::Rng rng(seed);
  int n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) {
    double mag = rng.uniform(0.2, 1.5);
    x = rng.next() & 1 ? mag : -mag;
  }
  return mat::gradcore::Tensor::from_data(std::move(shape), std::move(v),
                                          requires_grad);
}

// Smooth random tensor in [lo, hi] for value-sensitive ops (log, softmax).
inline mat::gradcore::Tensor rand_uniform(std::vector<int> shape, uint64_t seed,
                                          double lo, double hi,
                                          bool requires_grad = false) {
  mat::Rng rng(seed);
  int n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return mat::gradcore::Tensor::from_data(std::move(shape), std::move(v),
                                          requires_grad);
}

}  // namespace testutil
