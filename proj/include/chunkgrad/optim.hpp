#pragma once

#include <cstdint>
#include <vector>

#include "chunkgrad/tape.hpp"

namespace chunkgrad {

template <class T>
void sgd_update(const std::vector<Value<T>>& params, const std::vector<std::vector<T>>& grads, double lr);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments are kept in double regardless of the parameter type.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

template <class T>
void adam_update(const std::vector<Value<T>>& params, const std::vector<std::vector<T>>& grads, AdamState& state,
                 const AdamHyper& hyper);

// Elementwise a += b, for accumulating gradients across sequences.
template <class T>
void accumulate(std::vector<std::vector<T>>& into, const std::vector<std::vector<T>>& grads, T weight = T(1));

}  // namespace chunkgrad
