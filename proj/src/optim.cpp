#include "chunkgrad/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace chunkgrad {

namespace {

template <class T>
void check_shapes(const std::vector<Value<T>>& params, const std::vector<std::vector<T>>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != grads[i].size()) throw std::invalid_argument("optimizer: gradient size mismatch");
  }
}

}  // namespace

template <class T>
void sgd_update(const std::vector<Value<T>>& params, const std::vector<std::vector<T>>& grads, double lr) {
  check_shapes(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(w[j] - lr * grads[i][j]);
  }
}

template <class T>
void adam_update(const std::vector<Value<T>>& params, const std::vector<std::vector<T>>& grads, AdamState& state,
                 const AdamHyper& hyper) {
  check_shapes(params, grads);
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam: state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(w[j] - hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

template <class T>
void accumulate(std::vector<std::vector<T>>& into, const std::vector<std::vector<T>>& grads, T weight) {
  if (into.empty()) {
    into = grads;
    for (auto& g : into) {
      for (auto& x : g) x *= weight;
    }
    return;
  }
  if (into.size() != grads.size()) throw std::invalid_argument("accumulate: gradient count mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) {
    if (into[i].size() != grads[i].size()) throw std::invalid_argument("accumulate: gradient size mismatch");
    for (std::size_t j = 0; j < into[i].size(); ++j) into[i][j] += weight * grads[i][j];
  }
}

template void sgd_update(const std::vector<Value<float>>&, const std::vector<std::vector<float>>&, double);
template void sgd_update(const std::vector<Value<double>>&, const std::vector<std::vector<double>>&, double);
template void adam_update(const std::vector<Value<float>>&, const std::vector<std::vector<float>>&, AdamState&,
                          const AdamHyper&);
template void adam_update(const std::vector<Value<double>>&, const std::vector<std::vector<double>>&, AdamState&,
                          const AdamHyper&);
template void accumulate(std::vector<std::vector<float>>&, const std::vector<std::vector<float>>&, float);
template void accumulate(std::vector<std::vector<double>>&, const std::vector<std::vector<double>>&, double);

}  // namespace chunkgrad
