#pragma once

#include <functional>
#include <span>
#include <vector>

namespace chunkgrad {

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences (f(θ+εe_i) − f(θ−εe_i)) / 2ε for every coordinate.
// Throws std::runtime_error if any evaluation is non-finite.
std::vector<double> finite_difference_grad(const ScalarFunction& f, std::span<const double> theta, double eps);

// Same, restricted to the listed coordinates; result is aligned with `coords`.
std::vector<double> finite_difference_grad(const ScalarFunction& f, std::span<const double> theta, double eps,
                                           std::span<const std::size_t> coords);

}  // namespace chunkgrad
