#include "chunkgrad/finite_difference.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace chunkgrad {

namespace {

double checked(const ScalarFunction& f, std::span<const double> x, std::size_t coord) {
  const double y = f(x);
  if (!std::isfinite(y)) {
    throw std::runtime_error("non-finite function value while differencing coordinate " + std::to_string(coord));
  }
  return y;
}

}  // namespace

std::vector<double> finite_difference_grad(const ScalarFunction& f, std::span<const double> theta, double eps,
                                           std::span<const std::size_t> coords) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> g;
  g.reserve(coords.size());
  for (std::size_t i : coords) {
    if (i >= x.size()) throw std::out_of_range("finite-difference coordinate out of range");
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = checked(f, x, i);
    x[i] = orig - eps;
    const double down = checked(f, x, i);
    x[i] = orig;
    g.push_back((up - down) / (2.0 * eps));
  }
  return g;
}

std::vector<double> finite_difference_grad(const ScalarFunction& f, std::span<const double> theta, double eps) {
  std::vector<std::size_t> all(theta.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return finite_difference_grad(f, theta, eps, all);
}

}  // namespace chunkgrad
