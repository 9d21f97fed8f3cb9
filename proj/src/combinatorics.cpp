#include "chunkgrad/combinatorics.hpp"

#include <algorithm>
#include <functional>
#include <stdexcept>

namespace chunkgrad {

BigInt binomial(std::size_t n, std::size_t r) {
  if (r > n) return 0;
  r = std::min(r, n - r);
  BigInt out = 1;
  for (std::size_t i = 1; i <= r; ++i) {
    out *= n - r + i;
    out /= i;
  }
  return out;
}

BigInt falling_factorial(std::size_t n, std::size_t m) {
  BigInt out = 1;
  for (std::size_t i = 0; i < m; ++i) {
    if (i >= n) return 0;
    out *= n - i;
  }
  return out;
}

double to_double(const Rational& r) {
  return static_cast<double>(r);
}

std::string to_string(const Rational& r) {
  const auto num = boost::multiprecision::numerator(r);
  const auto den = boost::multiprecision::denominator(r);
  if (den == 1) return num.str();
  return num.str() + "/" + den.str();
}

Dag Dag::complete(std::size_t n) {
  Dag dag(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) dag.add_edge(i, j);
  }
  return dag;
}

void Dag::add_edge(std::size_t from, std::size_t to) {
  if (from >= to || to >= out_.size()) throw std::invalid_argument("Dag edges must go from lower to higher index");
  out_[from].push_back(to);
}

std::size_t Dag::edge_count() const {
  std::size_t n = 0;
  for (const auto& s : out_) n += s.size();
  return n;
}

BigInt path_count(std::size_t n, std::size_t p) {
  if (n == 0 || p > n - 1) {
    throw std::out_of_range("path_count: need 0 <= p <= n-1 (n=" + std::to_string(n) + ", p=" + std::to_string(p) +
                            ")");
  }
  return binomial(n, p + 1);
}

BigInt enumerate_paths(const Dag& dag, std::size_t p) {
  BigInt count = 0;
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t node, std::size_t remaining) {
    if (remaining == 0) {
      ++count;
      return;
    }
    for (std::size_t next : dag.successors(node)) walk(next, remaining - 1);
  };
  for (std::size_t start = 0; start < dag.size(); ++start) walk(start, p);
  return count;
}

Rational path_ratio(std::size_t k, std::size_t t, std::size_t p) {
  if (t <= p) throw std::invalid_argument("path_ratio: need t > p");
  return Rational(falling_factorial(k, p + 1), falling_factorial(t, p + 1));
}

Rational survival_probability(std::size_t k, std::size_t t, std::size_t p, SurvivalModel model) {
  if (t > k || k == 0) throw std::invalid_argument("survival_probability: need t <= k");
  if (model == SurvivalModel::independent) {
    Rational base(t, k);
    Rational out = 1;
    for (std::size_t i = 0; i < p; ++i) out *= base;
    return out;
  }
  if (p + 1 > k) throw std::invalid_argument("survival_probability: chain needs more chunks than exist");
  if (p + 1 > t) return 0;

  // The chain occupies chunks 0..p; any fixed set of p+1 chunks gives the same count.
  if (k <= 16) {
    std::vector<bool> mask(k, false);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(t), true);
    BigInt hit = 0;
    BigInt total = 0;
    do {
      ++total;
      if (std::all_of(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(p + 1), [](bool b) { return b; })) {
        ++hit;
      }
    } while (std::prev_permutation(mask.begin(), mask.end()));
    return Rational(hit, total);
  }
  return Rational(binomial(k - p - 1, t - p - 1), binomial(k, t));
}

}  // namespace chunkgrad
