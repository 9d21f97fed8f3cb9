#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cstddef>
#include <string>
#include <vector>

namespace chunkgrad {

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;

BigInt binomial(std::size_t n, std::size_t r);
// n (n-1) ... (n-m+1); 1 when m = 0.
BigInt falling_factorial(std::size_t n, std::size_t m);

double to_double(const Rational& r);
std::string to_string(const Rational& r);

// Directed graph whose edges only go from lower to higher node index.
class Dag {
 public:
  explicit Dag(std::size_t n) : out_(n) {}
  // Every edge i -> j with i < j.
  static Dag complete(std::size_t n);

  void add_edge(std::size_t from, std::size_t to);
  std::size_t size() const { return out_.size(); }
  std::size_t edge_count() const;
  const std::vector<std::size_t>& successors(std::size_t node) const { return out_.at(node); }

 private:
  std::vector<std::vector<std::size_t>> out_;
};

// Directed paths with p edges in the complete DAG on n nodes: C(n, p+1).
BigInt path_count(std::size_t n, std::size_t p);

// Exhaustive DFS count of directed p-edge paths.
BigInt enumerate_paths(const Dag& dag, std::size_t p);

// Dense/sparse path-count ratio k^(p+1) / t^(p+1) in falling factorials. Needs t > p.
Rational path_ratio(std::size_t k, std::size_t t, std::size_t p);

enum class SurvivalModel { independent, exact };

// Probability that a chain with p relays (p+1 chunks) survives when t of k
// chunks are kept. independent: (t/k)^p. exact: all p+1 chunks fall in a
// uniform size-t subset, counted over subsets.
Rational survival_probability(std::size_t k, std::size_t t, std::size_t p, SurvivalModel model);

}  // namespace chunkgrad
