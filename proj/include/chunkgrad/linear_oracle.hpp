#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "chunkgrad/chunkwise.hpp"
#include "chunkgrad/combinatorics.hpp"

namespace chunkgrad {

// Linear recurrence m_i = A m_{i-1} + B x_i (m_0 = 0) with chunk losses
// J_j = c . m_j. Every gradient of sum_j J_j splits into chains that enter
// at chunk i and reach loss j through the caches m_i ... m_j.
//
// Flat parameter layout used throughout: [A row-major, B row-major, c].
struct ChainOracleSpec {
  std::size_t d = 3;
  std::size_t input_dim = 2;
  std::vector<double> A;  // d x d
  std::vector<double> B;  // d x input_dim
  std::vector<double> c;  // d
  std::vector<std::vector<double>> inputs;  // one input_dim vector per chunk

  std::size_t num_chunks() const { return inputs.size(); }
  std::size_t param_count() const { return d * d + d * input_dim + d; }
  void validate() const;

  std::vector<double> theta() const;
  ChainOracleSpec with_theta(std::span<const double> theta) const;

  // Standard-normal entries; A rescaled to Frobenius norm `a_norm`.
  static ChainOracleSpec random(std::size_t d, std::size_t input_dim, std::size_t k, std::uint64_t seed,
                                double a_norm = 0.5);
};

// sum_j c . m_j evaluated directly in double.
double oracle_loss(const ChainOracleSpec& spec);

template <class T>
struct LinearState {
  Value<T> m;  // [d x 1]
  std::vector<Value<T>> tensors() const { return {m}; }
};

// The recurrence as a chunk objective, so the SeCO/SpaCO drivers run on it unchanged.
template <class T>
class LinearObjective {
 public:
  using scalar_type = T;
  using state_type = LinearState<T>;

  explicit LinearObjective(const ChainOracleSpec& spec);

  std::size_t num_chunks() const { return spec_.num_chunks(); }
  std::vector<Value<T>> parameters() const { return {A_, B_, c_}; }
  ChunkForward<T, LinearState<T>> forward_chunk(Tape<T>& tape, std::size_t j,
                                               std::span<const LinearState<T>> prior) const;
  std::size_t activation_bound(std::size_t) const { return spec_.d * sizeof(T); }

  // Driver gradients in the flat layout.
  std::vector<double> flatten(const std::vector<std::vector<T>>& grads) const;

 private:
  ChainOracleSpec spec_;
  Value<T> A_, B_, c_;
  std::vector<Value<T>> x_;
};

// Contribution of the chain entering at chunk `from` and ending at loss `to`.
// Its order is the number of cache-to-cache relays, to - from.
struct ChainTerm {
  std::size_t order = 0;
  std::size_t from = 0;
  std::size_t to = 0;
  std::vector<double> value;
};

struct OracleGradient {
  std::vector<double> gradient;               // adjoint recursion
  std::vector<std::vector<double>> by_order;  // z_p for p = 0 .. k-1
  std::vector<ChainTerm> terms;               // every (from <= to)
};

OracleGradient oracle_exact_gradient(const ChainOracleSpec& spec);

struct OrderScaling {
  std::size_t order = 0;
  Rational effective;          // subset-mean weight of every order-p chain
  bool uniform = true;         // all chains of this order got the same weight
  Rational exact_formula;      // s^p * C(k-p-1, t-p-1) / C(k, t)
  Rational independent_model;  // s^p * (t/k)^p
};

struct SpacoExpectation {
  std::size_t k = 0;
  std::size_t t = 0;
  Rational scaler;
  std::size_t subsets = 0;
  std::vector<double> mean;           // average of the driver's gradients over all subsets
  std::vector<double> reconstructed;  // sum over chains of effective weight * chain value
  std::vector<double> exact;
  std::vector<OrderScaling> orders;
  double cosine = 0.0;                // cos(mean, exact)
  double relative_bias = 0.0;         // |mean - exact| / |exact|
  double relative_bias_scaled = 0.0;  // |mean - (t/k) exact| / |(t/k) exact|
  double reconstruction_error = 0.0;  // max |mean - reconstructed|
};

// Runs SpaCO stage 2 on every size-t subset. cap = kNoCap disables the cap.
// Throws std::invalid_argument when C(k, t) > 10^4.
SpacoExpectation exhaustive_spaco_expectation(const ChainOracleSpec& spec, std::size_t t, double cap);

// Output n+1 of the splitmix64 sequence started at `root`.
std::uint64_t trial_seed(std::uint64_t root, std::uint64_t trial);

struct MonteCarloResult {
  std::size_t trials = 0;
  std::vector<double> mean;
  std::vector<double> std_error;
  std::vector<std::vector<double>> samples;  // per trial, in trial order
};

// Independent SpaCO draws on the linear oracle, one engine instance per
// worker; reduced in trial order so the result does not depend on `workers`.
MonteCarloResult monte_carlo_spaco(const ChainOracleSpec& spec, std::size_t t, double cap, std::size_t trials,
                                   std::uint64_t root_seed, std::size_t workers = 1);

struct MonteCarloCheck {
  double projection_z = 0.0;  // along the unit reference direction
  double max_coord_z = 0.0;   // over coordinates with nonzero spread
};

MonteCarloCheck compare_to_reference(const MonteCarloResult& mc, std::span<const double> reference);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace chunkgrad
