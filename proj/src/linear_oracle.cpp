#include "chunkgrad/linear_oracle.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <thread>

#include "chunkgrad/kernels.hpp"

namespace chunkgrad {

namespace {

using Vec = std::vector<double>;

Vec mat_vec(const Vec& M, std::size_t rows, std::size_t cols, const Vec& x) {
  Vec y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r] += M[r * cols + c] * x[c];
  }
  return y;
}

Vec mat_t_vec(const Vec& M, std::size_t rows, std::size_t cols, const Vec& x) {
  Vec y(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[c] += M[r * cols + c] * x[r];
  }
  return y;
}

// m_1 .. m_k, 0-indexed.
std::vector<Vec> states(const ChainOracleSpec& s) {
  std::vector<Vec> m;
  Vec prev(s.d, 0.0);
  for (const auto& x : s.inputs) {
    Vec next = mat_vec(s.A, s.d, s.d, prev);
    const Vec bx = mat_vec(s.B, s.d, s.input_dim, x);
    for (std::size_t r = 0; r < s.d; ++r) next[r] += bx[r];
    m.push_back(next);
    prev = std::move(next);
  }
  return m;
}

// Gradient entering through chunk i with adjoint `u` arriving at m_i.
void add_local(const ChainOracleSpec& s, const std::vector<Vec>& m, std::size_t i, const Vec& u, Vec& out) {
  const std::size_t d = s.d;
  if (i > 0) {
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] += u[r] * m[i - 1][c];
    }
  }
  const std::size_t off = d * d;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < s.input_dim; ++c) out[off + r * s.input_dim + c] += u[r] * s.inputs[i][c];
  }
}

void add_direct(const ChainOracleSpec& s, const std::vector<Vec>& m, std::size_t j, Vec& out) {
  const std::size_t off = s.d * s.d + s.d * s.input_dim;
  for (std::size_t r = 0; r < s.d; ++r) out[off + r] += m[j][r];
}

double norm(std::span<const double> a) {
  double n = 0.0;
  for (double x : a) n += x * x;
  return std::sqrt(n);
}

double distance(std::span<const double> a, std::span<const double> b) {
  double n = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(n);
}

Rational pow_rational(const Rational& base, std::size_t p) {
  Rational out = 1;
  for (std::size_t i = 0; i < p; ++i) out *= base;
  return out;
}

std::vector<std::vector<std::size_t>> all_subsets(std::size_t k, std::size_t t) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<bool> mask(k, false);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(t), true);
  do {
    std::vector<std::size_t> s;
    for (std::size_t i = k; i-- > 0;) {
      if (mask[i]) s.push_back(i);
    }
    out.push_back(std::move(s));
  } while (std::prev_permutation(mask.begin(), mask.end()));
  return out;
}

Rational scaler_rational(std::size_t k, std::size_t t, double cap) {
  Rational ratio(k, t);
  if (std::isinf(cap)) return ratio;
  Rational capped(cap);
  return ratio < capped ? ratio : capped;
}

}  // namespace

void ChainOracleSpec::validate() const {
  if (d == 0 || input_dim == 0) throw std::invalid_argument("oracle dimensions must be positive");
  if (A.size() != d * d || B.size() != d * input_dim || c.size() != d) {
    throw std::invalid_argument("oracle matrices do not match the declared dimensions");
  }
  if (inputs.empty()) throw std::invalid_argument("oracle needs at least one chunk");
  for (const auto& x : inputs) {
    if (x.size() != input_dim) throw std::invalid_argument("oracle input has the wrong size");
  }
  for (const auto* v : {&A, &B, &c}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw std::invalid_argument("oracle entries must be finite");
    }
  }
}

std::vector<double> ChainOracleSpec::theta() const {
  Vec out;
  out.reserve(param_count());
  out.insert(out.end(), A.begin(), A.end());
  out.insert(out.end(), B.begin(), B.end());
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

ChainOracleSpec ChainOracleSpec::with_theta(std::span<const double> theta) const {
  if (theta.size() != param_count()) throw std::invalid_argument("theta has the wrong size");
  ChainOracleSpec s = *this;
  auto it = theta.begin();
  std::copy(it, it + static_cast<std::ptrdiff_t>(A.size()), s.A.begin());
  it += static_cast<std::ptrdiff_t>(A.size());
  std::copy(it, it + static_cast<std::ptrdiff_t>(B.size()), s.B.begin());
  it += static_cast<std::ptrdiff_t>(B.size());
  std::copy(it, theta.end(), s.c.begin());
  return s;
}

ChainOracleSpec ChainOracleSpec::random(std::size_t d, std::size_t input_dim, std::size_t k, std::uint64_t seed,
                                        double a_norm) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ChainOracleSpec s;
  s.d = d;
  s.input_dim = input_dim;
  auto fill = [&](std::size_t n) {
    Vec v(n);
    for (auto& x : v) x = normal(rng);
    return v;
  };
  s.A = fill(d * d);
  s.B = fill(d * input_dim);
  s.c = fill(d);
  for (std::size_t i = 0; i < k; ++i) s.inputs.push_back(fill(input_dim));
  const double n = norm(s.A);
  if (n > 0.0) {
    for (auto& x : s.A) x *= a_norm / n;
  }
  s.validate();
  return s;
}

double oracle_loss(const ChainOracleSpec& spec) {
  spec.validate();
  double loss = 0.0;
  for (const auto& m : states(spec)) {
    for (std::size_t r = 0; r < spec.d; ++r) loss += spec.c[r] * m[r];
  }
  return loss;
}

template <class T>
LinearObjective<T>::LinearObjective(const ChainOracleSpec& spec) : spec_(spec) {
  spec_.validate();
  auto leaf = [](Shape shape, const Vec& v, bool grad) {
    return Value<T>::leaf(std::move(shape), std::vector<T>(v.begin(), v.end()), grad);
  };
  A_ = leaf({spec_.d, spec_.d}, spec_.A, true);
  B_ = leaf({spec_.d, spec_.input_dim}, spec_.B, true);
  c_ = leaf({spec_.d, 1}, spec_.c, true);
  for (const auto& x : spec_.inputs) x_.push_back(leaf({spec_.input_dim, 1}, x, false));
}

template <class T>
ChunkForward<T, LinearState<T>> LinearObjective<T>::forward_chunk(Tape<T>& tape, std::size_t j,
                                                                 std::span<const LinearState<T>> prior) const {
  if (prior.size() != j) throw std::invalid_argument("linear objective expects every earlier state");
  Value<T> m = ops::matmul(tape, B_, x_.at(j));
  if (j > 0) m = ops::add(tape, ops::matmul(tape, A_, prior[j - 1].m), m);
  Value<T> loss = ops::dot(tape, c_, m);
  return {std::move(loss), LinearState<T>{tape.recording() ? m : detach(m)}};
}

template <class T>
std::vector<double> LinearObjective<T>::flatten(const std::vector<std::vector<T>>& grads) const {
  Vec out;
  out.reserve(spec_.param_count());
  for (const auto& g : grads) out.insert(out.end(), g.begin(), g.end());
  if (out.size() != spec_.param_count()) throw std::invalid_argument("gradient does not match the oracle layout");
  return out;
}

template class LinearObjective<float>;
template class LinearObjective<double>;

OracleGradient oracle_exact_gradient(const ChainOracleSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_chunks();
  const std::size_t P = spec.param_count();
  const auto m = states(spec);

  OracleGradient out;
  out.gradient.assign(P, 0.0);
  // Adjoint of the whole loss at m_i: lambda_i = c + A^T lambda_{i+1}.
  Vec lambda(spec.d, 0.0);
  for (std::size_t i = k; i-- > 0;) {
    Vec next = mat_t_vec(spec.A, spec.d, spec.d, lambda);
    for (std::size_t r = 0; r < spec.d; ++r) next[r] += spec.c[r];
    lambda = std::move(next);
    add_local(spec, m, i, lambda, out.gradient);
    add_direct(spec, m, i, out.gradient);
  }

  out.by_order.assign(k, Vec(P, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    Vec v = spec.c;  // (A^T)^(j-i) c
    for (std::size_t j = i; j < k; ++j) {
      ChainTerm term{j - i, i, j, Vec(P, 0.0)};
      add_local(spec, m, i, v, term.value);
      if (i == j) add_direct(spec, m, j, term.value);
      for (std::size_t q = 0; q < P; ++q) out.by_order[term.order][q] += term.value[q];
      out.terms.push_back(std::move(term));
      v = mat_t_vec(spec.A, spec.d, spec.d, v);
    }
  }
  return out;
}

SpacoExpectation exhaustive_spaco_expectation(const ChainOracleSpec& spec, std::size_t t, double cap) {
  spec.validate();
  const std::size_t k = spec.num_chunks();
  if (t == 0 || t > k) throw std::invalid_argument("exhaustive_spaco_expectation: need 1 <= t <= k");
  if (binomial(k, t) > 10000) {
    throw std::invalid_argument("C(" + std::to_string(k) + ", " + std::to_string(t) +
                                ") subsets is too many to enumerate; use Monte Carlo trials instead");
  }
  const std::size_t P = spec.param_count();
  const auto oracle = oracle_exact_gradient(spec);

  SpacoExpectation out;
  out.k = k;
  out.t = t;
  out.scaler = scaler_rational(k, t, cap);
  const double scaler = static_cast<double>(compensation_scaler(k, t, cap));

  LinearObjective<double> obj(spec);
  const auto subsets = all_subsets(k, t);
  out.subsets = subsets.size();
  out.mean.assign(P, 0.0);

  // weight[i][j]: summed relay coefficient of chain (i -> j) over subsets.
  std::vector<std::vector<Rational>> weight(k, std::vector<Rational>(k, Rational(0)));
  for (const auto& subset : subsets) {
    auto res = chunkwise_step(obj, std::span<const std::size_t>(subset), scaler);
    const auto g = obj.flatten(res.grads);
    for (std::size_t q = 0; q < P; ++q) out.mean[q] += g[q];

    // The relay recursion in chain coordinates: u_i = e_i + s * G_i, and
    // backward through chunk i deposits u_i on checkpoint i-1.
    std::vector<std::vector<Rational>> G(k, std::vector<Rational>(k, Rational(0)));
    for (std::size_t i : subset) {
      std::vector<Rational> u(k, Rational(0));
      u[i] = 1;
      for (std::size_t j = 0; j < k; ++j) u[j] += out.scaler * G[i][j];
      for (std::size_t j = 0; j < k; ++j) weight[i][j] += u[j];
      if (i > 0) {
        for (std::size_t j = 0; j < k; ++j) G[i - 1][j] += u[j];
      }
    }
  }
  for (auto& x : out.mean) x /= static_cast<double>(out.subsets);

  const Rational count(static_cast<long long>(out.subsets));
  out.reconstructed.assign(P, 0.0);
  for (const auto& term : oracle.terms) {
    const double w = to_double(weight[term.from][term.to] / count);
    for (std::size_t q = 0; q < P; ++q) out.reconstructed[q] += w * term.value[q];
  }

  const Rational keep(t, k);
  for (std::size_t p = 0; p < k; ++p) {
    OrderScaling o;
    o.order = p;
    bool first = true;
    for (std::size_t i = 0; i + p < k; ++i) {
      const Rational w = weight[i][i + p] / count;
      if (first) {
        o.effective = w;
        first = false;
      } else if (w != o.effective) {
        o.uniform = false;
      }
    }
    const Rational sp = pow_rational(out.scaler, p);
    o.exact_formula = p + 1 <= t ? sp * Rational(binomial(k - p - 1, t - p - 1), binomial(k, t)) : Rational(0);
    o.independent_model = sp * pow_rational(keep, p);
    out.orders.push_back(std::move(o));
  }

  out.exact = oracle.gradient;
  out.cosine = cosine_similarity(out.mean, out.exact);
  out.relative_bias = distance(out.mean, out.exact) / norm(out.exact);
  Vec scaled = out.exact;
  for (auto& x : scaled) x *= to_double(keep);
  out.relative_bias_scaled = distance(out.mean, scaled) / norm(scaled);
  for (std::size_t q = 0; q < P; ++q) {
    out.reconstruction_error = std::max(out.reconstruction_error, std::abs(out.mean[q] - out.reconstructed[q]));
  }
  return out;
}

std::uint64_t trial_seed(std::uint64_t root, std::uint64_t trial) {
  std::uint64_t z = root + (trial + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

MonteCarloResult monte_carlo_spaco(const ChainOracleSpec& spec, std::size_t t, double cap, std::size_t trials,
                                   std::uint64_t root_seed, std::size_t workers) {
  spec.validate();
  const std::size_t k = spec.num_chunks();
  if (t == 0 || t > k) throw std::invalid_argument("monte_carlo_spaco: need 1 <= t <= k");
  if (trials < 2) throw std::invalid_argument("monte_carlo_spaco: need at least two trials");
  const double scaler = compensation_scaler(k, t, cap);
  workers = std::max<std::size_t>(1, std::min(workers, trials));

  MonteCarloResult out;
  out.trials = trials;
  out.samples.assign(trials, {});
  auto run = [&](std::size_t begin, std::size_t end) {
    LinearObjective<double> obj(spec);
    for (std::size_t n = begin; n < end; ++n) {
      std::mt19937_64 rng(trial_seed(root_seed, n));
      const auto subset = sample_indices(k, t, rng);
      auto res = chunkwise_step(obj, std::span<const std::size_t>(subset), scaler);
      out.samples[n] = obj.flatten(res.grads);
    }
  };
  if (workers == 1) {
    run(0, trials);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, trials * w / workers, trials * (w + 1) / workers);
    for (auto& th : pool) th.join();
  }

  const std::size_t P = spec.param_count();
  out.mean.assign(P, 0.0);
  for (const auto& s : out.samples) {
    for (std::size_t q = 0; q < P; ++q) out.mean[q] += s[q];
  }
  for (auto& x : out.mean) x /= static_cast<double>(trials);
  out.std_error.assign(P, 0.0);
  for (const auto& s : out.samples) {
    for (std::size_t q = 0; q < P; ++q) out.std_error[q] += (s[q] - out.mean[q]) * (s[q] - out.mean[q]);
  }
  for (auto& x : out.std_error) x = std::sqrt(x / static_cast<double>(trials - 1) / static_cast<double>(trials));
  return out;
}

MonteCarloCheck compare_to_reference(const MonteCarloResult& mc, std::span<const double> reference) {
  if (reference.size() != mc.mean.size()) throw std::invalid_argument("reference has the wrong size");
  MonteCarloCheck out;
  const double ref_norm = norm(reference);
  if (ref_norm > 0.0) {
    std::vector<double> proj;
    proj.reserve(mc.samples.size());
    for (const auto& s : mc.samples) {
      double p = 0.0;
      for (std::size_t q = 0; q < s.size(); ++q) p += s[q] * reference[q] / ref_norm;
      proj.push_back(p);
    }
    double mean = 0.0;
    for (double p : proj) mean += p;
    mean /= static_cast<double>(proj.size());
    double var = 0.0;
    for (double p : proj) var += (p - mean) * (p - mean);
    var /= static_cast<double>(proj.size() - 1);
    const double se = std::sqrt(var / static_cast<double>(proj.size()));
    out.projection_z = se > 0.0 ? (mean - ref_norm) / se : 0.0;
  }
  for (std::size_t q = 0; q < reference.size(); ++q) {
    if (mc.std_error[q] > 0.0) {
      out.max_coord_z = std::max(out.max_coord_z, std::abs(mc.mean[q] - reference[q]) / mc.std_error[q]);
    }
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (na * nb);
}

}  // namespace chunkgrad
