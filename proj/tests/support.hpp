#pragma once

// Shared helpers for the test suites: random inputs, a generic kernel
// gradcheck, and a loop-only reference transformer used as a forward oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "chunkgrad/finite_difference.hpp"
#include "chunkgrad/model.hpp"
#include "chunkgrad/tape.hpp"

namespace testing {

using namespace chunkgrad;

inline std::vector<double> normal_vector(std::mt19937_64& rng, std::size_t n, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

inline double max_grad_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
  return m;
}

inline bool bit_equal(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  return a == b;
}

// Builds a kernel output from freshly made inputs.
using KernelFn = std::function<Value<double>(Tape<double>&, const std::vector<Value<double>>&)>;

// Compares the tape gradient of sum(w * kernel(inputs)) against central
// differences. Returns max |tape - fd| / max(|fd|_inf, 1).
inline double kernel_gradcheck(const KernelFn& kernel, const std::vector<Shape>& shapes, std::mt19937_64& rng,
                               double input_scale = 1.0) {
  std::vector<double> theta;
  std::vector<std::size_t> offsets;
  for (const auto& s : shapes) {
    offsets.push_back(theta.size());
    auto v = normal_vector(rng, numel(s), input_scale);
    theta.insert(theta.end(), v.begin(), v.end());
  }
  auto make_inputs = [&](std::span<const double> th, bool grad) {
    std::vector<Value<double>> in;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const auto b = th.begin() + static_cast<std::ptrdiff_t>(offsets[i]);
      in.push_back(Value<double>::leaf(shapes[i], std::vector<double>(b, b + static_cast<std::ptrdiff_t>(numel(shapes[i]))),
                                       grad));
    }
    return in;
  };

  Tape<double> probe(Mode::inference);
  const auto out_numel = kernel(probe, make_inputs(theta, false)).numel();
  const auto w = normal_vector(rng, out_numel);

  auto f = [&](std::span<const double> th) {
    Tape<double> tape(Mode::inference);
    const auto y = kernel(tape, make_inputs(th, false));
    const auto out = y.data();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
    return s;
  };

  Tape<double> tape;
  auto inputs = make_inputs(theta, true);
  auto out = kernel(tape, inputs);
  Root<double> root{out, w};
  tape.backward(std::span<const Root<double>>(&root, 1));
  std::vector<double> g;
  for (const auto& in : inputs) {
    if (in.has_grad()) {
      g.insert(g.end(), in.grad().begin(), in.grad().end());
    } else {
      g.insert(g.end(), in.numel(), 0.0);
    }
  }
  const auto fd = finite_difference_grad(f, theta, 1e-6);
  return max_abs_diff(g, fd) / std::max(max_abs(fd), 1.0);
}

// Plain-loop transformer loss over a full sequence, written independently of
// the engine's kernels: rotary pairs, causal softmax attention, SwiGLU, RMSNorm.
inline double reference_loss(const Params<double>& p, std::span<const Token> tokens) {
  const auto& cfg = p.config;
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t hd = d / H;
  const std::size_t f = cfg.ffn_dim;
  using Mat = std::vector<double>;

  auto mm = [](const Mat& x, std::size_t rows, std::size_t inner, std::span<const double> w, std::size_t cols) {
    Mat y(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t q = 0; q < inner; ++q) s += x[r * inner + q] * w[q * cols + c];
        y[r * cols + c] = s;
      }
    }
    return y;
  };
  auto norm = [&](const Mat& x, std::span<const double> g) {
    Mat y(x.size());
    for (std::size_t r = 0; r < n; ++r) {
      double ms = 0.0;
      for (std::size_t c = 0; c < d; ++c) ms += x[r * d + c] * x[r * d + c];
      const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + cfg.norm_eps);
      for (std::size_t c = 0; c < d; ++c) y[r * d + c] = x[r * d + c] * inv * g[c];
    }
    return y;
  };
  auto rotate = [&](Mat& x) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < hd / 2; ++i) {
          const double freq = std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
          const double ang = static_cast<double>(r) * freq;
          double& a = x[r * d + h * hd + 2 * i];
          double& b = x[r * d + h * hd + 2 * i + 1];
          const double a0 = a;
          const double b0 = b;
          a = a0 * std::cos(ang) - b0 * std::sin(ang);
          b = a0 * std::sin(ang) + b0 * std::cos(ang);
        }
      }
    }
  };

  Mat h(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) h[r * d + c] = p.embedding.data()[static_cast<std::size_t>(tokens[r]) * d + c];
  }
  for (const auto& L : p.layers) {
    const Mat a = norm(h, L.attn_norm.data());
    Mat q = mm(a, n, d, L.wq.data(), d);
    Mat k = mm(a, n, d, L.wk.data(), d);
    const Mat v = mm(a, n, d, L.wv.data(), d);
    rotate(q);
    rotate(k);
    Mat o(n * d, 0.0);
    for (std::size_t hh = 0; hh < H; ++hh) {
      for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> s(r + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= r; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += q[r * d + hh * hd + e] * k[j * d + hh * hd + e];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j <= r; ++j) {
          for (std::size_t e = 0; e < hd; ++e) o[r * d + hh * hd + e] += s[j] / z * v[j * d + hh * hd + e];
        }
      }
    }
    const Mat ao = mm(o, n, d, L.wo.data(), d);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += ao[i];
    const Mat b = norm(h, L.ffn_norm.data());
    const Mat g = mm(b, n, d, L.w_gate.data(), f);
    const Mat u = mm(b, n, d, L.w_up.data(), f);
    Mat s(n * f);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
    const Mat fo = mm(s, n, f, L.w_down.data(), d);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += fo[i];
  }
  const Mat hf = norm(h, p.final_norm.data());
  const std::size_t V = cfg.vocab_size;
  const Mat logits = mm(hf, n, d, p.head.data(), V);
  double loss = 0.0;
  for (std::size_t r = 0; r + 1 < n; ++r) {
    double mx = -1e300;
    for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, logits[r * V + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(logits[r * V + c] - mx);
    loss += mx + std::log(z) - logits[r * V + static_cast<std::size_t>(tokens[r + 1])];
  }
  return loss / static_cast<double>(n - 1);
}

// Flattened parameter vector and a loss function of it, for differencing
// through the whole model.
inline std::vector<double> flatten_params(const Params<double>& p) {
  std::vector<double> out;
  for (const auto& v : p.tensors()) out.insert(out.end(), v.data().begin(), v.data().end());
  return out;
}

inline Params<double> params_from(const Params<double>& like, std::span<const double> theta) {
  Params<double> p = like.clone();
  std::size_t off = 0;
  for (auto v : p.tensors()) {
    auto dst = v.mutable_data();
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(off),
              theta.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
    off += dst.size();
  }
  return p;
}

inline std::vector<double> flatten_grads(const std::vector<std::vector<double>>& g) {
  std::vector<double> out;
  for (const auto& x : g) out.insert(out.end(), x.begin(), x.end());
  return out;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 32;
  c.ffn_dim = 48;
  return c;
}

}  // namespace testing
