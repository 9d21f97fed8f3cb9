#include "chunkgrad/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunkgrad::ops {

namespace {

template <class T>
using Buf = std::shared_ptr<std::vector<T>>;

template <class T>
SavedBuffer<T> save(const Value<T>& v) {
  return {v.buffer(), !v.is_leaf()};
}

template <class T>
SavedBuffer<T> save_internal(const Buf<T>& b) {
  return {b, true};
}

template <class T>
void require_same_shape(const Value<T>& a, const Value<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                to_string(b.shape()));
  }
}

template <class T>
void require_rank(const Value<T>& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                to_string(v.shape()));
  }
}

template <class T>
std::uint64_t grad_inputs(const Value<T>& a) {
  return a.requires_grad() ? 1 : 0;
}

}  // namespace

template <class T>
Value<T> add(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
  require_same_shape(a, b, "add");
  const std::size_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(n);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = x[i] + y[i];
  const std::uint64_t bwd = n * (grad_inputs(a) + grad_inputs(b));
  return tape.emit({OpKind::add,
                    {a, b},
                    a.shape(),
                    out,
                    {},
                    [](const BackwardArgs<T>& args) {
                      for (const auto& gi : args.grad_in) {
                        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += args.grad_out[i];
                      }
                    },
                    {n, bwd, 0}});
}

template <class T>
Value<T> mul(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
  require_same_shape(a, b, "mul");
  const std::size_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(n);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = x[i] * y[i];
  const std::uint64_t bwd = n * (grad_inputs(a) + grad_inputs(b));
  return tape.emit({OpKind::mul,
                    {a, b},
                    a.shape(),
                    out,
                    {save(a), save(b)},
                    [](const BackwardArgs<T>& args) {
                      const auto& x = *args.saved[0];
                      const auto& y = *args.saved[1];
                      const auto g = args.grad_out;
                      if (auto ga = args.grad_in[0]; !ga.empty()) {
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                      }
                      if (auto gb = args.grad_in[1]; !gb.empty()) {
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                      }
                    },
                    {n, bwd, 0}});
}

template <class T>
Value<T> scale(Tape<T>& tape, const Value<T>& a, T factor) {
  const std::size_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(n);
  auto x = a.data();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = x[i] * factor;
  return tape.emit({OpKind::scale,
                    {a},
                    a.shape(),
                    out,
                    {},
                    [factor](const BackwardArgs<T>& args) {
                      auto ga = args.grad_in[0];
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += args.grad_out[i] * factor;
                    },
                    {n, n, 0}});
}

template <class T>
Value<T> sum(Tape<T>& tape, const Value<T>& a) {
  const std::size_t n = a.numel();
  T acc = 0;
  for (T x : a.data()) acc += x;
  auto out = std::make_shared<std::vector<T>>(1, acc);
  return tape.emit({OpKind::sum,
                    {a},
                    {},
                    out,
                    {},
                    [](const BackwardArgs<T>& args) {
                      auto ga = args.grad_in[0];
                      const T g = args.grad_out[0];
                      for (auto& x : ga) x += g;
                    },
                    {n, n, 0}});
}

template <class T>
Value<T> dot(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
  const std::size_t n = a.numel();
  T acc = 0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  auto out = std::make_shared<std::vector<T>>(1, acc);
  const std::uint64_t bwd = n * (grad_inputs(a) + grad_inputs(b));
  return tape.emit({OpKind::dot,
                    {a, b},
                    {},
                    out,
                    {save(a), save(b)},
                    [](const BackwardArgs<T>& args) {
                      const T g = args.grad_out[0];
                      const auto& x = *args.saved[0];
                      const auto& y = *args.saved[1];
                      if (auto ga = args.grad_in[0]; !ga.empty()) {
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * y[i];
                      }
                      if (auto gb = args.grad_in[1]; !gb.empty()) {
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * x[i];
                      }
                    },
                    {2 * n, bwd, 0}});
}

template <class T>
Value<T> matmul(Tape<T>& tape, const Value<T>& x, const Value<T>& w) {
  require_rank(x, 2, "matmul");
  require_rank(w, 2, "matmul");
  const std::size_t m = x.shape()[0];
  const std::size_t k = x.shape()[1];
  const std::size_t n = w.shape()[1];
  if (w.shape()[0] != k) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + to_string(x.shape()) + " * " +
                                to_string(w.shape()));
  }
  auto out = std::make_shared<std::vector<T>>(m * n, T(0));
  {
    const T* xp = x.data().data();
    const T* wp = w.data().data();
    T* yp = out->data();
    for (std::size_t i = 0; i < m; ++i) {
      T* yrow = yp + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a = xp[i * k + p];
        const T* wrow = wp + p * n;
        for (std::size_t j = 0; j < n; ++j) yrow[j] += a * wrow[j];
      }
    }
  }
  const std::uint64_t mkn = 2ull * m * k * n;
  return tape.emit({OpKind::matmul,
                    {x, w},
                    {m, n},
                    out,
                    {save(x), save(w)},
                    [m, k, n](const BackwardArgs<T>& args) {
                      const T* xp = args.saved[0]->data();
                      const T* wp = args.saved[1]->data();
                      const T* gy = args.grad_out.data();
                      if (auto gx = args.grad_in[0]; !gx.empty()) {
                        for (std::size_t i = 0; i < m; ++i) {
                          const T* grow = gy + i * n;
                          for (std::size_t p = 0; p < k; ++p) {
                            const T* wrow = wp + p * n;
                            T acc = 0;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * wrow[j];
                            gx[i * k + p] += acc;
                          }
                        }
                      }
                      if (auto gw = args.grad_in[1]; !gw.empty()) {
                        for (std::size_t i = 0; i < m; ++i) {
                          const T* grow = gy + i * n;
                          for (std::size_t p = 0; p < k; ++p) {
                            const T a = xp[i * k + p];
                            T* gwrow = gw.data() + p * n;
                            for (std::size_t j = 0; j < n; ++j) gwrow[j] += a * grow[j];
                          }
                        }
                      }
                    },
                    {mkn, mkn * (grad_inputs(x) + grad_inputs(w)), 0}});
}

template <class T>
Value<T> rmsnorm(Tape<T>& tape, const Value<T>& x, const Value<T>& gain, double eps) {
  require_rank(x, 2, "rmsnorm");
  const std::size_t m = x.shape()[0];
  const std::size_t n = x.shape()[1];
  if (gain.numel() != n) throw std::invalid_argument("rmsnorm: gain size mismatch");
  auto out = std::make_shared<std::vector<T>>(m * n);
  auto rstd = std::make_shared<std::vector<T>>(m);
  auto xd = x.data();
  auto gd = gain.data();
  for (std::size_t i = 0; i < m; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xd[i * n + j] * xd[i * n + j];
    const T r = T(1) / std::sqrt(ss / T(n) + T(eps));
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) (*out)[i * n + j] = xd[i * n + j] * r * gd[j];
  }
  const std::uint64_t fwd = 4ull * m * n;
  return tape.emit({OpKind::rmsnorm,
                    {x, gain},
                    x.shape(),
                    out,
                    {save(x), save(gain), save_internal(rstd)},
                    [m, n](const BackwardArgs<T>& args) {
                      const auto& xs = *args.saved[0];
                      const auto& g = *args.saved[1];
                      const auto& r = *args.saved[2];
                      const auto gy = args.grad_out;
                      auto gx = args.grad_in[0];
                      auto gg = args.grad_in[1];
                      for (std::size_t i = 0; i < m; ++i) {
                        const T ri = r[i];
                        if (!gg.empty()) {
                          for (std::size_t j = 0; j < n; ++j) gg[j] += gy[i * n + j] * xs[i * n + j] * ri;
                        }
                        if (!gx.empty()) {
                          T dot_ = 0;
                          for (std::size_t j = 0; j < n; ++j) dot_ += gy[i * n + j] * g[j] * xs[i * n + j];
                          const T coef = dot_ * ri * ri / T(n);
                          for (std::size_t j = 0; j < n; ++j) {
                            gx[i * n + j] += ri * (gy[i * n + j] * g[j] - xs[i * n + j] * coef);
                          }
                        }
                      }
                    },
                    {fwd, 2 * fwd, 0}});
}

template <class T>
Value<T> swiglu(Tape<T>& tape, const Value<T>& gate, const Value<T>& up) {
  require_same_shape(gate, up, "swiglu");
  const std::size_t n = gate.numel();
  auto out = std::make_shared<std::vector<T>>(n);
  auto a = gate.data();
  auto b = up.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-a[i]));
    (*out)[i] = a[i] * s * b[i];
  }
  const std::uint64_t fwd = 5ull * n;
  return tape.emit({OpKind::swiglu,
                    {gate, up},
                    gate.shape(),
                    out,
                    {save(gate), save(up)},
                    [](const BackwardArgs<T>& args) {
                      const auto& a = *args.saved[0];
                      const auto& b = *args.saved[1];
                      const auto g = args.grad_out;
                      auto ga = args.grad_in[0];
                      auto gb = args.grad_in[1];
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const T s = T(1) / (T(1) + std::exp(-a[i]));
                        if (!ga.empty()) ga[i] += g[i] * b[i] * s * (T(1) + a[i] * (T(1) - s));
                        if (!gb.empty()) gb[i] += g[i] * a[i] * s;
                      }
                    },
                    {fwd, 2 * fwd, 0}});
}

template <class T>
Value<T> softmax(Tape<T>& tape, const Value<T>& x) {
  require_rank(x, 2, "softmax");
  const std::size_t m = x.shape()[0];
  const std::size_t n = x.shape()[1];
  auto out = std::make_shared<std::vector<T>>(m * n);
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[i * n + j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T e = std::exp(xd[i * n + j] - mx);
      (*out)[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) (*out)[i * n + j] /= z;
  }
  const std::uint64_t fwd = 4ull * m * n;
  return tape.emit({OpKind::softmax,
                    {x},
                    x.shape(),
                    out,
                    {save_internal(out)},
                    [m, n](const BackwardArgs<T>& args) {
                      const auto& y = *args.saved[0];
                      const auto g = args.grad_out;
                      auto gx = args.grad_in[0];
                      for (std::size_t i = 0; i < m; ++i) {
                        T d = 0;
                        for (std::size_t j = 0; j < n; ++j) d += g[i * n + j] * y[i * n + j];
                        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - d);
                      }
                    },
                    {fwd, 2 * fwd, 0}});
}

template <class T>
Value<T> cross_entropy_lm(Tape<T>& tape, const Value<T>& logits, std::span<const Token> targets,
                          double normalizer) {
  require_rank(logits, 2, "cross_entropy_lm");
  const std::size_t m = logits.shape()[0];
  const std::size_t v = logits.shape()[1];
  if (targets.size() != m) throw std::invalid_argument("cross_entropy_lm: one target per row required");
  if (!(normalizer > 0.0)) throw std::invalid_argument("cross_entropy_lm: normalizer must be positive");
  for (Token t : targets) {
    if (t != kIgnoreTarget && (t < 0 || static_cast<std::size_t>(t) >= v)) {
      throw std::out_of_range("cross_entropy_lm: target " + std::to_string(t) + " outside vocabulary");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(m * v);
  auto ld = logits.data();
  T loss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = ld.data() + i * v;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(row[j] - mx);
      (*probs)[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    if (targets[i] != kIgnoreTarget) loss += (mx + std::log(z)) - row[targets[i]];
  }
  const T inv_norm = T(1) / T(normalizer);
  auto out = std::make_shared<std::vector<T>>(1, loss * inv_norm);
  std::vector<Token> tgt(targets.begin(), targets.end());
  const std::uint64_t fwd = 4ull * m * v;
  return tape.emit({OpKind::cross_entropy,
                    {logits},
                    {},
                    out,
                    {save_internal(probs)},
                    [m, v, tgt = std::move(tgt), inv_norm](const BackwardArgs<T>& args) {
                      const auto& p = *args.saved[0];
                      const T g = args.grad_out[0] * inv_norm;
                      auto gl = args.grad_in[0];
                      for (std::size_t i = 0; i < m; ++i) {
                        if (tgt[i] == kIgnoreTarget) continue;
                        for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * p[i * v + j];
                        gl[i * v + static_cast<std::size_t>(tgt[i])] -= g;
                      }
                    },
                    {fwd, 2 * fwd, 0}});
}

template <class T>
Value<T> embedding(Tape<T>& tape, const Value<T>& table, std::span<const Token> tokens) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  const std::size_t m = tokens.size();
  auto out = std::make_shared<std::vector<T>>(m * d);
  auto td = table.data();
  for (std::size_t i = 0; i < m; ++i) {
    const Token t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("embedding: token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(t * d), d, out->begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<Token> toks(tokens.begin(), tokens.end());
  return tape.emit({OpKind::embedding,
                    {table},
                    {m, d},
                    out,
                    {},
                    [d, toks = std::move(toks)](const BackwardArgs<T>& args) {
                      auto gt = args.grad_in[0];
                      for (std::size_t i = 0; i < toks.size(); ++i) {
                        T* row = gt.data() + static_cast<std::size_t>(toks[i]) * d;
                        for (std::size_t j = 0; j < d; ++j) row[j] += args.grad_out[i * d + j];
                      }
                    },
                    {0, 0, 0}});
}

namespace {

// cos/sin tables for rows [offset, offset + m), pairs within a head.
template <class T>
void rope_tables(std::size_t m, std::size_t head_dim, std::size_t offset, double base, std::vector<T>& cs,
                 std::vector<T>& sn) {
  const std::size_t half = head_dim / 2;
  cs.resize(m * half);
  sn.resize(m * half);
  for (std::size_t r = 0; r < m; ++r) {
    const double pos = static_cast<double>(offset + r);
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = pos * inv_freq;
      cs[r * half + i] = static_cast<T>(std::cos(angle));
      sn[r * half + i] = static_cast<T>(std::sin(angle));
    }
  }
}

}  // namespace

template <class T>
Value<T> rope(Tape<T>& tape, const Value<T>& x, std::size_t n_heads, std::size_t position_offset, double base) {
  require_rank(x, 2, "rope");
  const std::size_t m = x.shape()[0];
  const std::size_t d = x.shape()[1];
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw std::invalid_argument("rope: width must split into heads of even size");
  }
  const std::size_t hd = d / n_heads;
  const std::size_t half = hd / 2;
  std::vector<T> cs, sn;
  rope_tables(m, hd, position_offset, base, cs, sn);
  auto out = std::make_shared<std::vector<T>>(m * d);
  auto xd = x.data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t o = r * d + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const T c = cs[r * half + i];
        const T s = sn[r * half + i];
        const T x0 = xd[o + 2 * i];
        const T x1 = xd[o + 2 * i + 1];
        (*out)[o + 2 * i] = x0 * c - x1 * s;
        (*out)[o + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  const std::uint64_t fwd = 3ull * m * d;
  return tape.emit({OpKind::rope,
                    {x},
                    x.shape(),
                    out,
                    {},
                    [m, d, n_heads, hd, half, position_offset, base](const BackwardArgs<T>& args) {
                      std::vector<T> cs, sn;
                      rope_tables(m, hd, position_offset, base, cs, sn);
                      const auto g = args.grad_out;
                      auto gx = args.grad_in[0];
                      for (std::size_t r = 0; r < m; ++r) {
                        for (std::size_t h = 0; h < n_heads; ++h) {
                          const std::size_t o = r * d + h * hd;
                          for (std::size_t i = 0; i < half; ++i) {
                            const T c = cs[r * half + i];
                            const T s = sn[r * half + i];
                            const T g0 = g[o + 2 * i];
                            const T g1 = g[o + 2 * i + 1];
                            gx[o + 2 * i] += g0 * c + g1 * s;
                            gx[o + 2 * i + 1] += -g0 * s + g1 * c;
                          }
                        }
                      }
                    },
                    {fwd, 2 * fwd, 0}});
}

#define CHUNKGRAD_INSTANTIATE(T)                                                                    \
  template Value<T> add(Tape<T>&, const Value<T>&, const Value<T>&);                              \
  template Value<T> mul(Tape<T>&, const Value<T>&, const Value<T>&);                              \
  template Value<T> scale(Tape<T>&, const Value<T>&, T);                                          \
  template Value<T> sum(Tape<T>&, const Value<T>&);                                               \
  template Value<T> dot(Tape<T>&, const Value<T>&, const Value<T>&);                              \
  template Value<T> matmul(Tape<T>&, const Value<T>&, const Value<T>&);                           \
  template Value<T> rmsnorm(Tape<T>&, const Value<T>&, const Value<T>&, double);                  \
  template Value<T> swiglu(Tape<T>&, const Value<T>&, const Value<T>&);                           \
  template Value<T> softmax(Tape<T>&, const Value<T>&);                                           \
  template Value<T> cross_entropy_lm(Tape<T>&, const Value<T>&, std::span<const Token>, double);  \
  template Value<T> embedding(Tape<T>&, const Value<T>&, std::span<const Token>);                 \
  template Value<T> rope(Tape<T>&, const Value<T>&, std::size_t, std::size_t, double);

CHUNKGRAD_INSTANTIATE(float)
CHUNKGRAD_INSTANTIATE(double)

#undef CHUNKGRAD_INSTANTIATE

}  // namespace chunkgrad::ops
