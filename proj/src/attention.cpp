#include "chunkgrad/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunkgrad::ops {

namespace {

template <class T>
struct BlockView {
  const T* keys;
  const T* values;
  std::size_t len;
};

template <class T>
T dot_n(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t e = 0; e < n; ++e) acc += a[e] * b[e];
  return acc;
}

}  // namespace

template <class T>
Value<T> causal_chunk_attention(Tape<T>& tape, const Value<T>& q, std::span<const KVBlock<T>> prefix,
                                const KVBlock<T>& current, std::size_t n_heads) {
  if (q.shape().size() != 2) throw std::invalid_argument("attention: queries must be [c x d]");
  const std::size_t c = q.shape()[0];
  const std::size_t d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  auto check_block = [d](const KVBlock<T>& b) {
    if (b.keys.shape().size() != 2 || b.keys.shape()[1] != d || b.values.shape() != b.keys.shape()) {
      throw std::invalid_argument("attention: key/value block shape " + to_string(b.keys.shape()) +
                                  " incompatible with width " + std::to_string(d));
    }
  };
  check_block(current);
  if (current.length() != c) throw std::invalid_argument("attention: current block length differs from queries");

  std::size_t expected = prefix.empty() ? current.position_offset : prefix.front().position_offset;
  std::size_t prefix_len = 0;
  for (const auto& b : prefix) {
    check_block(b);
    if (b.position_offset != expected) {
      throw std::invalid_argument("attention: cache block at position " + std::to_string(b.position_offset) +
                                  " does not continue from position " + std::to_string(expected));
    }
    expected += b.length();
    prefix_len += b.length();
  }
  if (expected != current.position_offset) {
    throw std::invalid_argument("attention: queries start at position " + std::to_string(current.position_offset) +
                                " but the cache ends at " + std::to_string(expected));
  }

  const T scale = T(1) / std::sqrt(T(hd));
  auto out = std::make_shared<std::vector<T>>(c * d, T(0));
  auto lse = std::make_shared<std::vector<T>>(c * n_heads);

  std::vector<BlockView<T>> blocks;
  blocks.reserve(prefix.size() + 1);
  for (const auto& b : prefix) blocks.push_back({b.keys.data().data(), b.values.data().data(), b.length()});
  blocks.push_back({current.keys.data().data(), current.values.data().data(), c});

  const T* qp = q.data().data();
  std::vector<T> scores(prefix_len + c);
  for (std::size_t r = 0; r < c; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T* qrow = qp + r * d + h * hd;
      std::size_t n = 0;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        const auto& b = blocks[bi];
        const std::size_t len = bi + 1 == blocks.size() ? r + 1 : b.len;
        for (std::size_t j = 0; j < len; ++j) {
          const T s = scale * dot_n(qrow, b.keys + j * d + h * hd, hd);
          scores[n++] = s;
          mx = std::max(mx, s);
        }
      }
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      T* orow = out->data() + r * d + h * hd;
      n = 0;
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        const auto& b = blocks[bi];
        const std::size_t len = bi + 1 == blocks.size() ? r + 1 : b.len;
        for (std::size_t j = 0; j < len; ++j) {
          const T p = scores[n++] / z;
          const T* vrow = b.values + j * d + h * hd;
          for (std::size_t e = 0; e < hd; ++e) orow[e] += p * vrow[e];
        }
      }
      (*lse)[r * n_heads + h] = mx + std::log(z);
    }
  }

  const std::uint64_t pairs = static_cast<std::uint64_t>(c) * prefix_len + static_cast<std::uint64_t>(c) * (c + 1) / 2;
  const std::uint64_t per_pair = static_cast<std::uint64_t>(n_heads) * hd;

  std::vector<Value<T>> inputs{q, current.keys, current.values};
  std::vector<SavedBuffer<T>> saved{{q.buffer(), !q.is_leaf()},
                                    {current.keys.buffer(), !current.keys.is_leaf()},
                                    {current.values.buffer(), !current.values.is_leaf()},
                                    {out, true},
                                    {lse, true}};
  std::vector<std::size_t> lengths;
  for (const auto& b : prefix) {
    inputs.push_back(b.keys);
    inputs.push_back(b.values);
    saved.push_back({b.keys.buffer(), !b.keys.is_leaf()});
    saved.push_back({b.values.buffer(), !b.values.is_leaf()});
    lengths.push_back(b.length());
  }

  auto backward = [c, d, hd, n_heads, scale, lengths = std::move(lengths)](const BackwardArgs<T>& args) {
    const T* qv = args.saved[0]->data();
    const T* ov = args.saved[3]->data();
    const T* lv = args.saved[4]->data();
    const T* go = args.grad_out.data();
    T* gq = args.grad_in[0].empty() ? nullptr : args.grad_in[0].data();

    struct GradBlock {
      const T* keys;
      const T* values;
      T* gkeys;
      T* gvalues;
      std::size_t len;
    };
    std::vector<GradBlock> gb;
    gb.reserve(lengths.size() + 1);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      auto gk = args.grad_in[3 + 2 * i];
      auto gv = args.grad_in[4 + 2 * i];
      gb.push_back({args.saved[5 + 2 * i]->data(), args.saved[6 + 2 * i]->data(), gk.empty() ? nullptr : gk.data(),
                    gv.empty() ? nullptr : gv.data(), lengths[i]});
    }
    gb.push_back({args.saved[1]->data(), args.saved[2]->data(),
                  args.grad_in[1].empty() ? nullptr : args.grad_in[1].data(),
                  args.grad_in[2].empty() ? nullptr : args.grad_in[2].data(), c});

    for (std::size_t r = 0; r < c; ++r) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = r * d + h * hd;
        const T* qrow = qv + off;
        const T* dorow = go + off;
        const T lse_rh = lv[r * n_heads + h];
        const T delta = dot_n(dorow, ov + off, hd);
        for (std::size_t bi = 0; bi < gb.size(); ++bi) {
          const auto& b = gb[bi];
          const std::size_t len = bi + 1 == gb.size() ? r + 1 : b.len;
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t koff = j * d + h * hd;
            const T* krow = b.keys + koff;
            const T* vrow = b.values + koff;
            const T p = std::exp(scale * dot_n(qrow, krow, hd) - lse_rh);
            if (b.gvalues) {
              T* gv = b.gvalues + koff;
              for (std::size_t e = 0; e < hd; ++e) gv[e] += p * dorow[e];
            }
            const T ds = p * (dot_n(dorow, vrow, hd) - delta) * scale;
            if (gq) {
              T* gqrow = gq + off;
              for (std::size_t e = 0; e < hd; ++e) gqrow[e] += ds * krow[e];
            }
            if (b.gkeys) {
              T* gk = b.gkeys + koff;
              for (std::size_t e = 0; e < hd; ++e) gk[e] += ds * qrow[e];
            }
          }
        }
      }
    }
  };

  return tape.emit({OpKind::attention,
                    std::move(inputs),
                    {c, d},
                    out,
                    std::move(saved),
                    std::move(backward),
                    {pairs * per_pair * 4, pairs * per_pair * 8, pairs * per_pair * 2}});
}

template Value<float> causal_chunk_attention(Tape<float>&, const Value<float>&, std::span<const KVBlock<float>>,
                                             const KVBlock<float>&, std::size_t);
template Value<double> causal_chunk_attention(Tape<double>&, const Value<double>&, std::span<const KVBlock<double>>,
                                              const KVBlock<double>&, std::size_t);

}  // namespace chunkgrad::ops
