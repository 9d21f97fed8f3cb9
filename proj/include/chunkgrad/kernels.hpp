#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "chunkgrad/tape.hpp"

namespace chunkgrad {

using Token = std::int32_t;

// Target value that contributes nothing to cross_entropy_lm.
inline constexpr Token kIgnoreTarget = -1;

// Dense kernels. Each computes its forward eagerly and, when the tape is
// recording, registers a backward rule that needs only the buffers it saves.
//
// FLOP declarations: matmul and attention are counted exactly; elementwise
// and normalization kernels declare backward at twice their forward cost.
namespace ops {

template <class T>
Value<T> add(Tape<T>& tape, const Value<T>& a, const Value<T>& b);

template <class T>
Value<T> mul(Tape<T>& tape, const Value<T>& a, const Value<T>& b);

template <class T>
Value<T> scale(Tape<T>& tape, const Value<T>& a, T factor);

template <class T>
Value<T> sum(Tape<T>& tape, const Value<T>& a);

template <class T>
Value<T> dot(Tape<T>& tape, const Value<T>& a, const Value<T>& b);

// x: [m x k], w: [k x n] -> [m x n]
template <class T>
Value<T> matmul(Tape<T>& tape, const Value<T>& x, const Value<T>& w);

// Row-wise x * gain / sqrt(mean(x^2) + eps). x: [m x n], gain: [n]
template <class T>
Value<T> rmsnorm(Tape<T>& tape, const Value<T>& x, const Value<T>& gain, double eps);

// silu(gate) * up, elementwise.
template <class T>
Value<T> swiglu(Tape<T>& tape, const Value<T>& gate, const Value<T>& up);

// Row-wise softmax of a [m x n] matrix.
template <class T>
Value<T> softmax(Tape<T>& tape, const Value<T>& x);

// Sum over rows with a target of -log softmax(logits)[target], divided by
// `normalizer`. Rows whose target is kIgnoreTarget are skipped.
template <class T>
Value<T> cross_entropy_lm(Tape<T>& tape, const Value<T>& logits, std::span<const Token> targets,
                          double normalizer);

// table: [vocab x d] -> [tokens x d]
template <class T>
Value<T> embedding(Tape<T>& tape, const Value<T>& table, std::span<const Token> tokens);

// Rotary position embedding on adjacent pairs within each head.
// x: [m x d], row r sits at absolute position `position_offset + r`.
template <class T>
Value<T> rope(Tape<T>& tape, const Value<T>& x, std::size_t n_heads, std::size_t position_offset,
              double base = 10000.0);

}  // namespace ops
}  // namespace chunkgrad
