#pragma once

#include <cstddef>
#include <span>

#include "chunkgrad/tape.hpp"

namespace chunkgrad {

// Keys and values of one contiguous run of positions, [len x n_heads*head_dim].
template <class T>
struct KVBlock {
  Value<T> keys;
  Value<T> values;
  std::size_t position_offset = 0;

  std::size_t length() const { return keys.shape().at(0); }
};

namespace ops {

// Causal attention of the queries of `current` against every cached position
// in `prefix` plus the positions of `current` up to and including the query's
// own. Scores are scaled by 1/sqrt(head_dim).
//
// Only queries, current keys/values, the output, and one log-sum-exp per
// (row, head) are saved; probabilities are recomputed in backward, so saved
// bytes do not grow with the prefix length.
template <class T>
Value<T> causal_chunk_attention(Tape<T>& tape, const Value<T>& q, std::span<const KVBlock<T>> prefix,
                                const KVBlock<T>& current, std::size_t n_heads);

}  // namespace ops
}  // namespace chunkgrad
