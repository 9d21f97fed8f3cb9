#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "chunkgrad/chunkwise.hpp"

namespace chunkgrad {

// A rebuilt cache (from_chunk, from_layer) whose graph reaches checkpoint
// (to_chunk, to_layer). Gradient relayed into the former flows to the latter.
struct CacheEdge {
  std::size_t from_chunk = 0;
  std::size_t from_layer = 0;
  std::size_t to_chunk = 0;
  std::size_t to_layer = 0;

  bool operator==(const CacheEdge&) const = default;
};

struct ChainTrace {
  std::size_t chunks = 0;
  std::size_t layers = 0;
  std::vector<CacheEdge> edges;
};

// Runs one SeCO step and records, for every rebuilt chunk and layer, which
// checkpoints its key/value graph depends on.
template <class T>
ChainTrace trace_seco_chains(const Params<T>& params, std::span<const Token> tokens, std::size_t chunk_size);

// Number of cache nodes on the longest dependency path of the trace. Every
// (chunk, layer) pair is a node, so a trace without edges gives 1.
std::size_t longest_cache_chain(const ChainTrace& trace);

}  // namespace chunkgrad
