#include "chunkgrad/chain_trace.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

namespace chunkgrad {

template <class T>
ChainTrace trace_seco_chains(const Params<T>& params, std::span<const Token> tokens, std::size_t chunk_size) {
  SequenceObjective<T> obj(params, tokens, chunk_size);
  ChainTrace trace;
  trace.chunks = obj.num_chunks();
  trace.layers = params.config.layers;

  std::set<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> seen;
  auto observer = [&](std::size_t j, const Tape<T>& tape, const KVChunk<T>& rebuilt,
                      std::span<const KVChunk<T>> checkpoints) {
    std::map<const void*, std::pair<std::size_t, std::size_t>> owner;
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      for (std::size_t l = 0; l < checkpoints[i].keys.size(); ++l) {
        owner[checkpoints[i].keys[l].identity()] = {i, l};
        owner[checkpoints[i].values[l].identity()] = {i, l};
      }
    }
    for (std::size_t l = 0; l < rebuilt.keys.size(); ++l) {
      for (const auto* v : {&rebuilt.keys[l], &rebuilt.values[l]}) {
        for (const void* leaf : tape.leaf_ancestors(*v)) {
          auto it = owner.find(leaf);
          if (it == owner.end()) continue;
          const auto [i, lp] = it->second;
          if (seen.emplace(j, l, i, lp).second) trace.edges.push_back({j, l, i, lp});
        }
      }
    }
  };

  const auto order = descending_indices(obj.num_chunks());
  chunkwise_step(obj, std::span<const std::size_t>(order), T(1), StepOptions{}, observer);
  return trace;
}

std::size_t longest_cache_chain(const ChainTrace& trace) {
  if (trace.chunks == 0 || trace.layers == 0) return 0;
  const auto id = [&](std::size_t chunk, std::size_t layer) { return chunk * trace.layers + layer; };
  std::vector<std::vector<std::size_t>> out(trace.chunks * trace.layers);
  for (const auto& e : trace.edges) {
    if (e.to_chunk >= e.from_chunk) throw std::invalid_argument("cache edges must point to earlier chunks");
    out[id(e.from_chunk, e.from_layer)].push_back(id(e.to_chunk, e.to_layer));
  }
  // Edges point to strictly earlier chunks, so ascending chunk order is topological.
  std::vector<std::size_t> len(out.size(), 1);
  std::size_t best = 1;
  for (std::size_t c = 0; c < trace.chunks; ++c) {
    for (std::size_t l = 0; l < trace.layers; ++l) {
      auto& n = len[id(c, l)];
      for (std::size_t to : out[id(c, l)]) n = std::max(n, len[to] + 1);
      best = std::max(best, n);
    }
  }
  return best;
}

template ChainTrace trace_seco_chains(const Params<float>&, std::span<const Token>, std::size_t);
template ChainTrace trace_seco_chains(const Params<double>&, std::span<const Token>, std::size_t);

}  // namespace chunkgrad
