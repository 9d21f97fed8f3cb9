#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chunkgrad/attention.hpp"
#include "chunkgrad/kernels.hpp"
#include "chunkgrad/tape.hpp"

namespace chunkgrad {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 256;
  std::size_t ffn_dim = 192;
  std::size_t max_position = 8192;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return n_heads ? d_model / n_heads : 0; }

  // Throws std::invalid_argument when the fields are inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Bytes held by one recording forward of a `chunk_len`-token chunk, under the
// kernels' saved-buffer policy. Independent of how much cache precedes it.
std::size_t activation_bytes(const ModelConfig& config, std::size_t chunk_len, std::size_t dtype_size);

// Checkpointed key+value bytes per token: 2 * layers * d_model * dtype_size.
std::size_t kv_bytes_per_token(const ModelConfig& config, std::size_t dtype_size);

template <class T>
struct LayerParams {
  Value<T> attn_norm;
  Value<T> wq, wk, wv, wo;
  Value<T> ffn_norm;
  Value<T> w_gate, w_up, w_down;
};

template <class T>
struct Params {
  ModelConfig config;
  Value<T> embedding;
  std::vector<LayerParams<T>> layers;
  Value<T> final_norm;
  Value<T> head;

  // Fixed order shared by gradients, optimizers, and checkpoints.
  std::vector<Value<T>> tensors() const;
  std::vector<std::pair<std::string, Value<T>>> named_tensors() const;
  std::size_t numel() const;

  // Deep copy; handles in the copy do not alias this one.
  Params clone() const;
};

// Scaled-normal init: std 0.02, output projections 0.02/sqrt(2L), norm gains 1.
template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed);

enum class CacheOrigin : std::uint8_t { checkpoint, reconstructed };

// Per-layer keys (post-rotary) and values for one chunk, each [length x d_model].
template <class T>
struct KVChunk {
  std::vector<Value<T>> keys;
  std::vector<Value<T>> values;
  std::size_t position_offset = 0;
  std::size_t length = 0;
  CacheOrigin origin = CacheOrigin::checkpoint;

  KVBlock<T> block(std::size_t layer) const { return {keys.at(layer), values.at(layer), position_offset}; }
  // keys[0], values[0], keys[1], values[1], ...
  std::vector<Value<T>> tensors() const;
  std::size_t bytes() const;
  std::size_t end_position() const { return position_offset + length; }
};

// Ordered chunks whose positions are contiguous from the first one.
template <class T>
class CacheStore {
 public:
  void append(KVChunk<T> chunk);
  std::span<const KVChunk<T>> chunks() const { return chunks_; }
  std::size_t size() const { return chunks_.size(); }
  const KVChunk<T>& operator[](std::size_t i) const { return chunks_.at(i); }
  KVChunk<T>& operator[](std::size_t i) { return chunks_.at(i); }
  std::size_t end_position() const { return chunks_.empty() ? 0 : chunks_.back().end_position(); }
  std::size_t bytes() const;
  void clear() { chunks_.clear(); }

 private:
  std::vector<KVChunk<T>> chunks_;
};

template <class T>
struct ChunkOutput {
  Value<T> loss;
  KVChunk<T> cache;
};

// Runs one chunk against the preceding caches.
//
// The loss sums next-token cross-entropy over the chunk's predictable
// positions, divided by `normalizer` (the whole sequence's predictable token
// count), so chunk losses add up to the sequence mean. The chunk's last
// position predicts `next_token` when there is one.
//
// Recording mode returns graph-attached caches; inference mode returns them as
// detached requires-grad leaves marked as checkpoints.
template <class T>
ChunkOutput<T> forward_chunk(Tape<T>& tape, const Params<T>& params, std::span<const Token> tokens,
                             std::optional<Token> next_token, std::span<const KVChunk<T>> prior, double normalizer);

template <class T>
ChunkOutput<T> forward_chunk(Tape<T>& tape, const Params<T>& params, std::span<const Token> tokens,
                             std::optional<Token> next_token, const CacheStore<T>& cache, double normalizer);

// Mean next-token loss of the whole sequence in one inference-mode pass.
template <class T>
double sequence_loss(const Params<T>& params, std::span<const Token> tokens);

}  // namespace chunkgrad
