#include "chunkgrad/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace chunkgrad {

void ModelConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("model needs at least one layer");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model must equal n_heads * head_dim");
  }
  if (head_dim() % 2 != 0) throw std::invalid_argument("head_dim must be even for rotary embeddings");
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be at least 2");
  if (ffn_dim == 0) throw std::invalid_argument("ffn_dim must be positive");
  if (!(norm_eps > 0.0)) throw std::invalid_argument("norm_eps must be positive");
  if (max_position == 0) throw std::invalid_argument("max_position must be positive");
}

std::size_t activation_bytes(const ModelConfig& cfg, std::size_t c, std::size_t dtype_size) {
  const std::size_t d = cfg.d_model;
  const std::size_t per_layer = 8 * c * d + 3 * c * cfg.ffn_dim + 2 * c + c * cfg.n_heads;
  return dtype_size * (cfg.layers * per_layer + 2 * c * d + c + c * cfg.vocab_size);
}

std::size_t kv_bytes_per_token(const ModelConfig& cfg, std::size_t dtype_size) {
  return 2 * cfg.layers * cfg.d_model * dtype_size;
}

template <class T>
std::vector<std::pair<std::string, Value<T>>> Params<T>::named_tensors() const {
  std::vector<std::pair<std::string, Value<T>>> out;
  out.emplace_back("embedding", embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "attn_norm", p.attn_norm);
    out.emplace_back(pre + "wq", p.wq);
    out.emplace_back(pre + "wk", p.wk);
    out.emplace_back(pre + "wv", p.wv);
    out.emplace_back(pre + "wo", p.wo);
    out.emplace_back(pre + "ffn_norm", p.ffn_norm);
    out.emplace_back(pre + "w_gate", p.w_gate);
    out.emplace_back(pre + "w_up", p.w_up);
    out.emplace_back(pre + "w_down", p.w_down);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("head", head);
  return out;
}

template <class T>
std::vector<Value<T>> Params<T>::tensors() const {
  std::vector<Value<T>> out;
  for (auto& [name, v] : named_tensors()) out.push_back(v);
  return out;
}

template <class T>
std::size_t Params<T>::numel() const {
  std::size_t n = 0;
  for (const auto& v : tensors()) n += v.numel();
  return n;
}

template <class T>
Params<T> Params<T>::clone() const {
  auto copy = [](const Value<T>& v) {
    auto d = v.data();
    return Value<T>::leaf(v.shape(), std::vector<T>(d.begin(), d.end()), v.requires_grad());
  };
  Params<T> out;
  out.config = config;
  out.embedding = copy(embedding);
  for (const auto& p : layers) {
    out.layers.push_back({copy(p.attn_norm), copy(p.wq), copy(p.wk), copy(p.wv), copy(p.wo), copy(p.ffn_norm),
                          copy(p.w_gate), copy(p.w_up), copy(p.w_down)});
  }
  out.final_norm = copy(final_norm);
  out.head = copy(head);
  return out;
}

template <class T>
Params<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_base = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  auto matrix = [&](std::size_t rows, std::size_t cols, double stddev) {
    std::vector<T> data(rows * cols);
    for (auto& x : data) x = static_cast<T>(normal(rng) * stddev);
    return Value<T>::leaf({rows, cols}, std::move(data), true);
  };
  auto ones = [](std::size_t n) { return Value<T>::leaf({n}, std::vector<T>(n, T(1)), true); };

  const std::size_t d = cfg.d_model;
  Params<T> p;
  p.config = cfg;
  p.embedding = matrix(cfg.vocab_size, d, std_base);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams<T> lp;
    lp.attn_norm = ones(d);
    lp.wq = matrix(d, d, std_base);
    lp.wk = matrix(d, d, std_base);
    lp.wv = matrix(d, d, std_base);
    lp.wo = matrix(d, d, std_out);
    lp.ffn_norm = ones(d);
    lp.w_gate = matrix(d, cfg.ffn_dim, std_base);
    lp.w_up = matrix(d, cfg.ffn_dim, std_base);
    lp.w_down = matrix(cfg.ffn_dim, d, std_out);
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = ones(d);
  p.head = matrix(d, cfg.vocab_size, std_base);
  return p;
}

template <class T>
std::vector<Value<T>> KVChunk<T>::tensors() const {
  std::vector<Value<T>> out;
  out.reserve(keys.size() * 2);
  for (std::size_t l = 0; l < keys.size(); ++l) {
    out.push_back(keys[l]);
    out.push_back(values[l]);
  }
  return out;
}

template <class T>
std::size_t KVChunk<T>::bytes() const {
  std::size_t n = 0;
  for (const auto& v : tensors()) n += v.bytes();
  return n;
}

template <class T>
void CacheStore<T>::append(KVChunk<T> chunk) {
  if (!chunks_.empty()) {
    const auto& last = chunks_.back();
    if (chunk.position_offset != last.end_position()) {
      throw std::invalid_argument("cache chunk at position " + std::to_string(chunk.position_offset) +
                                  " does not continue from " + std::to_string(last.end_position()));
    }
    if (chunk.keys.size() != last.keys.size()) throw std::invalid_argument("cache chunk layer count differs");
  }
  if (chunk.keys.size() != chunk.values.size()) throw std::invalid_argument("cache chunk keys/values mismatch");
  for (std::size_t l = 0; l < chunk.keys.size(); ++l) {
    if (chunk.keys[l].shape().at(0) != chunk.length || chunk.values[l].shape().at(0) != chunk.length) {
      throw std::invalid_argument("cache chunk layers disagree on length");
    }
  }
  chunks_.push_back(std::move(chunk));
}

template <class T>
std::size_t CacheStore<T>::bytes() const {
  std::size_t n = 0;
  for (const auto& c : chunks_) n += c.bytes();
  return n;
}

template <class T>
ChunkOutput<T> forward_chunk(Tape<T>& tape, const Params<T>& params, std::span<const Token> tokens,
                             std::optional<Token> next_token, std::span<const KVChunk<T>> prior, double normalizer) {
  const auto& cfg = params.config;
  const std::size_t c = tokens.size();
  if (c == 0) throw std::invalid_argument("forward_chunk: empty chunk");
  const std::size_t offset = prior.empty() ? 0 : prior.back().end_position();
  if (!prior.empty() && prior.front().position_offset != 0) {
    throw std::invalid_argument("forward_chunk: cache must start at position 0");
  }
  for (std::size_t i = 1; i < prior.size(); ++i) {
    if (prior[i].position_offset != prior[i - 1].end_position()) {
      throw std::invalid_argument("forward_chunk: cache positions are not contiguous");
    }
  }
  for (const auto& chunk : prior) {
    if (chunk.keys.size() != cfg.layers) throw std::invalid_argument("forward_chunk: cache layer count mismatch");
  }
  if (offset + c > cfg.max_position) {
    throw std::invalid_argument("forward_chunk: position " + std::to_string(offset + c) + " exceeds max_position");
  }
  if (next_token && (*next_token < 0 || static_cast<std::size_t>(*next_token) >= cfg.vocab_size)) {
    throw std::out_of_range("forward_chunk: next token outside vocabulary");
  }

  KVChunk<T> cache;
  cache.position_offset = offset;
  cache.length = c;
  cache.origin = tape.recording() ? CacheOrigin::reconstructed : CacheOrigin::checkpoint;

  std::vector<KVBlock<T>> blocks(prior.size());
  Value<T> h = ops::embedding(tape, params.embedding, tokens);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& p = params.layers[l];
    Value<T> a = ops::rmsnorm(tape, h, p.attn_norm, cfg.norm_eps);
    Value<T> q = ops::rope(tape, ops::matmul(tape, a, p.wq), cfg.n_heads, offset, cfg.rope_base);
    Value<T> k = ops::rope(tape, ops::matmul(tape, a, p.wk), cfg.n_heads, offset, cfg.rope_base);
    Value<T> v = ops::matmul(tape, a, p.wv);
    for (std::size_t i = 0; i < prior.size(); ++i) blocks[i] = prior[i].block(l);
    Value<T> o = ops::causal_chunk_attention<T>(tape, q, blocks, KVBlock<T>{k, v, offset}, cfg.n_heads);
    h = ops::add(tape, h, ops::matmul(tape, o, p.wo));
    Value<T> b = ops::rmsnorm(tape, h, p.ffn_norm, cfg.norm_eps);
    Value<T> ff = ops::swiglu(tape, ops::matmul(tape, b, p.w_gate), ops::matmul(tape, b, p.w_up));
    h = ops::add(tape, h, ops::matmul(tape, ff, p.w_down));
    if (tape.recording()) {
      cache.keys.push_back(std::move(k));
      cache.values.push_back(std::move(v));
    } else {
      cache.keys.push_back(detach(k));
      cache.values.push_back(detach(v));
    }
  }
  Value<T> hf = ops::rmsnorm(tape, h, params.final_norm, cfg.norm_eps);
  Value<T> logits = ops::matmul(tape, hf, params.head);

  std::vector<Token> targets(c);
  for (std::size_t r = 0; r + 1 < c; ++r) targets[r] = tokens[r + 1];
  targets[c - 1] = next_token.value_or(kIgnoreTarget);
  Value<T> loss = ops::cross_entropy_lm(tape, logits, targets, normalizer);
  return {std::move(loss), std::move(cache)};
}

template <class T>
ChunkOutput<T> forward_chunk(Tape<T>& tape, const Params<T>& params, std::span<const Token> tokens,
                             std::optional<Token> next_token, const CacheStore<T>& cache, double normalizer) {
  return forward_chunk(tape, params, tokens, next_token, cache.chunks(), normalizer);
}

template <class T>
double sequence_loss(const Params<T>& params, std::span<const Token> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("sequence_loss: need at least two tokens");
  Tape<T> tape(Mode::inference);
  auto out = forward_chunk<T>(tape, params, tokens, std::nullopt, std::span<const KVChunk<T>>{},
                              static_cast<double>(tokens.size() - 1));
  return static_cast<double>(out.loss.item());
}

#define CHUNKGRAD_INSTANTIATE(T)                                                                              \
  template struct Params<T>;                                                                                 \
  template struct KVChunk<T>;                                                                                \
  template class CacheStore<T>;                                                                              \
  template Params<T> init_params(const ModelConfig&, std::uint64_t);                                         \
  template ChunkOutput<T> forward_chunk(Tape<T>&, const Params<T>&, std::span<const Token>, std::optional<Token>, \
                                        std::span<const KVChunk<T>>, double);                                \
  template ChunkOutput<T> forward_chunk(Tape<T>&, const Params<T>&, std::span<const Token>, std::optional<Token>, \
                                        const CacheStore<T>&, double);                                       \
  template double sequence_loss(const Params<T>&, std::span<const Token>);

CHUNKGRAD_INSTANTIATE(float)
CHUNKGRAD_INSTANTIATE(double)

#undef CHUNKGRAD_INSTANTIATE

}  // namespace chunkgrad
