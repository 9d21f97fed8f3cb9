#include "chunkgrad/chunkwise.hpp"

#include <numeric>

namespace chunkgrad {

std::size_t ChunkPlan::resolve(std::size_t seq_len) const {
  if (chunk_size == 0) throw std::invalid_argument("chunk_size must be at least 1");
  if (seq_len < 2) throw std::invalid_argument("sequence needs at least two tokens");
  const std::size_t k = (seq_len + chunk_size - 1) / chunk_size;
  if (num_chunks != 0 && num_chunks != k) {
    throw std::invalid_argument("num_chunks " + std::to_string(num_chunks) + " does not match " +
                                std::to_string(seq_len) + " tokens at chunk_size " + std::to_string(chunk_size));
  }
  if (budget > k) {
    throw std::invalid_argument("budget " + std::to_string(budget) + " exceeds " + std::to_string(k) + " chunks");
  }
  if (!(compensation_cap >= 1.0)) throw std::invalid_argument("compensation_cap must be at least 1");
  return k;
}

double compensation_scaler(std::size_t k, std::size_t t, double cap) {
  if (t == 0 || t > k) throw std::invalid_argument("compensation_scaler: need 1 <= t <= k");
  return std::min(static_cast<double>(k) / static_cast<double>(t), cap);
}

std::vector<std::size_t> sample_indices(std::size_t k, std::size_t t, std::mt19937_64& rng) {
  if (t > k) throw std::invalid_argument("sample_indices: t=" + std::to_string(t) + " exceeds k=" + std::to_string(k));
  std::vector<std::size_t> all(k);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> out;
  out.reserve(t);
  std::sample(all.begin(), all.end(), std::back_inserter(out), t, rng);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

template <class T>
SequenceObjective<T>::SequenceObjective(const Params<T>& params, std::span<const Token> tokens, std::size_t chunk_size)
    : params_(&params), tokens_(tokens), chunk_size_(chunk_size) {
  if (chunk_size == 0) throw std::invalid_argument("chunk_size must be at least 1");
  if (tokens.size() < 2) throw std::invalid_argument("sequence needs at least two tokens");
  k_ = (tokens.size() + chunk_size - 1) / chunk_size;
}

template <class T>
std::size_t SequenceObjective<T>::chunk_length(std::size_t j) const {
  return std::min(chunk_size_, tokens_.size() - chunk_begin(j));
}

template <class T>
ChunkForward<T, KVChunk<T>> SequenceObjective<T>::forward_chunk(Tape<T>& tape, std::size_t j,
                                                                std::span<const KVChunk<T>> prior) const {
  const std::size_t begin = chunk_begin(j);
  const std::size_t len = chunk_length(j);
  std::optional<Token> next;
  if (begin + len < tokens_.size()) next = tokens_[begin + len];
  auto out = chunkgrad::forward_chunk(tape, *params_, tokens_.subspan(begin, len), next, prior,
                                      static_cast<double>(tokens_.size() - 1));
  return {std::move(out.loss), std::move(out.cache)};
}

template <class T>
std::size_t SequenceObjective<T>::activation_bound(std::size_t j) const {
  return activation_bytes(params_->config, chunk_length(j), sizeof(T));
}

template <class T>
StepResult<T> naive_step(const Params<T>& params, std::span<const Token> tokens, const StepOptions& opts) {
  SequenceObjective<T> obj(params, tokens, tokens.size());
  return full_graph_step(obj, opts);
}

template <class T>
StepResult<T> seco_step(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                        const StepOptions& opts) {
  const std::size_t k = plan.resolve(tokens.size());
  SequenceObjective<T> obj(params, tokens, plan.chunk_size);
  const auto order = descending_indices(k);
  return chunkwise_step(obj, std::span<const std::size_t>(order), T(1), opts);
}

template <class T>
StepResult<T> spaco_step_with(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                              std::vector<std::size_t> subset, const StepOptions& opts) {
  const std::size_t k = plan.resolve(tokens.size());
  if (subset.empty() || subset.size() > k) throw std::invalid_argument("spaco subset must hold 1..k indices");
  std::sort(subset.begin(), subset.end(), std::greater<>());
  const T scaler = static_cast<T>(compensation_scaler(k, subset.size(), plan.compensation_cap));
  SequenceObjective<T> obj(params, tokens, plan.chunk_size);
  return chunkwise_step(obj, std::span<const std::size_t>(subset), scaler, opts);
}

template <class T>
StepResult<T> spaco_step(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                         std::mt19937_64& rng, const StepOptions& opts) {
  const std::size_t k = plan.resolve(tokens.size());
  return spaco_step_with(params, tokens, plan, sample_indices(k, plan.budget_for(k), rng), opts);
}

std::string_view mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::naive:
      return "naive";
    case TrainMode::seco:
      return "seco";
    case TrainMode::spaco:
      return "spaco";
  }
  return "unknown";
}

TrainMode parse_mode(std::string_view name) {
  if (name == "naive") return TrainMode::naive;
  if (name == "seco") return TrainMode::seco;
  if (name == "spaco") return TrainMode::spaco;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "' (expected naive, seco, or spaco)");
}

template <class T>
StepResult<T> run_step(TrainMode mode, const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                       std::mt19937_64& rng, const StepOptions& opts) {
  switch (mode) {
    case TrainMode::naive:
      return naive_step(params, tokens, opts);
    case TrainMode::seco:
      return seco_step(params, tokens, plan, opts);
    case TrainMode::spaco:
      return spaco_step(params, tokens, plan, rng, opts);
  }
  throw std::invalid_argument("unknown mode");
}

#define CHUNKGRAD_INSTANTIATE(T)                                                                                   \
  template class SequenceObjective<T>;                                                                            \
  template StepResult<T> naive_step(const Params<T>&, std::span<const Token>, const StepOptions&);                \
  template StepResult<T> seco_step(const Params<T>&, std::span<const Token>, const ChunkPlan&, const StepOptions&); \
  template StepResult<T> spaco_step(const Params<T>&, std::span<const Token>, const ChunkPlan&, std::mt19937_64&,   \
                                    const StepOptions&);                                                          \
  template StepResult<T> spaco_step_with(const Params<T>&, std::span<const Token>, const ChunkPlan&,               \
                                         std::vector<std::size_t>, const StepOptions&);                      \
  template StepResult<T> run_step(TrainMode, const Params<T>&, std::span<const Token>, const ChunkPlan&,            \
                                  std::mt19937_64&, const StepOptions&);

CHUNKGRAD_INSTANTIATE(float)
CHUNKGRAD_INSTANTIATE(double)

#undef CHUNKGRAD_INSTANTIATE

}  // namespace chunkgrad
