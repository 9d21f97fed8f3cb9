#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chunkgrad/ledger.hpp"
#include "chunkgrad/model.hpp"
#include "chunkgrad/tape.hpp"

namespace chunkgrad {

inline constexpr double kNoCap = std::numeric_limits<double>::infinity();

struct ChunkPlan {
  std::size_t chunk_size = 64;
  std::size_t num_chunks = 0;  // 0: derived from the sequence length
  std::size_t budget = 0;      // t; 0: every chunk
  double compensation_cap = 2.0;
  std::uint64_t seed = 0;

  // Number of chunks for a sequence of `seq_len` tokens (last chunk may be
  // short). Throws std::invalid_argument on inconsistent fields.
  std::size_t resolve(std::size_t seq_len) const;
  std::size_t budget_for(std::size_t k) const { return budget == 0 ? k : budget; }
};

// min(k/t, cap). Pass kNoCap to disable the cap.
double compensation_scaler(std::size_t k, std::size_t t, double cap);

// t distinct indices in [0, k), uniform over subsets, sorted descending.
std::vector<std::size_t> sample_indices(std::size_t k, std::size_t t, std::mt19937_64& rng);

struct StepReport {
  std::vector<double> chunk_losses;
  double loss = 0.0;
  std::vector<std::size_t> selected;  // processing order, descending
  double grad_norm = 0.0;
  std::size_t peak_act_bytes = 0;
  std::size_t activation_bound = 0;  // largest single-chunk bound checked, 0 when unchecked
  std::size_t kv_bytes = 0;
  std::uint64_t fwd_flops = 0;
  std::uint64_t bwd_flops = 0;
  std::uint64_t recompute_flops = 0;
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
  std::size_t reconstructed = 0;

  std::uint64_t total_flops() const { return fwd_flops + bwd_flops + recompute_flops; }
  double total_ms() const { return stage1_ms + stage2_ms; }
};

template <class T>
struct StepResult {
  double loss = 0.0;
  std::vector<std::vector<T>> grads;  // parallel to the objective's parameters
  StepReport report;
};

struct StepOptions {
  MemoryLedger* memory = nullptr;
  FlopLedger* flops = nullptr;
  bool enforce_bound = true;
  double bound_slack = 0.05;
};

template <class T, class State>
struct ChunkForward {
  Value<T> loss;
  State state;
};

// Installs one hook per tensor of `reconstructed`, injecting the gradient
// accumulated on the matching checkpoint tensor (zeros if none) times `scaler`.
template <class State, class T>
void relay_gradients(const State& checkpoint, const State& reconstructed, T scaler) {
  const auto src = checkpoint.tensors();
  const auto dst = reconstructed.tensors();
  if (src.size() != dst.size()) throw std::invalid_argument("relay_gradients: tensor count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].shape() != dst[i].shape()) {
      throw std::invalid_argument("relay_gradients: shape mismatch " + to_string(src[i].shape()) + " vs " +
                                  to_string(dst[i].shape()));
    }
    std::vector<T> base(dst[i].numel(), T(0));
    if (src[i].has_grad()) {
      auto g = src[i].grad();
      std::copy(g.begin(), g.end(), base.begin());
    }
    register_hook(dst[i], std::move(base), scaler);
  }
}

struct NoObserver {
  template <class... Args>
  void operator()(Args&&...) const {}
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <class T>
std::size_t total_bytes(const std::vector<Value<T>>& vs) {
  std::size_t n = 0;
  for (const auto& v : vs) n += v.bytes();
  return n;
}

// Ledger plumbing shared by both drivers: local ledgers when the caller passes
// none, per-step FLOP deltas, and param/grad bytes held for the step.
template <class T>
struct StepScope {
  MemoryLedger local_memory;
  FlopLedger local_flops;
  MemoryLedger* memory;
  FlopLedger* flops;
  FlopCounts start;
  std::size_t param_bytes;

  StepScope(const StepOptions& opts, const std::vector<Value<T>>& params)
      : memory(opts.memory ? opts.memory : &local_memory),
        flops(opts.flops ? opts.flops : &local_flops),
        start(flops->totals()),
        param_bytes(total_bytes(params)) {
    memory->allocate(MemoryLedger::Category::param, param_bytes);
    memory->allocate(MemoryLedger::Category::grad, param_bytes);
    for (auto p : params) p.clear_grad();
  }

  void finish(StepReport& report) {
    const auto& now = flops->totals();
    report.fwd_flops = now.forward - start.forward;
    report.bwd_flops = now.backward - start.backward;
    report.recompute_flops = now.recompute - start.recompute;
    memory->release(MemoryLedger::Category::grad, param_bytes);
    memory->release(MemoryLedger::Category::param, param_bytes);
  }
};

template <class T>
void collect_grads(const std::vector<Value<T>>& params, StepResult<T>& out) {
  double sq = 0.0;
  out.grads.clear();
  out.grads.reserve(params.size());
  for (auto p : params) {
    std::vector<T> g(p.numel(), T(0));
    if (p.has_grad()) {
      auto src = p.grad();
      std::copy(src.begin(), src.end(), g.begin());
    }
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
    out.grads.push_back(std::move(g));
    p.clear_grad();
  }
  out.report.grad_norm = std::sqrt(sq);
}

}  // namespace detail

// An Objective exposes:
//   using scalar_type; using state_type;   (state_type has tensors())
//   std::size_t num_chunks() const;
//   std::vector<Value<T>> parameters() const;
//   ChunkForward<T, state_type> forward_chunk(Tape<T>&, std::size_t j, std::span<const state_type> prior) const;
//   std::size_t activation_bound(std::size_t j) const;   bytes of one recording forward, 0 if unknown

// Every chunk recorded on one graph, caches kept attached; one backward over
// all chunk losses. The exactness reference.
template <class Objective>
StepResult<typename Objective::scalar_type> full_graph_step(const Objective& obj, const StepOptions& opts = {}) {
  using T = typename Objective::scalar_type;
  using State = typename Objective::state_type;
  const auto params = obj.parameters();
  detail::StepScope<T> scope(opts, params);
  StepResult<T> out;
  auto& rep = out.report;
  const std::size_t k = obj.num_chunks();

  const auto t0 = detail::Clock::now();
  Tape<T> tape(Mode::recording);
  tape.attach(scope.memory, scope.flops);
  std::vector<State> states;
  std::vector<Root<T>> roots;
  states.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    auto fwd = obj.forward_chunk(tape, j, std::span<const State>(states));
    rep.chunk_losses.push_back(static_cast<double>(fwd.loss.item()));
    roots.push_back({fwd.loss, std::vector<T>(1, T(1))});
    states.push_back(std::move(fwd.state));
  }
  rep.peak_act_bytes = tape.peak_bytes();
  tape.backward(roots);
  rep.stage2_ms = detail::ms_since(t0);

  for (double x : rep.chunk_losses) rep.loss += x;
  out.loss = rep.loss;
  rep.reconstructed = k;
  detail::collect_grads(params, out);
  scope.finish(rep);
  return out;
}

// Stage 1 runs every chunk in inference mode and keeps detached checkpoints.
// Stage 2 rebuilds the chunks in `selected` (descending), relays each
// checkpoint's accumulated gradient into the rebuilt cache with `scaler`, and
// backpropagates one chunk graph at a time.
template <class Objective, class Observer = NoObserver>
StepResult<typename Objective::scalar_type> chunkwise_step(const Objective& obj,
                                                           std::span<const std::size_t> selected,
                                                           typename Objective::scalar_type scaler,
                                                           const StepOptions& opts = {}, Observer&& observer = {}) {
  using T = typename Objective::scalar_type;
  using State = typename Objective::state_type;
  const std::size_t k = obj.num_chunks();
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (selected[i] >= k) throw std::invalid_argument("selected chunk index out of range");
    if (i > 0 && selected[i] >= selected[i - 1]) {
      throw std::invalid_argument("selected chunk indices must be distinct and descending");
    }
  }

  const auto params = obj.parameters();
  detail::StepScope<T> scope(opts, params);
  StepResult<T> out;
  auto& rep = out.report;
  rep.selected.assign(selected.begin(), selected.end());

  Tape<T> tape(Mode::inference);
  tape.attach(scope.memory, scope.flops);

  auto t0 = detail::Clock::now();
  std::vector<State> checkpoints;
  checkpoints.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    auto fwd = obj.forward_chunk(tape, j, std::span<const State>(checkpoints));
    rep.chunk_losses.push_back(static_cast<double>(fwd.loss.item()));
    checkpoints.push_back(std::move(fwd.state));
  }
  for (const auto& cp : checkpoints) {
    for (const auto& v : cp.tensors()) rep.kv_bytes += v.bytes();
  }
  scope.memory->allocate(MemoryLedger::Category::kv_cache, rep.kv_bytes);
  rep.stage1_ms = detail::ms_since(t0);

  t0 = detail::Clock::now();
  tape.set_mode(Mode::recording);
  for (std::size_t j : selected) {
    if (tape.live_bytes() != 0) throw std::logic_error("chunk graph still live before reconstruction");
    tape.reset_peak();
    auto fwd = obj.forward_chunk(tape, j, std::span<const State>(checkpoints.data(), j));
    observer(j, std::as_const(tape), std::as_const(fwd.state), std::span<const State>(checkpoints.data(), j));

    const std::size_t bound = obj.activation_bound(j);
    if (opts.enforce_bound && bound > 0) {
      rep.activation_bound = std::max(rep.activation_bound, bound);
      if (static_cast<double>(tape.live_bytes()) > (1.0 + opts.bound_slack) * static_cast<double>(bound)) {
        throw std::logic_error("chunk " + std::to_string(j) + " holds " + std::to_string(tape.live_bytes()) +
                               " activation bytes, above the one-chunk bound " + std::to_string(bound));
      }
    }
    rep.peak_act_bytes = std::max(rep.peak_act_bytes, tape.peak_bytes());

    relay_gradients(checkpoints[j], fwd.state, scaler);
    Root<T> root{fwd.loss, std::vector<T>(1, T(1))};
    tape.backward(std::span<const Root<T>>(&root, 1));
    ++rep.reconstructed;
  }
  rep.stage2_ms = detail::ms_since(t0);
  scope.memory->release(MemoryLedger::Category::kv_cache, rep.kv_bytes);

  for (double x : rep.chunk_losses) rep.loss += x;
  out.loss = rep.loss;
  detail::collect_grads(params, out);
  scope.finish(rep);
  return out;
}

inline std::vector<std::size_t> descending_indices(std::size_t k) {
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = k - 1 - i;
  return idx;
}

// Transformer objective over one token sequence split into chunks.
template <class T>
class SequenceObjective {
 public:
  using scalar_type = T;
  using state_type = KVChunk<T>;

  SequenceObjective(const Params<T>& params, std::span<const Token> tokens, std::size_t chunk_size);

  std::size_t num_chunks() const { return k_; }
  std::vector<Value<T>> parameters() const { return params_->tensors(); }
  ChunkForward<T, KVChunk<T>> forward_chunk(Tape<T>& tape, std::size_t j, std::span<const KVChunk<T>> prior) const;
  std::size_t activation_bound(std::size_t j) const;
  std::size_t chunk_begin(std::size_t j) const { return j * chunk_size_; }
  std::size_t chunk_length(std::size_t j) const;

 private:
  const Params<T>* params_;
  std::span<const Token> tokens_;
  std::size_t chunk_size_;
  std::size_t k_;
};

template <class T>
StepResult<T> naive_step(const Params<T>& params, std::span<const Token> tokens, const StepOptions& opts = {});

template <class T>
StepResult<T> seco_step(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                        const StepOptions& opts = {});

// Uses `rng` to draw the budgeted subset; plan.seed is not consulted here.
template <class T>
StepResult<T> spaco_step(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                         std::mt19937_64& rng, const StepOptions& opts = {});

enum class TrainMode { naive, seco, spaco };

std::string_view mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);

// Dispatches one step of `mode`; rng is only drawn from for spaco.
template <class T>
StepResult<T> run_step(TrainMode mode, const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                       std::mt19937_64& rng, const StepOptions& opts = {});

// SpaCO stage 2 restricted to a caller-chosen subset (any order; processed descending).
template <class T>
StepResult<T> spaco_step_with(const Params<T>& params, std::span<const Token> tokens, const ChunkPlan& plan,
                              std::vector<std::size_t> subset, const StepOptions& opts = {});

}  // namespace chunkgrad
