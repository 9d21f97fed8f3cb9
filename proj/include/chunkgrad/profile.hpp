#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "chunkgrad/chunkwise.hpp"
#include "chunkgrad/ledger.hpp"

namespace chunkgrad {

struct Timings {
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
  double total_ms = 0.0;
};

template <class R>
struct Instrumented {
  R result;
  MemoryLedger memory;
  FlopLedger flops;
  Timings timings;
};

// Runs step_fn(const StepOptions&) against fresh ledgers.
template <class Fn>
auto instrument(Fn&& step_fn) {
  using R = std::invoke_result_t<Fn, const StepOptions&>;
  MemoryLedger memory;
  FlopLedger flops;
  StepOptions opts;
  opts.memory = &memory;
  opts.flops = &flops;
  const auto t0 = std::chrono::steady_clock::now();
  R result = step_fn(static_cast<const StepOptions&>(opts));
  Timings timings;
  timings.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if constexpr (requires { result.report.stage1_ms; }) {
    timings.stage1_ms = result.report.stage1_ms;
    timings.stage2_ms = result.report.stage2_ms;
  }
  return Instrumented<R>{std::move(result), memory, flops, timings};
}

struct ScalingRow {
  std::string mode;
  std::size_t seq_len = 0;
  std::size_t chunk_size = 0;
  std::size_t budget = 0;
  std::size_t peak_act_bytes = 0;
  std::size_t kv_bytes = 0;
  std::uint64_t fwd_flops = 0;
  std::uint64_t bwd_flops = 0;  // backward rules plus their recomputation
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
  double total_ms = 0.0;
};

// One instrumented step per sequence length on uniform random tokens.
template <class T>
std::vector<ScalingRow> report_scaling(TrainMode mode, const Params<T>& params, std::span<const std::size_t> seq_lens,
                                       std::size_t chunk_size, std::size_t budget, double cap, std::uint64_t seed);

void write_scaling_csv(std::ostream& os, std::span<const ScalingRow> rows, bool header = true);

// Locale-independent shortest round-trip form.
std::string format_number(double x);
// Fixed notation with `decimals` digits after the point.
std::string format_fixed(double x, int decimals);

}  // namespace chunkgrad
