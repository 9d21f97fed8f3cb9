#include "chunkgrad/profile.hpp"

#include <array>
#include <charconv>
#include <stdexcept>

#include "chunkgrad/data.hpp"

namespace chunkgrad {

std::string_view op_name(OpKind kind) {
  static constexpr std::array<std::string_view, kOpKindCount> names = {
      "add",  "mul",     "scale",  "sum",     "dot",           "matmul",    "rmsnorm",
      "rope", "attention", "swiglu", "softmax", "cross_entropy", "embedding", "custom"};
  return names[static_cast<std::size_t>(kind)];
}

void MemoryLedger::allocate(Category category, std::size_t bytes) {
  auto& s = slot(category);
  s.live += bytes;
  s.peak = std::max(s.peak, s.live);
}

void MemoryLedger::release(Category category, std::size_t bytes) {
  auto& s = slot(category);
  if (bytes > s.live) throw std::logic_error("memory ledger released more bytes than it holds");
  s.live -= bytes;
}

std::size_t MemoryLedger::live_total() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.live;
  return n;
}

void FlopLedger::add_forward(OpKind kind, std::uint64_t flops) {
  totals_.forward += flops;
  families_[static_cast<std::size_t>(kind)].forward += flops;
}

void FlopLedger::add_backward(OpKind kind, std::uint64_t flops) {
  totals_.backward += flops;
  families_[static_cast<std::size_t>(kind)].backward += flops;
}

void FlopLedger::add_recompute(OpKind kind, std::uint64_t flops) {
  totals_.recompute += flops;
  families_[static_cast<std::size_t>(kind)].recompute += flops;
}

template <class T>
std::vector<ScalingRow> report_scaling(TrainMode mode, const Params<T>& params, std::span<const std::size_t> seq_lens,
                                       std::size_t chunk_size, std::size_t budget, double cap, std::uint64_t seed) {
  std::vector<ScalingRow> rows;
  for (std::size_t n : seq_lens) {
    const auto tokens = random_tokens(seed + n, n, params.config.vocab_size);
    ChunkPlan plan;
    plan.chunk_size = mode == TrainMode::naive ? n : chunk_size;
    plan.compensation_cap = cap;
    const std::size_t k = plan.resolve(n);
    plan.budget = mode == TrainMode::spaco ? std::min(budget == 0 ? k : budget, k) : 0;
    std::mt19937_64 rng(seed);
    auto run = instrument([&](const StepOptions& opts) {
      return run_step<T>(mode, params, tokens, plan, rng, opts);
    });
    const auto& rep = run.result.report;
    ScalingRow row;
    row.mode = std::string(mode_name(mode));
    row.seq_len = n;
    row.chunk_size = plan.chunk_size;
    row.budget = plan.budget_for(k);
    if (mode != TrainMode::spaco) row.budget = k;
    row.peak_act_bytes = run.memory.peak_activation_bytes();
    row.kv_bytes = run.memory.kv_cache_bytes();
    row.fwd_flops = rep.fwd_flops;
    row.bwd_flops = rep.bwd_flops + rep.recompute_flops;
    row.stage1_ms = rep.stage1_ms;
    row.stage2_ms = rep.stage2_ms;
    row.total_ms = run.timings.total_ms;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_number(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

std::string format_fixed(double x, int decimals) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::fixed, decimals);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

void write_scaling_csv(std::ostream& os, std::span<const ScalingRow> rows, bool header) {
  if (header) {
    os << "mode,seq_len,chunk_size,budget,peak_act_bytes,kv_bytes,fwd_flops,bwd_flops,stage1_ms,stage2_ms,total_ms\n";
  }
  for (const auto& r : rows) {
    os << r.mode << ',' << r.seq_len << ',' << r.chunk_size << ',' << r.budget << ',' << r.peak_act_bytes << ','
       << r.kv_bytes << ',' << r.fwd_flops << ',' << r.bwd_flops << ',' << format_fixed(r.stage1_ms, 3) << ','
       << format_fixed(r.stage2_ms, 3) << ',' << format_fixed(r.total_ms, 3) << '\n';
  }
}

template std::vector<ScalingRow> report_scaling(TrainMode, const Params<float>&, std::span<const std::size_t>,
                                                std::size_t, std::size_t, double, std::uint64_t);
template std::vector<ScalingRow> report_scaling(TrainMode, const Params<double>&, std::span<const std::size_t>,
                                                std::size_t, std::size_t, double, std::uint64_t);

}  // namespace chunkgrad
