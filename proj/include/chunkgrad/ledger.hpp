#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace chunkgrad {

// Operation tag carried by every recorded graph node. Doubles as the kernel
// family key for FLOP accounting.
enum class OpKind : std::uint8_t {
  add,
  mul,
  scale,
  sum,
  dot,
  matmul,
  rmsnorm,
  rope,
  attention,
  swiglu,
  softmax,
  cross_entropy,
  embedding,
  custom,
};

inline constexpr std::size_t kOpKindCount = static_cast<std::size_t>(OpKind::custom) + 1;

std::string_view op_name(OpKind kind);

// Byte accounting for one training step. Every buffer belongs to exactly one
// category.
class MemoryLedger {
 public:
  enum class Category : std::uint8_t { activation, kv_cache, param, grad };

  void allocate(Category category, std::size_t bytes);
  void release(Category category, std::size_t bytes);

  std::size_t live(Category category) const { return slot(category).live; }
  std::size_t peak(Category category) const { return slot(category).peak; }

  std::size_t live_activation_bytes() const { return live(Category::activation); }
  std::size_t peak_activation_bytes() const { return peak(Category::activation); }
  std::size_t kv_cache_bytes() const { return peak(Category::kv_cache); }
  std::size_t param_bytes() const { return peak(Category::param); }
  std::size_t grad_bytes() const { return peak(Category::grad); }

  // Sum of live bytes over every category.
  std::size_t live_total() const;

 private:
  struct Slot {
    std::size_t live = 0;
    std::size_t peak = 0;
  };
  const Slot& slot(Category c) const { return slots_[static_cast<std::size_t>(c)]; }
  Slot& slot(Category c) { return slots_[static_cast<std::size_t>(c)]; }

  std::array<Slot, 4> slots_{};
};

struct FlopCounts {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  std::uint64_t recompute = 0;

  std::uint64_t total() const { return forward + backward + recompute; }
};

// Declared FLOP costs, split by phase and kernel family. `recompute` holds work
// a backward rule redoes from saved state instead of reading a stored buffer.
class FlopLedger {
 public:
  void add_forward(OpKind kind, std::uint64_t flops);
  void add_backward(OpKind kind, std::uint64_t flops);
  void add_recompute(OpKind kind, std::uint64_t flops);

  std::uint64_t forward() const { return totals_.forward; }
  std::uint64_t backward() const { return totals_.backward; }
  std::uint64_t recompute() const { return totals_.recompute; }
  std::uint64_t total() const { return totals_.total(); }

  const FlopCounts& family(OpKind kind) const { return families_[static_cast<std::size_t>(kind)]; }
  const FlopCounts& totals() const { return totals_; }

 private:
  FlopCounts totals_{};
  std::array<FlopCounts, kOpKindCount> families_{};
};

}  // namespace chunkgrad
