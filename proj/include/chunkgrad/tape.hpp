#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chunkgrad/ledger.hpp"

namespace chunkgrad {

// Raised when a caller breaks an engine precondition (wrong mode, stale
// node, mismatched roots). Distinct from bad user data, which uses
// std::invalid_argument.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class DType : std::uint8_t { float32, float64 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

std::string_view dtype_name(DType dtype);

enum class Mode : std::uint8_t { recording, inference };

template <class T>
struct Hook {
  std::shared_ptr<const std::vector<T>> base;
  T scaler{};
};

template <class T>
class Tape;
template <class T>
class Value;

namespace detail {

template <class T>
struct TapeCore;

template <class T>
struct ValueState {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;
  std::vector<Hook<T>> hooks;  // leaves only; non-leaf hooks live on the node

  std::weak_ptr<TapeCore<T>> tape;
  std::size_t node = 0;
  std::uint64_t generation = 0;
  bool attached = false;
};

}  // namespace detail

// Handle to a dense row-major tensor that may be attached to a tape node.
// Copies share state, like a framework tensor handle.
template <class T>
class Value {
 public:
  Value() = default;

  static Value leaf(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Value zeros(Shape shape, bool requires_grad = false);
  static Value scalar(T x, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(state_); }
  const Shape& shape() const { return state().shape; }
  std::size_t numel() const { return state().data->size(); }
  std::size_t bytes() const { return numel() * sizeof(T); }

  std::span<const T> data() const { return *state().data; }
  // Leaves only: parameters and checkpoints are updated in place.
  std::span<T> mutable_data();
  const std::shared_ptr<std::vector<T>>& buffer() const { return state().data; }
  T item() const;

  bool requires_grad() const { return state().requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return !state().attached; }
  // Node index on the producing tape; nullopt for leaves.
  std::optional<std::size_t> node() const;

  bool has_grad() const { return state().grad.has_value(); }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();
  void clear_grad() { state().grad.reset(); }

  const void* identity() const { return state_.get(); }

 private:
  friend class Tape<T>;
  template <class U>
  friend Value<U> detach(const Value<U>&);
  template <class U>
  friend void register_hook(const Value<U>&, std::vector<U>, U);

  explicit Value(std::shared_ptr<detail::ValueState<T>> s) : state_(std::move(s)) {}
  detail::ValueState<T>& state() const;

  std::shared_ptr<detail::ValueState<T>> state_;
};

template <class T>
struct SavedBuffer {
  std::shared_ptr<const std::vector<T>> buffer;
  // Counted against the activation budget. Leaf-owned data (parameters,
  // checkpoints) is not.
  bool activation = true;
};

template <class T>
struct BackwardArgs {
  std::span<const T> grad_out;
  std::span<const std::shared_ptr<const std::vector<T>>> saved;
  // One slot per recorded input; empty when that input takes no gradient.
  std::span<const std::span<T>> grad_in;
};

template <class T>
using BackwardFn = std::function<void(const BackwardArgs<T>&)>;

struct FlopCost {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  std::uint64_t recompute = 0;
};

template <class T>
struct Root {
  Value<T> value;
  std::vector<T> seed;
};

template <class T>
struct KernelRecord {
  OpKind kind = OpKind::custom;
  std::vector<Value<T>> inputs;
  Shape shape;
  std::shared_ptr<std::vector<T>> output;
  std::vector<SavedBuffer<T>> saved;
  BackwardFn<T> backward;
  FlopCost cost;
};

// Append-only reverse-mode graph. Kernels call emit(); a node is appended only
// in recording mode and only when some input takes a gradient.
template <class T>
class Tape {
 public:
  explicit Tape(Mode mode = Mode::recording);

  Mode mode() const;
  bool recording() const { return mode() == Mode::recording; }
  void set_mode(Mode mode);

  void attach(MemoryLedger* memory, FlopLedger* flops);
  MemoryLedger* memory_ledger() const;
  FlopLedger* flop_ledger() const;

  // Appends a node unconditionally. Rejects inference mode.
  Value<T> record(KernelRecord<T> rec);
  // Records when the graph needs the result, otherwise returns a constant.
  // Forward FLOPs are charged either way.
  Value<T> emit(KernelRecord<T> rec);

  void backward(std::span<const Root<T>> roots, bool retain = false);
  void backward(const Value<T>& root, bool retain = false);

  // Drops every node, hook, and saved buffer; invalidates node identifiers.
  void free();

  std::size_t size() const;
  std::size_t live_bytes() const;
  std::size_t peak_bytes() const;
  void reset_peak();

  // Identities of the leaves reachable from `v` through recorded parents.
  std::vector<const void*> leaf_ancestors(const Value<T>& v) const;

 private:
  template <class U>
  friend void register_hook(const Value<U>&, std::vector<U>, U);

  std::shared_ptr<detail::TapeCore<T>> core_;
};

// Fresh requires-grad leaf sharing `v`'s data.
template <class T>
Value<T> detach(const Value<T>& v);

// During backward, the gradient arriving at `v` becomes
// arriving + base * scaler before it propagates further.
template <class T>
void register_hook(const Value<T>& v, std::vector<T> base, T scaler);

}  // namespace chunkgrad
