#include "chunkgrad/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace chunkgrad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view dtype_name(DType dtype) {
  return dtype == DType::float32 ? "float32" : "float64";
}

namespace detail {

template <class T>
struct Parent {
  std::optional<std::size_t> node;            // non-leaf input
  std::shared_ptr<ValueState<T>> leaf;        // requires-grad leaf input
  std::size_t numel = 0;
};

template <class T>
struct Node {
  OpKind kind = OpKind::custom;
  std::vector<Parent<T>> parents;
  std::vector<std::shared_ptr<const std::vector<T>>> saved;
  BackwardFn<T> backward;
  std::size_t out_numel = 0;
  std::optional<std::vector<T>> grad;
  std::vector<Hook<T>> hooks;
  FlopCost cost;
};

template <class T>
struct TapeCore {
  Mode mode = Mode::recording;
  std::vector<Node<T>> nodes;
  std::uint64_t generation = 1;

  struct SavedRef {
    std::size_t refs = 0;
    std::size_t bytes = 0;
  };
  std::unordered_map<const void*, SavedRef> saved_refs;
  std::size_t live = 0;
  std::size_t peak = 0;

  MemoryLedger* memory = nullptr;
  FlopLedger* flops = nullptr;

  void retain(const std::shared_ptr<const std::vector<T>>& buf) {
    auto& ref = saved_refs[buf.get()];
    if (ref.refs++ == 0) {
      ref.bytes = buf->size() * sizeof(T);
      live += ref.bytes;
      peak = std::max(peak, live);
      if (memory) memory->allocate(MemoryLedger::Category::activation, ref.bytes);
    }
  }

  void release_all() {
    if (memory) memory->release(MemoryLedger::Category::activation, live);
    saved_refs.clear();
    live = 0;
  }
};

}  // namespace detail

// ---------------------------------------------------------------- Value

template <class T>
Value<T> Value<T>::leaf(Shape shape, std::vector<T> data, bool requires_grad) {
  if (chunkgrad::numel(shape) != data.size()) {
    throw std::invalid_argument("leaf data size " + std::to_string(data.size()) +
                                " does not match shape " + to_string(shape));
  }
  auto s = std::make_shared<detail::ValueState<T>>();
  s->shape = std::move(shape);
  s->data = std::make_shared<std::vector<T>>(std::move(data));
  s->requires_grad = requires_grad;
  return Value(std::move(s));
}

template <class T>
Value<T> Value<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = chunkgrad::numel(shape);
  return leaf(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <class T>
Value<T> Value<T>::scalar(T x, bool requires_grad) {
  return leaf({}, {x}, requires_grad);
}

template <class T>
detail::ValueState<T>& Value<T>::state() const {
  if (!state_) throw ContractViolation("use of an undefined Value");
  return *state_;
}

template <class T>
std::span<T> Value<T>::mutable_data() {
  if (!is_leaf()) throw ContractViolation("mutable_data() on a graph-attached value");
  return *state().data;
}

template <class T>
T Value<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on a value of shape " + to_string(shape()));
  return (*state().data)[0];
}

template <class T>
void Value<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractViolation("requires_grad can only be toggled on leaves");
  state().requires_grad = flag;
}

template <class T>
std::optional<std::size_t> Value<T>::node() const {
  const auto& s = state();
  if (!s.attached) return std::nullopt;
  auto core = s.tape.lock();
  if (!core || core->generation != s.generation) return std::nullopt;
  return s.node;
}

template <class T>
std::span<const T> Value<T>::grad() const {
  const auto& g = state().grad;
  if (!g) return {};
  return *g;
}

template <class T>
std::span<T> Value<T>::mutable_grad() {
  auto& g = state().grad;
  if (!g) g.emplace(numel(), T(0));
  return *g;
}

template <class T>
void Value<T>::zero_grad() {
  auto& g = state().grad;
  if (g) {
    std::fill(g->begin(), g->end(), T(0));
  } else {
    g.emplace(numel(), T(0));
  }
}

template <class T>
Value<T> detach(const Value<T>& v) {
  auto s = std::make_shared<detail::ValueState<T>>();
  s->shape = v.shape();
  s->data = v.buffer();
  s->requires_grad = true;
  return Value<T>(std::move(s));
}

template <class T>
void register_hook(const Value<T>& v, std::vector<T> base, T scaler) {
  if (base.size() != v.numel()) {
    throw std::invalid_argument("hook base has " + std::to_string(base.size()) +
                                " elements, value has shape " + to_string(v.shape()));
  }
  Hook<T> hook{std::make_shared<const std::vector<T>>(std::move(base)), scaler};
  auto& s = v.state();
  if (!s.attached) {
    s.hooks.push_back(std::move(hook));
    return;
  }
  auto core = s.tape.lock();
  if (!core || core->generation != s.generation) {
    throw ContractViolation("register_hook on a value whose graph was freed");
  }
  core->nodes[s.node].hooks.push_back(std::move(hook));
}

// ---------------------------------------------------------------- Tape

template <class T>
Tape<T>::Tape(Mode mode) : core_(std::make_shared<detail::TapeCore<T>>()) {
  core_->mode = mode;
}

template <class T>
Mode Tape<T>::mode() const {
  return core_->mode;
}

template <class T>
void Tape<T>::set_mode(Mode mode) {
  core_->mode = mode;
}

template <class T>
void Tape<T>::attach(MemoryLedger* memory, FlopLedger* flops) {
  core_->memory = memory;
  core_->flops = flops;
}

template <class T>
MemoryLedger* Tape<T>::memory_ledger() const {
  return core_->memory;
}

template <class T>
FlopLedger* Tape<T>::flop_ledger() const {
  return core_->flops;
}

namespace {

template <class T>
void check_finite([[maybe_unused]] const std::vector<T>& data, [[maybe_unused]] OpKind kind) {
#ifndef NDEBUG
  for (T x : data) {
    if (!std::isfinite(x)) {
      throw std::runtime_error("non-finite output from " + std::string(op_name(kind)));
    }
  }
#endif
}

}  // namespace

template <class T>
Value<T> Tape<T>::record(KernelRecord<T> rec) {
  auto& core = *core_;
  if (core.mode != Mode::recording) {
    throw ContractViolation(std::string("cannot record ") + std::string(op_name(rec.kind)) +
                            " while the tape is in inference mode");
  }
  if (!rec.output || rec.output->size() != numel(rec.shape)) {
    throw std::invalid_argument("kernel output does not match its declared shape");
  }
  check_finite(*rec.output, rec.kind);

  detail::Node<T> node;
  node.kind = rec.kind;
  node.out_numel = rec.output->size();
  node.backward = std::move(rec.backward);
  node.cost = rec.cost;
  node.parents.reserve(rec.inputs.size());
  for (const auto& in : rec.inputs) {
    auto& st = in.state();
    detail::Parent<T> p;
    p.numel = st.data->size();
    if (st.attached) {
      auto owner = st.tape.lock();
      if (owner != core_ || st.generation != core.generation) {
        throw ContractViolation("input belongs to another tape or to a freed graph");
      }
      p.node = st.node;
    } else if (st.requires_grad) {
      p.leaf = in.state_;
    }
    node.parents.push_back(std::move(p));
  }
  node.saved.reserve(rec.saved.size());
  for (auto& s : rec.saved) {
    if (s.activation) core.retain(s.buffer);
    node.saved.push_back(std::move(s.buffer));
  }
  core.nodes.push_back(std::move(node));

  auto st = std::make_shared<detail::ValueState<T>>();
  st->shape = std::move(rec.shape);
  st->data = std::move(rec.output);
  st->requires_grad = true;
  st->tape = core_;
  st->node = core.nodes.size() - 1;
  st->generation = core.generation;
  st->attached = true;
  return Value<T>(std::move(st));
}

template <class T>
Value<T> Tape<T>::emit(KernelRecord<T> rec) {
  auto& core = *core_;
  if (core.flops) core.flops->add_forward(rec.kind, rec.cost.forward);
  const bool needs_graph =
      core.mode == Mode::recording &&
      std::any_of(rec.inputs.begin(), rec.inputs.end(), [](const Value<T>& v) { return v.requires_grad(); });
  if (needs_graph) return record(std::move(rec));

  if (!rec.output || rec.output->size() != numel(rec.shape)) {
    throw std::invalid_argument("kernel output does not match its declared shape");
  }
  check_finite(*rec.output, rec.kind);
  auto st = std::make_shared<detail::ValueState<T>>();
  st->shape = std::move(rec.shape);
  st->data = std::move(rec.output);
  return Value<T>(std::move(st));
}

template <class T>
void Tape<T>::backward(const Value<T>& root, bool retain) {
  Root<T> r{root, std::vector<T>(root.numel(), T(1))};
  backward(std::span<const Root<T>>(&r, 1), retain);
}

template <class T>
void Tape<T>::backward(std::span<const Root<T>> roots, bool retain) {
  auto& core = *core_;
  for (const auto& r : roots) {
    const auto& st = r.value.state();
    if (!st.attached) throw ContractViolation("backward root is not attached to a graph");
    if (st.tape.lock() != core_ || st.generation != core.generation) {
      throw ContractViolation("backward root lives on a freed or foreign tape");
    }
    if (r.seed.size() != st.data->size()) {
      throw std::invalid_argument("seed gradient size does not match root shape " + to_string(st.shape));
    }
  }
  for (const auto& r : roots) {
    auto& node = core.nodes[r.value.state().node];
    if (!node.grad) node.grad.emplace(node.out_numel, T(0));
    auto& g = *node.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.seed[i];
  }

  std::vector<detail::ValueState<T>*> reached;
  std::unordered_set<detail::ValueState<T>*> reached_set;
  std::vector<std::span<T>> grad_in;

  for (std::size_t idx = core.nodes.size(); idx-- > 0;) {
    auto& node = core.nodes[idx];
    if (!node.grad && node.hooks.empty()) continue;
    if (!node.grad) node.grad.emplace(node.out_numel, T(0));
    auto& g = *node.grad;
    for (const auto& h : node.hooks) {
      const auto& b = *h.base;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += b[i] * h.scaler;
    }

    grad_in.assign(node.parents.size(), std::span<T>{});
    for (std::size_t p = 0; p < node.parents.size(); ++p) {
      auto& parent = node.parents[p];
      if (parent.node) {
        auto& pn = core.nodes[*parent.node];
        if (!pn.grad) pn.grad.emplace(pn.out_numel, T(0));
        grad_in[p] = *pn.grad;
      } else if (parent.leaf) {
        auto* leaf = parent.leaf.get();
        if (!leaf->grad) leaf->grad.emplace(leaf->data->size(), T(0));
        grad_in[p] = *leaf->grad;
        if (reached_set.insert(leaf).second) reached.push_back(leaf);
      }
    }
    node.backward(BackwardArgs<T>{g, node.saved, grad_in});
    if (core.flops) {
      core.flops->add_backward(node.kind, node.cost.backward);
      core.flops->add_recompute(node.kind, node.cost.recompute);
    }
    node.grad.reset();
  }

  for (auto* leaf : reached) {
    for (const auto& h : leaf->hooks) {
      auto& g = *leaf->grad;
      const auto& b = *h.base;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += b[i] * h.scaler;
    }
  }

  if (!retain) free();
}

template <class T>
void Tape<T>::free() {
  auto& core = *core_;
  core.nodes.clear();
  core.release_all();
  ++core.generation;
}

template <class T>
std::size_t Tape<T>::size() const {
  return core_->nodes.size();
}

template <class T>
std::size_t Tape<T>::live_bytes() const {
  return core_->live;
}

template <class T>
std::size_t Tape<T>::peak_bytes() const {
  return core_->peak;
}

template <class T>
void Tape<T>::reset_peak() {
  core_->peak = core_->live;
}

template <class T>
std::vector<const void*> Tape<T>::leaf_ancestors(const Value<T>& v) const {
  std::vector<const void*> leaves;
  auto id = v.node();
  if (!id) {
    if (v.is_leaf()) leaves.push_back(v.identity());
    return leaves;
  }
  const auto& nodes = core_->nodes;
  std::vector<bool> seen(nodes.size(), false);
  std::unordered_set<const void*> leaf_seen;
  std::vector<std::size_t> stack{*id};
  seen[*id] = true;
  while (!stack.empty()) {
    const auto n = stack.back();
    stack.pop_back();
    for (const auto& p : nodes[n].parents) {
      if (p.node) {
        if (!seen[*p.node]) {
          seen[*p.node] = true;
          stack.push_back(*p.node);
        }
      } else if (p.leaf && leaf_seen.insert(p.leaf.get()).second) {
        leaves.push_back(p.leaf.get());
      }
    }
  }
  return leaves;
}

template class Value<float>;
template class Value<double>;
template class Tape<float>;
template class Tape<double>;
template Value<float> detach(const Value<float>&);
template Value<double> detach(const Value<double>&);
template void register_hook(const Value<float>&, std::vector<float>, float);
template void register_hook(const Value<double>&, std::vector<double>, double);

}  // namespace chunkgrad
