#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cot/errors.hpp"

namespace cot {

using Shape = std::vector<std::size_t>;

/// Number of elements; the empty shape is a scalar.
inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

enum class OpKind : std::uint8_t {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kRelu,
  kExp,
  kLog,
  kSum,
  kMean,
  kSumAxis,
  kMeanAxis,
  kMaxAxis,
  kConcat,
  kL2Norm,
  kL2Normalize,
  kSoftmax,
  kLogSoftmax,
  kFeatureStandardize,
  kDropout,
  kReshape,
  kTranspose,
  kGather,
  kSqDist,
};

/// Append-only record of differentiable operations. Node i may only read
/// tensors produced by nodes < i, so a reverse sweep over append order is a
/// valid topological traversal.
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::function<void()> pullback;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t record(OpKind kind, std::function<void()> pullback) {
    nodes_.push_back(Node{kind, std::move(pullback)});
    return nodes_.size() - 1;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }

  /// Runs pullbacks for nodes last, last-1, ..., 0.
  void reverse_sweep(std::size_t last) {
    for (std::size_t i = last + 1; i-- > 0;) nodes_[i].pullback();
  }

  /// Drops all nodes and the activations they hold.
  void clear() { nodes_.clear(); }

  static Tape* active() noexcept { return slot(); }

 private:
  friend class TapeScope;
  static Tape*& slot() noexcept {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<Node> nodes_;
};

/// Makes `tape` the recording target for the current thread. Passing nullptr
/// disables recording (frozen forward).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape) : previous_(Tape::slot()) { Tape::slot() = tape; }
  ~TapeScope() { Tape::slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  std::optional<std::size_t> tape_id;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy and detach() for a gradient-free copy.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(numel(shape), T(0));
    return BasicTensor(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(numel(shape), value);
    return BasicTensor(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  const Shape& shape() const noexcept { return impl_->shape; }
  std::size_t rank() const noexcept { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const noexcept { return impl_->data.size(); }

  std::span<const T> data() const noexcept { return impl_->data; }

  /// Writable view. Forbidden on tensors produced on a tape, whose values may
  /// be saved for a pullback.
  std::span<T> mutable_data() {
    if (impl_->tape_id) throw ContractError("cannot mutate a tensor recorded on the tape");
    return impl_->data;
  }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T operator[](std::size_t i) const { return impl_->data[i]; }

  T at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw DimensionError("at(row, col) needs a rank-2 tensor");
    return impl_->data[row * impl_->shape[1] + col];
  }

  bool requires_grad() const noexcept { return impl_->requires_grad; }

  void set_requires_grad(bool on) {
    if (impl_->tape_id) throw ContractError("requires_grad is fixed for tape outputs");
    impl_->requires_grad = on;
  }

  bool has_grad() const noexcept { return !impl_->grad.empty(); }

  /// Gradient buffer; zeros when nothing has been accumulated.
  std::vector<T> grad() const {
    if (impl_->grad.empty()) return std::vector<T>(size(), T(0));
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.clear(); }

  std::optional<std::size_t> tape_id() const noexcept { return impl_->tape_id; }

  BasicTensor detach() const { return BasicTensor(shape(), impl_->data, false); }

  BasicTensor clone() const { return BasicTensor(shape(), impl_->data, requires_grad()); }

  const std::shared_ptr<TensorImpl<T>>& impl() const noexcept { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

template <class T>
std::vector<T>& grad_buffer(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

/// Registers `out` on the active tape when any input requires a gradient.
/// `pullback(gout)` receives the output gradient and must accumulate into the
/// inputs that require gradients.
template <class T, class Fn>
BasicTensor<T> finish(OpKind kind, BasicTensor<T> out, std::initializer_list<const BasicTensor<T>*> inputs,
                      Fn pullback) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto o = out.impl();
  o->requires_grad = true;
  o->tape_id = tape->record(kind, [o, fn = std::move(pullback)]() {
    if (o->grad.empty()) return;
    fn(std::span<const T>(o->grad));
  });
  return out;
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Leaf gradients accumulate; callers zero
/// them between steps. The tape is cleared afterwards unless `retain` is set.
template <class T>
void backward(const BasicTensor<T>& loss, Tape& tape, bool retain = false) {
  if (loss.size() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.tape_id()) throw ContractError("loss was not produced on the tape");
  auto& g = detail::grad_buffer(*loss.impl());
  g[0] = T(1);
  tape.reverse_sweep(*loss.tape_id());
  if (!retain) tape.clear();
}

}  // namespace cot
