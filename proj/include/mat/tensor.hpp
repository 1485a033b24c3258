#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mat/errors.hpp"

namespace mat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until materialized
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: not recorded on any tape
  std::ptrdiff_t node = -1;
};

template <class T>
class Tape;

/// Dense row-major array. Copies share storage (handle semantics); use
/// clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<TensorImpl<T>>()) {
    validate(shape);
    impl_->values.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
    validate(shape);
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  /// Leaf tensor that receives gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->values.size(); }

  /// Extent of an axis; negative axes count from the end.
  std::size_t dim(int axis) const { return impl_->shape[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<T> values() { return impl_->values; }
  std::span<const T> values() const { return impl_->values; }
  const std::vector<T>& vec() const { return impl_->values; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->values[0];
  }

  T& operator[](std::size_t i) { return impl_->values[i]; }
  const T& operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T{0});
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool on_tape() const { return impl_->node >= 0; }
  std::ptrdiff_t tape_node() const { return impl_->node; }

  Tensor clone() const {
    Tensor t(shape(), impl_->values);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void validate(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor: zero extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

/// Name of an op whose backward rule is deliberately negated; used only by
/// the gradient-check negative control.
inline std::string& injected_fault() {
  static std::string op;
  return op;
}
}  // namespace detail

/// Gradient accumulator handed to a backward rule: one slot per op input.
template <class T>
class GradSink {
 public:
  GradSink(std::vector<std::shared_ptr<TensorImpl<T>>>& inputs, const std::vector<bool>& needs)
      : inputs_(inputs), needs_(needs) {}

  bool needs(std::size_t i) const { return needs_[i]; }

  std::span<T> operator[](std::size_t i) {
    auto& g = inputs_[i]->grad;
    if (g.empty()) g.assign(inputs_[i]->values.size(), T{0});
    return g;
  }

 private:
  std::vector<std::shared_ptr<TensorImpl<T>>>& inputs_;
  const std::vector<bool>& needs_;
};

/// Records ops in execution order (which is a topological order) and replays
/// their backward rules in reverse.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { clear(); }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  bool tracks(const Tensor<T>& t) const {
    return t.requires_grad() || (t.impl()->tape_id == id_ && t.impl()->node >= 0);
  }

  /// Appends an op; no-op if none of its inputs need gradients.
  void record(std::string_view kind, const std::vector<Tensor<T>>& inputs, Tensor<T>& output,
              BackwardFn fn) {
    std::vector<bool> needs(inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      needs[i] = tracks(inputs[i]);
      any = any || needs[i];
    }
    if (!any) return;
    Record r;
    r.kind = std::string(kind);
    r.needs = std::move(needs);
    r.inputs.reserve(inputs.size());
    for (const auto& in : inputs) r.inputs.push_back(in.impl());
    r.output = output.impl();
    r.backward = std::move(fn);
    output.impl()->tape_id = id_;
    output.impl()->node = static_cast<std::ptrdiff_t>(records_.size());
    records_.push_back(std::move(r));
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate into every
  /// tracked tensor, including parameters (call zero_grad between steps).
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (loss.impl()->tape_id != id_ || loss.impl()->node < 0) {
      throw ContractError("backward: loss was not recorded on this tape");
    }
    auto& seed = loss.impl()->grad;
    if (seed.empty()) seed.assign(1, T{0});
    seed[0] += T{1};
    const bool faulty = !detail::injected_fault().empty();
    for (auto idx = loss.impl()->node; idx >= 0; --idx) {
      auto& r = records_[static_cast<std::size_t>(idx)];
      const auto& gout = r.output->grad;
      if (gout.empty()) continue;
      GradSink<T> sink(r.inputs, r.needs);
      if (faulty && r.kind == detail::injected_fault()) {
        std::vector<T> neg(gout.size());
        for (std::size_t i = 0; i < gout.size(); ++i) neg[i] = -gout[i];
        r.backward(neg, sink);
      } else {
        r.backward(gout, sink);
      }
    }
  }

  /// Op kinds in recorded order.
  std::vector<std::string> kinds() const {
    std::vector<std::string> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.kind);
    return out;
  }

  /// Drops every record and detaches outputs from this tape.
  void clear() {
    for (auto& r : records_) {
      r.output->tape_id = 0;
      r.output->node = -1;
    }
    records_.clear();
  }

 private:
  struct Record {
    std::string kind;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::vector<bool> needs;
    std::shared_ptr<TensorImpl<T>> output;
    BackwardFn backward;
  };

  std::uint64_t id_;
  std::vector<Record> records_;
};

template <class T>
inline thread_local Tape<T>* active_tape = nullptr;

/// Makes a tape the recording target for the current thread within a scope.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>) { active_tape<T> = &tape; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope() { active_tape<T> = previous_; }

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference / frozen trunk) within a scope.
template <class T>
class NoTapeScope {
 public:
  NoTapeScope() : previous_(active_tape<T>) { active_tape<T> = nullptr; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;
  ~NoTapeScope() { active_tape<T> = previous_; }

 private:
  Tape<T>* previous_;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

}  // namespace mat
