#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "imunity/common.hpp"

namespace imunity::ad {

using Shape = std::vector<int>;

// Fixed 64-byte alignment for every tensor buffer. Eigen's vectorized kernels
// peel a scalar prefix up to an alignment boundary, so the floating-point
// accumulation order of a reduction depends on where the heap placed the
// buffer; pinning the alignment makes results bit-reproducible regardless of
// allocation history (e.g. training twice in one process).
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const noexcept {
    return false;
  }
};

template <typename S>
using AlignedVec = std::vector<S, AlignedAllocator<S>>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
struct TensorImpl {
  Shape shape;
  AlignedVec<S> data;
  AlignedVec<S> grad;  // allocated iff tracked
  bool tracked = false;
};

// Value-semantic handle onto a shared dense buffer. Forward ops never mutate
// their inputs; gradient buffers are the only state written during backward.
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), S(0));
    return t;
  }

  static TensorT full(Shape shape, S value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  template <typename Alloc>
  static TensorT from(Shape shape, const std::vector<S, Alloc>& values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor init: " + shape_str(shape) + " incompatible with " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(values.begin(), values.end());
    return t;
  }

  static TensorT from(Shape shape, std::initializer_list<S> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor init: " + shape_str(shape) + " incompatible with " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(values.begin(), values.end());
    return t;
  }

  static TensorT scalar(S value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }

  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }
  AlignedVec<S>& values() { return impl_->data; }
  const AlignedVec<S>& values() const { return impl_->data; }

  S item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  bool tracked() const { return impl_ && impl_->tracked; }

  void set_tracked(bool on) {
    if (on) {
      impl_->tracked = true;
      if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), S(0));
    } else {
      impl_->tracked = false;
    }
  }

  S* grad() { return impl_->grad.data(); }
  const S* grad() const { return impl_->grad.data(); }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
  }

  // Deep copy of the values; result is untracked.
  TensorT clone() const {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  TensorT detached() const { return clone(); }

  std::shared_ptr<TensorImpl<S>> impl_;
};

// Execution-ordered record of differentiable ops. Reverse replay of the
// record list is a reverse topological traversal of the computed graph;
// every ancestor of the loss is visited exactly once per backward() call.
template <typename S>
class Tape {
 public:
  struct Record {
    std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
    std::shared_ptr<TensorImpl<S>> output;
    std::function<void()> backward;
  };

  void push(std::vector<std::shared_ptr<TensorImpl<S>>> inputs,
            std::shared_ptr<TensorImpl<S>> output, std::function<void()> backward) {
    records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  void reset() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tracked
  // ancestor. Leaf gradients accumulate across calls; gradients of op
  // outputs are re-derived from scratch each call.
  void backward(const TensorT<S>& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward expects a scalar loss");
    // Find the record that produced the loss (newest first).
    std::ptrdiff_t start = -1;
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(records_.size()) - 1; i >= 0; --i) {
      if (records_[static_cast<std::size_t>(i)].output == loss.impl_) {
        start = i;
        break;
      }
    }
    if (start < 0) {
      if (!loss.tracked())
        throw Error("backward: loss is not tracked and was not produced on this tape");
      loss.impl_->grad[0] += S(1);  // bare leaf; nothing to propagate
      return;
    }
    // Intermediate grads are scratch space per backward pass: zero them so
    // repeated backward calls accumulate exactly one extra gradient in leaves.
    std::unordered_set<TensorImpl<S>*> produced;
    for (std::ptrdiff_t i = 0; i <= start; ++i) {
      auto& out = records_[static_cast<std::size_t>(i)].output;
      if (produced.insert(out.get()).second)
        std::fill(out->grad.begin(), out->grad.end(), S(0));
    }
    loss.impl_->grad[0] = S(1);

    std::unordered_set<TensorImpl<S>*> needed;
    needed.insert(loss.impl_.get());
    for (std::ptrdiff_t i = start; i >= 0; --i) {
      Record& r = records_[static_cast<std::size_t>(i)];
      if (!needed.count(r.output.get())) continue;
      r.backward();
      for (auto& in : r.inputs)
        if (in->tracked) needed.insert(in.get());
    }
  }

 private:
  std::vector<Record> records_;
};

}  // namespace imunity::ad
