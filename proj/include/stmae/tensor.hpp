#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stmae/error.hpp"

namespace stmae {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major array with an optional gradient buffer.
//
// Tensor is a handle: copies share the same storage, which is how the tape
// refers to operands and how parameters receive gradients. Use clone() for
// an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : s_(std::make_shared<detail::TensorStorage<T>>()) {
    check_shape(shape);
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data)
      : s_(std::make_shared<detail::TensorStorage<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(data.size()));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }
  // Extent of the last axis.
  std::size_t cols() const { return s_->shape.back(); }
  // Product of all extents except the last.
  std::size_t rows() const { return size() / cols(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  // Gradient buffer, allocated (zero-filled) on first access. Gradients live
  // in the shared storage, so this works through a const handle.
  std::span<T> mutable_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T{0});
    return s_->grad;
  }
  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), T{0}); }
  void drop_grad() const { s_->grad.clear(); }

  // Same data and shape, fresh storage, no gradient tracking.
  Tensor clone() const { return Tensor(s_->shape, s_->data); }

  // Converts element precision; the result does not track gradients.
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.begin(), s_->data.end());
    return Tensor<U>(s_->shape, std::move(out));
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extent must be >= 1, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorStorage<T>> s_;
};

template <class T>
class GradTape;

namespace detail {
template <class T>
inline thread_local GradTape<T>* active_tape = nullptr;
}  // namespace detail

// Ordered record of differentiable operations executed while the tape is
// active. backward() replays the recorded adjoints newest-first, which is a
// valid reverse topological order because every operation is recorded after
// its inputs exist.
template <class T>
class GradTape {
 public:
  struct Entry {
    std::string op;
    std::function<void()> adjoint;
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return detail::active_tape<T>; }

  void record(std::string op, std::function<void()> adjoint) {
    entries_.push_back({std::move(op), std::move(adjoint)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t replayed() const { return replayed_; }

  // Seeds d(loss)/d(loss) = 1, runs every adjoint once in reverse order and
  // clears the tape. Gradients accumulate into existing buffers.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    loss.mutable_grad()[0] += T{1};
    replayed_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->adjoint();
      ++replayed_;
    }
    entries_.clear();
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
  std::size_t replayed_ = 0;
};

// Makes a tape the recording target for the current thread while in scope.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : prev_(detail::active_tape<T>) {
    detail::active_tape<T> = &tape;
  }
  ~TapeScope() { detail::active_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* prev_;
};

// Suspends recording for the current thread while in scope.
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape<T>) { detail::active_tape<T> = nullptr; }
  ~NoGradScope() { detail::active_tape<T> = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* prev_;
};

}  // namespace stmae
