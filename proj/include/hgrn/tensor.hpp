#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hgrn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <std::floating_point T>
class Tape;

/// Dense row-major tensor with shared storage. Copies alias the same node, so a
/// parameter handed to several tapes accumulates into one gradient buffer.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_size(shape) != values.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_size(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> v(shape_size(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
  T& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }

  /// Deep copy detached from any tape.
  Tensor clone() const {
    Tensor out(shape(), node_->value, requires_grad());
    return out;
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of executed primitives. Backward replays the entries in
/// reverse order of recording, which is a valid reverse topological order
/// because every entry only reads nodes produced before it.
template <std::floating_point T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  void record(std::vector<std::shared_ptr<Node<T>>> outputs, std::function<void()> backward) {
    entries_.push_back({std::move(outputs), std::move(backward)});
  }

  /// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable
  /// through the tape. Intermediate buffers are reset first, so calling this
  /// twice adds the gradient to the leaves twice.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1 || loss.rank() > 1)
      throw ContractError("backward requires a scalar loss, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    for (auto& e : entries_)
      for (auto& out : e.outputs) out->grad.assign(out->value.size(), T(0));
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::vector<std::shared_ptr<Node<T>>> outputs;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool recording_;
};

template <std::floating_point T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace hgrn
