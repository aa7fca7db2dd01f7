#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hknas/errors.hpp"

namespace hknas {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, so a parameter held by a
/// model and the same parameter captured by a tape closure are one object.
/// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, double fill = 0.0) : s_(std::make_shared<Storage>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : s_(std::make_shared<Storage>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  std::vector<double>& values() { return s_->data; }
  const std::vector<double>& values() const { return s_->data; }

  double& operator[](std::size_t i) { return s_->data[i]; }
  double operator[](std::size_t i) const { return s_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }

  /// Gradient buffer, allocated (zeroed) on first access. Gradients are
  /// bookkeeping of the shared storage, so they stay writable through const handles.
  std::span<double> grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
  }

  void zero_grad() const { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }
  void drop_grad() const { s_->grad.clear(); }

  Tensor clone() const {
    Tensor t(s_->shape, s_->data);
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool shares_storage_with(const Tensor& other) const { return s_ == other.s_; }

  bool all_finite() const {
    for (double v : s_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Records backward closures of one forward pass.
///
/// Ops append to the tape only while it is recording and at least one
/// input requires a gradient. backward() zeroes the gradients of every
/// recorded intermediate, seeds the root with 1 and replays the closures in
/// reverse; leaf tensors accumulate across calls.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  /// True when an op over `inputs` must record itself.
  bool wants(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  void record(Tensor output, std::function<void()> backward) {
    output.set_requires_grad(true);
    outputs_.push_back(std::move(output));
    closures_.push_back(std::move(backward));
  }

  std::size_t size() const { return closures_.size(); }

  void backward(Tensor root) {
    if (root.numel() != 1) {
      throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
    }
    for (auto& t : outputs_) {
      if (!t.shares_storage_with(root)) t.drop_grad();
    }
    bool root_is_intermediate = false;
    for (auto& t : outputs_) root_is_intermediate |= t.shares_storage_with(root);
    if (root_is_intermediate) root.drop_grad();
    root.grad()[0] += 1.0;
    for (auto it = closures_.rbegin(); it != closures_.rend(); ++it) (*it)();
  }

  void clear() {
    outputs_.clear();
    closures_.clear();
  }

 private:
  bool recording_;
  std::vector<Tensor> outputs_;
  std::vector<std::function<void()>> closures_;
};

namespace detail {

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

}  // namespace detail

}  // namespace hknas
