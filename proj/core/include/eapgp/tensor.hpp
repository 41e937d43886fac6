#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "eapgp/common.hpp"
#include "eapgp/rng.hpp"

namespace eapgp {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

// Dense n-dimensional array of S (float or double). A rank-0 tensor is a
// scalar. Gradients live alongside the data and are filled in by
// Tape::backward for every tensor with requires_grad set (the flag
// propagates through ops).
template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until backward touches it
  bool requires_grad = false;
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

  static Tensor filled(Shape shape, S value) {
    auto d = std::make_shared<TensorData<S>>();
    const int64_t n = numel_of(shape);
    d->shape = std::move(shape);
    d->data.assign(static_cast<size_t>(n), value);
    return Tensor(std::move(d));
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    const int64_t n = numel_of(shape);
    if (n != static_cast<int64_t>(values.size()))
      fail_invalid("tensor data length ", values.size(), " does not match shape ",
                   shape_str(shape), " (", n, " elements)");
    auto d = std::make_shared<TensorData<S>>();
    d->shape = std::move(shape);
    d->data = std::move(values);
    return Tensor(std::move(d));
  }

  static Tensor scalar(S value) { return from({}, {value}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (S& v : t.d_->data) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->data.size()); }
  int64_t dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    return d_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(d_->shape.size()); }

  std::span<S> data() { return d_->data; }
  std::span<const S> data() const { return d_->data; }

  S item() const {
    if (numel() != 1) fail_invalid("item() on tensor of shape ", shape_str(shape()));
    return d_->data[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  // Gradient values; zeros if backward never reached this tensor.
  std::vector<S> grad_or_zeros() const {
    if (has_grad()) return d_->grad;
    return std::vector<S>(d_->data.size(), S(0));
  }
  std::span<S> grad() { return d_->grad; }
  std::span<const S> grad() const { return d_->grad; }
  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), S(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) d_->grad.assign(d_->data.size(), S(0));
  }

  // Frozen value snapshot: same values, no grad, not differentiable. Caches
  // store these so later tapes see plain leaves.
  Tensor detached() const {
    auto d = std::make_shared<TensorData<S>>();
    d->shape = d_->shape;
    d->data = d_->data;
    return Tensor(std::move(d));
  }

  // Converts values to another scalar type (used by the f32 checkpoint
  // payload and the f64 test oracles).
  template <class T>
  Tensor<T> cast() const {
    std::vector<T> out(d_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(d_->data[i]);
    return Tensor<T>::from(d_->shape, std::move(out));
  }

  bool all_finite() const {
    for (S v : d_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  TensorData<S>* raw() const { return d_.get(); }
  const std::shared_ptr<TensorData<S>>& handle() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData<S>> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData<S>> d_;

  template <class T>
  friend class Tape;
};

template <class S>
double l2_norm(std::span<const S> v) {
  double acc = 0.0;
  for (S x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

}  // namespace eapgp
