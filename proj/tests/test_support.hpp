#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "eapgp/rng.hpp"
#include "eapgp/tape.hpp"
#include "eapgp/tensor.hpp"

namespace eapgp::testing {

// Central finite differences in double precision; the independent oracle
// for every analytic gradient in the suite (only the forward evaluation is
// shared with the code under test, never the backward path).
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor) {
  double mx = 0.0;
  for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, rel_err(a[i], b[i], floor));
  return mx;
}

template <class S>
std::vector<double> to_doubles(std::span<const S> v) {
  return std::vector<double>(v.begin(), v.end());
}

inline std::vector<double> draw(Rng& rng, size_t n, double stddev = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

template <class S>
Tensor<S> tensor_from_doubles(const Shape& shape, const std::vector<double>& v) {
  std::vector<S> data(v.size());
  for (size_t i = 0; i < v.size(); ++i) data[i] = static_cast<S>(v[i]);
  return Tensor<S>::from(shape, std::move(data));
}

// Checks one primitive in one precision against the f64 finite-difference
// oracle. `op` is a generic functor (Tape<S>&, vector<Tensor<S>>) ->
// Tensor<S>; the output is scalarized with fixed random weights so every
// output coordinate matters. Returns the max relative error over all input
// coordinates of all differentiable inputs.
template <class S, class OpFn>
double primitive_grad_error(OpFn op, const std::vector<Shape>& input_shapes, uint64_t seed,
                            double fd_h, double floor) {
  Rng rng(seed);
  std::vector<std::vector<double>> values;
  for (const Shape& s : input_shapes)
    values.push_back(draw(rng, static_cast<size_t>(numel_of(s))));

  // weights drawn after inputs, shared between both evaluations
  std::vector<double> weights;
  {
    // output shape discovered with a probe run in f64
    Tape<double> probe;
    std::vector<Tensor<double>> in;
    for (size_t i = 0; i < input_shapes.size(); ++i)
      in.push_back(tensor_from_doubles<double>(input_shapes[i], values[i]));
    Tensor<double> y = op(probe, in);
    weights = draw(rng, static_cast<size_t>(y.numel()));
  }

  auto loss_at = [&](const std::vector<double>& flat) {
    Tape<double> tape;
    std::vector<Tensor<double>> in;
    size_t off = 0;
    for (const Shape& s : input_shapes) {
      const size_t n = static_cast<size_t>(numel_of(s));
      in.push_back(tensor_from_doubles<double>(
          s, std::vector<double>(flat.begin() + off, flat.begin() + off + n)));
      off += n;
    }
    Tensor<double> y = op(tape, in);
    double acc = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i)
      acc += weights[static_cast<size_t>(i)] * static_cast<double>(y.data()[i]);
    return acc;
  };

  std::vector<double> flat;
  for (const auto& v : values) flat.insert(flat.end(), v.begin(), v.end());
  const std::vector<double> fd = central_diff(loss_at, flat, fd_h);

  // analytic gradients in S
  Tape<S> tape;
  std::vector<Tensor<S>> in;
  for (size_t i = 0; i < input_shapes.size(); ++i) {
    in.push_back(tensor_from_doubles<S>(input_shapes[i], values[i]));
    in.back().set_requires_grad(true);
  }
  Tensor<S> y = op(tape, in);
  Tensor<S> w = tensor_from_doubles<S>(y.shape(), weights);
  Tensor<S> loss = tape.reduce_sum(tape.mul(y, w));
  tape.backward(loss);

  std::vector<double> analytic;
  for (auto& t : in) {
    auto g = t.grad_or_zeros();
    for (S v : g) analytic.push_back(static_cast<double>(v));
  }
  return max_rel_err(analytic, fd, floor);
}

}  // namespace eapgp::testing
