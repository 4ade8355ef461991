#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

// A scalar function expressed as a graph builder: given a fresh tape and the
// input variable, returns the scalar output node.
using GraphFn = std::function<Var(Tape&, Var)>;
using ScalarFn = std::function<double(const Tensor&)>;

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
inline Tensor numeric_gradient(const ScalarFn& fn, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw DomainError("finite difference step must be positive");
  Tensor grad = Tensor::zeros(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    probe[i] = orig + eps;
    const double up = fn(probe);
    probe[i] = orig - eps;
    const double down = fn(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// max_i |analytic_i - numeric_i| / max(1, |numeric_i|)
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("gradient shapes differ: " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(numeric[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

inline double evaluate(const GraphFn& fn, const Tensor& x) {
  Tape tape;
  return fn(tape, tape.constant(x)).value().item();
}

inline Tensor tape_gradient(const GraphFn& fn, const Tensor& x) {
  Tape tape;
  Var xv = tape.variable(x);
  Var out = fn(tape, xv);
  const GradientMap grads = backward(tape, out);
  return grads.has(xv) ? grads.at(xv) : Tensor::zeros(x.shape());
}

// Compares the tape gradient of `fn` at x against central differences.
inline double finite_diff_check(const GraphFn& fn, const Tensor& x, double eps) {
  const Tensor analytic = tape_gradient(fn, x);
  const Tensor numeric = numeric_gradient([&](const Tensor& p) { return evaluate(fn, p); }, x, eps);
  return max_relative_error(analytic, numeric);
}

// Same check for a caller-supplied analytic gradient.
inline double finite_diff_check(const ScalarFn& fn, const Tensor& analytic, const Tensor& x, double eps) {
  return max_relative_error(analytic, numeric_gradient(fn, x, eps));
}

}  // namespace hyperlab
