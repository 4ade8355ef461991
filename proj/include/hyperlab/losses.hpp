#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

// CD(A,B) = mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2 over two n x 3 sets.
inline double chamfer(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != 3 || b.cols() != 3) {
    throw DimensionError("chamfer expects n x 3 point sets, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  return detail::chamfer_pairs(a, b, 1).loss;
}

// -log softmax(logits)[label] in max-shifted form.
inline double cross_entropy(const Tensor& logits, std::size_t label) {
  const auto v = logits.data();
  if (label >= v.size()) {
    throw DomainError("label " + std::to_string(label) + " out of range for " + std::to_string(v.size()) +
                      " classes");
  }
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  return -(v[label] - mx - std::log(z));
}

inline Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  Var row = lv.rank() == 2 ? logits : reshape(logits, {1, lv.size()});
  return softmax_cross_entropy(row, {label});
}

// Index of the largest logit per row; ties to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto r = logits.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

}  // namespace hyperlab
