#pragma once

// Row-wise p-norm normalization onto the unit sphere and the closed-form
// backward of the l2 case. These kernels carry no tape state; the tape's
// NormalizeL2 primitive and the hypersphere module both call into them.

#include <cmath>
#include <cstddef>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

inline constexpr double kDefaultEpsGuard = 1e-12;

inline double p_norm(std::span<const double> v, int p) {
  double s = 0.0;
  switch (p) {
    case 1:
      for (double x : v) s += std::abs(x);
      return s;
    case 2:
      for (double x : v) s += x * x;
      return std::sqrt(s);
    case 3:
      for (double x : v) s += std::abs(x) * x * x;
      return std::cbrt(s);
    default:
      throw DomainError("norm order must be 1, 2 or 3, got " + std::to_string(p));
  }
}

inline std::vector<double> row_norms(const Tensor& f, int p) {
  std::vector<double> norms(f.rows());
  for (std::size_t i = 0; i < f.rows(); ++i) norms[i] = p_norm(f.row(i), p);
  return norms;
}

inline void check_row_norms(std::span<const double> norms, double eps_guard) {
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > eps_guard)) throw DegenerateEmbeddingError(i, norms[i]);
  }
}

// Row i of the result is f_i / ||f_i||_p.
inline Tensor normalize(const Tensor& f, int p = 2, double eps_guard = kDefaultEpsGuard) {
  const auto norms = row_norms(f, p);
  check_row_norms(norms, eps_guard);
  std::vector<double> out(f.size());
  const std::size_t d = f.cols();
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = f.at(i, j) / norms[i];
  }
  return Tensor(f.shape(), std::move(out));
}

// dL/df = (g - f_hat <g, f_hat>) / ||f||_2 per row, with g = dL/df_hat.
// The result is the tangential component of g at f_hat, shrunk by ||f||_2.
inline Tensor normalize_backward_l2(const Tensor& f, const Tensor& upstream,
                                    double eps_guard = kDefaultEpsGuard) {
  if (f.shape() != upstream.shape()) {
    throw DimensionError("normalize_backward_l2 shapes " + shape_str(f.shape()) + " and " +
                         shape_str(upstream.shape()));
  }
  const auto norms = row_norms(f, 2);
  check_row_norms(norms, eps_guard);
  const std::size_t d = f.cols();
  std::vector<double> out(f.size());
  std::vector<double> unit(d);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    const auto fi = f.row(i);
    const auto gi = upstream.row(i);
    for (std::size_t j = 0; j < d; ++j) unit[j] = fi[j] / norms[i];
    const double radial = dot(gi, unit);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (gi[j] - unit[j] * radial) / norms[i];
  }
  return Tensor(f.shape(), std::move(out));
}

}  // namespace hyperlab
