#pragma once

// Small helpers shared by the test executables.

#include <cstdint>
#include <random>
#include <vector>

#include "hyperlab/tensor.hpp"

namespace testsupport {

inline hyperlab::Tensor random_tensor(std::mt19937_64& rng, hyperlab::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(hyperlab::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return hyperlab::Tensor(std::move(shape), std::move(v));
}

// Entries bounded away from zero, for kinked functions.
inline hyperlab::Tensor random_away_from_zero(std::mt19937_64& rng, hyperlab::Shape shape, double margin = 0.05) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> v(hyperlab::shape_numel(shape));
  for (auto& x : v) x = coin(rng) ? u(rng) : -u(rng);
  return hyperlab::Tensor(std::move(shape), std::move(v));
}

// Brute-force squared-distance chamfer, written independently of the library.
inline double brute_chamfer(const hyperlab::Tensor& a, const hyperlab::Tensor& b) {
  auto d2 = [](const hyperlab::Tensor& x, std::size_t i, const hyperlab::Tensor& y, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double d = x.at(i, k) - y.at(j, k);
      s += d * d;
    }
    return s;
  };
  double ab = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double best = d2(a, i, b, 0);
    for (std::size_t j = 1; j < b.rows(); ++j) best = std::min(best, d2(a, i, b, j));
    ab += best;
  }
  double ba = 0.0;
  for (std::size_t j = 0; j < b.rows(); ++j) {
    double best = d2(b, j, a, 0);
    for (std::size_t i = 1; i < a.rows(); ++i) best = std::min(best, d2(b, j, a, i));
    ba += best;
  }
  return ab / static_cast<double>(a.rows()) + ba / static_cast<double>(b.rows());
}

}  // namespace testsupport
