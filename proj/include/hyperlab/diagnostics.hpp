#pragma once

// Embedding-geometry and training-dynamics measurements: norm and cosine
// distributions, singular-value spectra, gradient conflict, orthogonality
// residuals and interpolation in embedding space.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlab/errors.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

struct Histogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  Summary summary;
};

inline Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

// Uniform bins over [min, max]; a degenerate range gets a unit-width bin
// centred on the value. The last bin is closed on the right.
inline Histogram make_histogram(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw DomainError("histogram needs at least one bin");
  Histogram h;
  h.summary = summarize(values);
  double lo = h.summary.min;
  double hi = h.summary.max;
  if (values.empty() || hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  h.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.bin_edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  h.counts.assign(bins, 0);
  for (double v : values) {
    auto idx = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    h.counts[std::min(idx, bins - 1)]++;
  }
  return h;
}

inline std::vector<double> l2_row_norms(const Tensor& x) {
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = l2_norm(x.row(i));
  return out;
}

inline Histogram norm_histogram(const Tensor& pre_norm, std::size_t bins) {
  if (pre_norm.rows() == 0) throw DomainError("norm_histogram needs at least one row");
  return make_histogram(l2_row_norms(pre_norm), bins);
}

struct CosineStats {
  Histogram overall;
  std::map<std::size_t, Histogram> per_class;
};

inline std::vector<double> pairwise_cosines(const Tensor& x, const std::vector<std::size_t>& rows) {
  std::vector<double> norms(rows.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    norms[a] = l2_norm(x.row(rows[a]));
    if (norms[a] == 0.0) throw DomainError("cosine undefined for zero-norm row " + std::to_string(rows[a]));
  }
  std::vector<double> out;
  out.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      const double c = dot(x.row(rows[a]), x.row(rows[b])) / (norms[a] * norms[b]);
      out.push_back(std::clamp(c, -1.0, 1.0));
    }
  }
  return out;
}

inline CosineStats pairwise_cosine_stats(const Tensor& embeddings, const std::vector<std::size_t>* class_ids,
                                         std::size_t bins) {
  if (embeddings.rows() < 2) throw DomainError("pairwise_cosine_stats needs at least two rows");
  std::vector<std::size_t> all(embeddings.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  CosineStats out;
  out.overall = make_histogram(pairwise_cosines(embeddings, all), bins);
  if (class_ids != nullptr) {
    if (class_ids->size() != embeddings.rows()) throw DimensionError("one class id per embedding row required");
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < class_ids->size(); ++i) groups[(*class_ids)[i]].push_back(i);
    for (const auto& [cls, rows] : groups) {
      if (rows.size() >= 2) out.per_class.emplace(cls, make_histogram(pairwise_cosines(embeddings, rows), bins));
    }
  }
  return out;
}

struct SvdResult {
  Tensor u;                        // [m, r]
  std::vector<double> singular;    // r = min(m, n), descending
  Tensor v;                        // [n, r]
  std::size_t sweeps = 0;
};

struct SvdSpectrum {
  std::vector<double> singular_values;
  double mean_sv = 0.0;
  double max_sv = 0.0;
  double condition_number = 0.0;
  std::size_t retained = 0;
  double reconstruction_residual = 0.0;
  std::size_t sweeps = 0;
};

inline constexpr double kRankTolerance = 1e-10;

namespace detail {

// One-sided Jacobi on the columns of a (m x n, m >= n): rotate column pairs
// until all are mutually orthogonal. Column norms are the singular values.
inline SvdResult jacobi_tall(std::vector<double> a, std::size_t m, std::size_t n, std::size_t max_sweeps) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto col_dot = [&](std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a[i * n + p] * a[i * n + q];
    return s;
  };
  constexpr double tol = 1e-15;
  std::size_t sweep = 0;
  bool converged = n < 2;
  while (!converged && sweep < max_sweeps) {
    ++sweep;
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = col_dot(p, p);
        const double beta = col_dot(q, q);
        const double gamma = col_dot(p, q);
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[i * n + p];
          const double aq = a[i * n + q];
          a[i * n + p] = c * ap - s * aq;
          a[i * n + q] = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[i * n + p];
          const double vq = v[i * n + q];
          v[i * n + p] = c * vp - s * vq;
          v[i * n + q] = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw NumericError("jacobi svd did not converge in " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(col_dot(j, j));
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

  SvdResult r;
  r.sweeps = sweep;
  std::vector<double> u(m * n, 0.0), vs(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.singular.push_back(sv[j]);
    for (std::size_t i = 0; i < n; ++i) vs[i * n + k] = v[i * n + j];
    if (sv[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) u[i * n + k] = a[i * n + j] / sv[j];
    }
  }
  r.u = Tensor({m, n}, std::move(u));
  r.v = Tensor({n, n}, std::move(vs));
  return r;
}

}  // namespace detail

// Full thin SVD W = U diag(s) V^T via one-sided Jacobi on the smaller Gram side.
inline SvdResult svd(const Tensor& w, std::size_t max_sweeps = 100) {
  if (w.rank() != 2) throw DimensionError("svd expects a matrix, got " + shape_str(w.shape()));
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  if (m >= n) return detail::jacobi_tall(w.values(), m, n, max_sweeps);
  std::vector<double> t(n * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = w.at(i, j);
  SvdResult r = detail::jacobi_tall(std::move(t), n, m, max_sweeps);
  std::swap(r.u, r.v);
  return r;
}

inline double frobenius(std::span<const double> x) { return l2_norm(x); }

inline double reconstruction_residual(const Tensor& w, const SvdResult& r) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  const std::size_t k = r.singular.size();
  double err = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += r.u.at(i, l) * r.singular[l] * r.v.at(j, l);
      const double d = s - w.at(i, j);
      err += d * d;
    }
  }
  const double ref = frobenius(w.data());
  return ref > 0.0 ? std::sqrt(err) / ref : std::sqrt(err);
}

inline SvdSpectrum weight_svd(const Tensor& w) {
  const SvdResult r = svd(w);
  SvdSpectrum s;
  s.singular_values = r.singular;
  s.sweeps = r.sweeps;
  s.max_sv = r.singular.empty() ? 0.0 : r.singular.front();
  double total = 0.0;
  for (double v : r.singular) total += v;
  s.mean_sv = total / static_cast<double>(r.singular.size());
  const double floor = kRankTolerance * s.max_sv;
  double smallest = 0.0;
  for (double v : r.singular) {
    if (v > floor) {
      smallest = v;
      ++s.retained;
    }
  }
  s.condition_number = smallest > 0.0 ? s.max_sv / smallest : 0.0;
  s.reconstruction_residual = reconstruction_residual(w, r);
  if (!(s.reconstruction_residual < 1e-8)) {
    throw NumericError("svd reconstruction residual " + std::to_string(s.reconstruction_residual) +
                       " exceeds 1e-8");
  }
  return s;
}

struct GradientConflict {
  double cosine = 0.0;
  double mag1 = 0.0;
  double mag2 = 0.0;
};

inline GradientConflict gradient_conflict(std::span<const double> g1, std::span<const double> g2) {
  GradientConflict c;
  c.mag1 = l2_norm(g1);
  c.mag2 = l2_norm(g2);
  if (c.mag1 == 0.0 || c.mag2 == 0.0) throw DomainError("gradient cosine undefined for a zero vector");
  c.cosine = std::clamp(dot(g1, g2) / (c.mag1 * c.mag2), -1.0, 1.0);
  return c;
}

// |<f, grad>| / (|f| |grad|)
inline double orthogonality_residual(std::span<const double> f, std::span<const double> grad) {
  const double nf = l2_norm(f);
  const double ng = l2_norm(grad);
  if (nf == 0.0 || ng == 0.0) throw DomainError("orthogonality residual undefined for a zero vector");
  return std::abs(dot(f, grad)) / (nf * ng);
}

enum class InterpolationMode { Linear, Spherical };

inline std::vector<Tensor> interpolate_embeddings(const Tensor& src, const Tensor& dst, std::size_t steps,
                                                  InterpolationMode mode) {
  if (steps < 2) throw DomainError("interpolation needs at least 2 steps");
  if (src.shape() != dst.shape()) throw DimensionError("interpolation endpoints differ in shape");
  double omega = 0.0;
  if (mode == InterpolationMode::Spherical) {
    const double ns = l2_norm(src.data());
    const double nd = l2_norm(dst.data());
    if (std::abs(ns - 1.0) > 1e-6 || std::abs(nd - 1.0) > 1e-6) {
      throw DomainError("spherical interpolation needs unit-norm endpoints");
    }
    const double c = std::clamp(dot(src.data(), dst.data()) / (ns * nd), -1.0, 1.0);
    if (c <= -1.0 + 1e-12) throw DomainError("spherical interpolation between antipodal points is undefined");
    omega = std::acos(c);
  }
  std::vector<Tensor> out;
  out.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    if (k == 0) {
      out.push_back(src);
      continue;
    }
    if (k + 1 == steps) {
      out.push_back(dst);
      continue;
    }
    const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
    double ws = 1.0 - t;
    double wd = t;
    if (mode == InterpolationMode::Spherical && omega > 1e-12) {
      ws = std::sin((1.0 - t) * omega) / std::sin(omega);
      wd = std::sin(t * omega) / std::sin(omega);
    }
    std::vector<double> v(src.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = ws * src[i] + wd * dst[i];
    out.push_back(Tensor(src.shape(), std::move(v)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON documents.

inline nlohmann::json to_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}, {"count", s.count}};
}

inline nlohmann::json to_json(const Histogram& h) {
  return {{"bin_edges", h.bin_edges}, {"counts", h.counts}, {"summary", to_json(h.summary)}};
}

inline nlohmann::json to_json(const CosineStats& c) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [cls, h] : c.per_class) per[std::to_string(cls)] = to_json(h);
  return {{"overall", to_json(c.overall)}, {"per_class", per}};
}

inline nlohmann::json to_json(const SvdSpectrum& s) {
  return {{"singular_values", s.singular_values},
          {"mean_sv", s.mean_sv},
          {"max_sv", s.max_sv},
          {"condition_number", s.condition_number},
          {"retained", s.retained},
          {"reconstruction_residual", s.reconstruction_residual},
          {"sweeps", s.sweeps}};
}

}  // namespace hyperlab
