#pragma once

// Define-by-run reverse-mode differentiation over a closed primitive set.
//
// A Tape records one node per primitive application. Node values live on the
// tape; each node additionally keeps whatever its backward rule needs beyond
// its parents' values (argmax rows, softmax probabilities, nearest-neighbour
// pairs, ...). Node ids are assigned in creation order, so parents always
// precede children and a reverse sweep over ids is a valid topological order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/normalize.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  Relu,
  MaxOverPoints,
  Sum,
  Exp,
  AbsPow,
  Pow,
  RowSum,
  DivRows,
  NormalizeL2,
  BatchNorm,
  RepeatRows,
  TileRows,
  SliceRows,
  Reshape,
  SoftmaxCrossEntropy,
  Chamfer,
};

using NodeId = std::size_t;

struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<NodeId> parent_ids;
  std::vector<Tensor> saved;
  Shape output_shape;
  double real_attr = 0.0;
  std::size_t int_attr = 0;
  std::vector<std::size_t> index_attr;
  bool requires_grad = false;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

enum class Transpose { None, Left, Right };

// C = op(A) * op(B) for row-major 2-D buffers.
inline Tensor gemm(const Tensor& a, const Tensor& b, Transpose t) {
  ConstMap am(a.data().data(), a.rows(), a.cols());
  ConstMap bm(b.data().data(), b.rows(), b.cols());
  RowMat c;
  switch (t) {
    case Transpose::None: c.noalias() = am * bm; break;
    case Transpose::Left: c.noalias() = am.transpose() * bm; break;
    case Transpose::Right: c.noalias() = am * bm.transpose(); break;
  }
  std::vector<double> out(c.data(), c.data() + c.size());
  return Tensor({static_cast<std::size_t>(c.rows()), static_cast<std::size_t>(c.cols())},
                std::move(out));
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename F>
Tensor map_values(const Tensor& t, F&& f) {
  std::vector<double> out(t.size());
  const auto in = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(t.shape(), std::move(out));
}

template <typename F>
Tensor zip_values(const Tensor& a, const Tensor& b, F&& f) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

struct ChamferPairs {
  double loss = 0.0;
  std::vector<std::size_t> a_to_b;  // nearest row of B for each row of A (global index)
  std::vector<std::size_t> b_to_a;
};

// Batched squared-distance chamfer: A holds `batch` clouds of equal size
// stacked along rows, likewise B. Returns the mean over the batch of
// mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2. Ties go to the lowest index.
inline ChamferPairs chamfer_pairs(const Tensor& a, const Tensor& b, std::size_t batch) {
  const std::size_t n = a.rows() / batch;
  const std::size_t m = b.rows() / batch;
  ChamferPairs out;
  out.a_to_b.assign(a.rows(), 0);
  out.b_to_a.assign(b.rows(), 0);
  std::vector<double> best_b(m);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t a0 = s * n;
    const std::size_t b0 = s * m;
    std::fill(best_b.begin(), best_b.end(), std::numeric_limits<double>::infinity());
    double sum_a = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = &ad[(a0 + i) * 3];
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < m; ++j) {
        const double* q = &bd[(b0 + j) * 3];
        const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        const double d2 = dx * dx + dy * dy + dz * dz;
        if (d2 < best) {
          best = d2;
          arg = j;
        }
        if (d2 < best_b[j]) {
          best_b[j] = d2;
          out.b_to_a[b0 + j] = a0 + i;
        }
      }
      out.a_to_b[a0 + i] = b0 + arg;
      sum_a += best;
    }
    double sum_b = 0.0;
    for (double v : best_b) sum_b += v;
    out.loss += sum_a / static_cast<double>(n) + sum_b / static_cast<double>(m);
  }
  out.loss /= static_cast<double>(batch);
  return out;
}

}  // namespace detail

class GradientMap {
 public:
  explicit GradientMap(std::size_t nodes = 0) : grads_(nodes) {}

  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  bool has(Var v) const { return has(v.id); }

  const Tensor& at(NodeId id) const {
    if (!has(id)) throw ContractError("no gradient recorded for node " + std::to_string(id));
    return *grads_[id];
  }
  const Tensor& at(Var v) const { return at(v.id); }

  void accumulate(NodeId id, Tensor contribution) {
    auto& slot = grads_.at(id);
    if (!slot) {
      slot = std::move(contribution);
      return;
    }
    detail::require_same_shape(*slot, contribution, "gradient accumulation");
    auto acc = slot->mutable_data();
    const auto add = contribution.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
  }

  void release(NodeId id) { grads_[id].reset(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient is wanted (parameters, probed inputs).
  Var variable(Tensor value) { return push_leaf(std::move(value), true); }
  // Leaf treated as a constant; backward never descends into it.
  Var constant(Tensor value) { return push_leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return values_.at(id); }

  Var push(TapeNode node, Tensor value) {
    node.output_shape = value.shape();
    node.requires_grad = false;
    for (NodeId p : node.parent_ids) {
      if (p >= nodes_.size()) throw ContractError("parent id refers to a later node");
      node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
    }
    nodes_.push_back(std::move(node));
    values_.push_back(std::move(value));
    return Var{this, nodes_.size() - 1};
  }

 private:
  Var push_leaf(Tensor value, bool requires_grad) {
    TapeNode node;
    node.op = OpKind::Leaf;
    node.output_shape = value.shape();
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    values_.push_back(std::move(value));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<TapeNode> nodes_;
  std::vector<Tensor> values_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
  return *a.tape;
}

inline TapeNode make_node(OpKind op, std::vector<NodeId> parents) {
  TapeNode n;
  n.op = op;
  n.parent_ids = std::move(parents);
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value-level kernels (no tape).

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  return detail::gemm(a, b, detail::Transpose::None);
}

inline Tensor relu(const Tensor& x) {
  return detail::map_values(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

// Column-wise maximum of a point set; ties resolve to the lowest row.
inline Tensor max_over_points(const Tensor& x) {
  if (x.rows() == 0) throw DomainError("max_over_points of an empty point set");
  std::vector<double> out(x.row(0).begin(), x.row(0).end());
  for (std::size_t i = 1; i < x.rows(); ++i) {
    const auto r = x.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(out[j], r[j]);
  }
  return Tensor::vector(std::move(out));
}

// ---------------------------------------------------------------------------
// Recorded primitives.

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  return t.push(detail::make_node(OpKind::MatMul, {a.id, b.id}), std::move(out));
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = detail::zip_values(a.value(), b.value(), [](double x, double y) { return x + y; });
  return t.push(detail::make_node(OpKind::Add, {a.id, b.id}), std::move(out));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = detail::zip_values(a.value(), b.value(), [](double x, double y) { return x - y; });
  return t.push(detail::make_node(OpKind::Sub, {a.id, b.id}), std::move(out));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = detail::zip_values(a.value(), b.value(), [](double x, double y) { return x * y; });
  return t.push(detail::make_node(OpKind::Mul, {a.id, b.id}), std::move(out));
}

inline Var scale(Var a, double c) {
  Tensor out = detail::map_values(a.value(), [c](double x) { return c * x; });
  auto n = detail::make_node(OpKind::Scale, {a.id});
  n.real_attr = c;
  return a.tape->push(std::move(n), std::move(out));
}

// X[r,k] + bias[k] added to every row. This is the only broadcast the tape
// supports.
inline Var add_bias(Var x, Var bias) {
  Tape& t = detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_matrix(xv, "add_bias");
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " +
                         shape_str(xv.shape()));
  }
  std::vector<double> out(xv.values());
  const std::size_t k = xv.cols();
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += bv[j];
  }
  return t.push(detail::make_node(OpKind::AddBias, {x.id, bias.id}), Tensor(xv.shape(), std::move(out)));
}

inline Var relu(Var x) {
  return x.tape->push(detail::make_node(OpKind::Relu, {x.id}), relu(x.value()));
}

// Max over consecutive groups of `group` rows: X[g*group, d] -> [g, d].
inline Var max_over_points(Var x, std::size_t group) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "max_over_points");
  if (group == 0) throw DomainError("max_over_points of an empty point set");
  if (xv.rows() % group != 0) {
    throw DimensionError("max_over_points: " + std::to_string(xv.rows()) +
                         " rows not divisible into groups of " + std::to_string(group));
  }
  const std::size_t groups = xv.rows() / group;
  const std::size_t d = xv.cols();
  std::vector<double> out(groups * d);
  std::vector<std::size_t> argmax(groups * d);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = g * group;
      double v = xv.at(best, j);
      for (std::size_t i = best + 1; i < (g + 1) * group; ++i) {
        if (xv.at(i, j) > v) {
          v = xv.at(i, j);
          best = i;
        }
      }
      out[g * d + j] = v;
      argmax[g * d + j] = best;
    }
  }
  auto n = detail::make_node(OpKind::MaxOverPoints, {x.id});
  n.int_attr = group;
  n.index_attr = std::move(argmax);
  return x.tape->push(std::move(n), Tensor({groups, d}, std::move(out)));
}

inline Var max_over_points(Var x) { return max_over_points(x, x.value().rows()); }

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->push(detail::make_node(OpKind::Sum, {x.id}), Tensor::scalar(s));
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var exp(Var x) {
  return x.tape->push(detail::make_node(OpKind::Exp, {x.id}),
                      detail::map_values(x.value(), [](double v) { return std::exp(v); }));
}

// |x|^p elementwise.
inline Var abs_pow(Var x, double p) {
  auto n = detail::make_node(OpKind::AbsPow, {x.id});
  n.real_attr = p;
  return x.tape->push(std::move(n),
                      detail::map_values(x.value(), [p](double v) { return std::pow(std::abs(v), p); }));
}

// x^q elementwise for strictly positive x.
inline Var pow(Var x, double q) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("pow requires positive inputs");
  }
  auto n = detail::make_node(OpKind::Pow, {x.id});
  n.real_attr = q;
  return x.tape->push(std::move(n), detail::map_values(x.value(), [q](double v) { return std::pow(v, q); }));
}

// [r,k] -> [r,1]
inline Var row_sum(Var x) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "row_sum");
  std::vector<double> out(xv.rows(), 0.0);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (double v : xv.row(i)) out[i] += v;
  }
  return x.tape->push(detail::make_node(OpKind::RowSum, {x.id}), Tensor({xv.rows(), 1}, std::move(out)));
}

// X[r,k] / n[r,1], row by row.
inline Var div_rows(Var x, Var denom) {
  Tape& t = detail::same_tape(x, denom);
  const Tensor& xv = x.value();
  const Tensor& nv = denom.value();
  detail::require_matrix(xv, "div_rows");
  if (nv.size() != xv.rows()) {
    throw DimensionError("div_rows: denominator " + shape_str(nv.shape()) + " for " + shape_str(xv.shape()));
  }
  std::vector<double> out(xv.size());
  const std::size_t k = xv.cols();
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = xv.at(i, j) / nv[i];
  }
  return t.push(detail::make_node(OpKind::DivRows, {x.id, denom.id}), Tensor(xv.shape(), std::move(out)));
}

// l2 normalization with the closed-form tangential backward.
inline Var normalize_l2(Var f, double eps_guard = kDefaultEpsGuard) {
  const Tensor& fv = f.value();
  detail::require_matrix(fv, "normalize_l2");
  auto n = detail::make_node(OpKind::NormalizeL2, {f.id});
  n.real_attr = eps_guard;
  return f.tape->push(std::move(n), normalize(fv, 2, eps_guard));
}

// p-norm normalization assembled from elementwise primitives, so its
// gradient comes from the generic rules (sign(v)|v|^(p-1), 0 at 0).
inline Var normalize_generic(Var f, int p, double eps_guard = kDefaultEpsGuard) {
  if (p < 1 || p > 3) throw DomainError("norm order must be 1, 2 or 3, got " + std::to_string(p));
  const auto norms = row_norms(f.value(), p);
  check_row_norms(norms, eps_guard);
  Var powered = abs_pow(f, static_cast<double>(p));
  Var total = row_sum(powered);
  Var norm = p == 1 ? total : pow(total, 1.0 / static_cast<double>(p));
  return div_rows(f, norm);
}

inline Var normalize_p(Var f, int p, double eps_guard = kDefaultEpsGuard) {
  return p == 2 ? normalize_l2(f, eps_guard) : normalize_generic(f, p, eps_guard);
}

inline constexpr double kBatchNormEps = 1e-5;

// Per-feature standardization followed by gamma * x_hat + beta. With
// `running` set, the given statistics are used as constants; otherwise the
// batch mean and biased variance are used and returned through `batch_stats`.
struct BatchStats {
  Tensor mean;
  Tensor var;
};

inline Var batch_norm(Var x, Var gamma, Var beta, const BatchStats* running, BatchStats* batch_stats) {
  Tape& t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "batch_norm");
  const std::size_t b = xv.rows();
  const std::size_t k = xv.cols();
  if (gamma.value().size() != k || beta.value().size() != k) {
    throw DimensionError("batch_norm: scale/shift do not match feature width " + std::to_string(k));
  }
  std::vector<double> mu(k, 0.0), var(k, 0.0);
  if (running != nullptr) {
    std::copy(running->mean.data().begin(), running->mean.data().end(), mu.begin());
    std::copy(running->var.data().begin(), running->var.data().end(), var.begin());
  } else {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j) mu[j] += xv.at(i, j);
    for (auto& m : mu) m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double c = xv.at(i, j) - mu[j];
        var[j] += c * c;
      }
    for (auto& v : var) v /= static_cast<double>(b);
    if (batch_stats != nullptr) {
      batch_stats->mean = Tensor::vector(mu);
      batch_stats->var = Tensor::vector(var);
    }
  }
  std::vector<double> inv_std(k);
  for (std::size_t j = 0; j < k; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + kBatchNormEps);
  std::vector<double> xhat(b * k), out(b * k);
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      xhat[i * k + j] = (xv.at(i, j) - mu[j]) * inv_std[j];
      out[i * k + j] = gv[j] * xhat[i * k + j] + bv[j];
    }
  }
  auto n = detail::make_node(OpKind::BatchNorm, {x.id, gamma.id, beta.id});
  n.int_attr = running != nullptr ? 1 : 0;
  n.saved.push_back(Tensor({b, k}, std::move(xhat)));
  n.saved.push_back(Tensor::vector(std::move(inv_std)));
  return t.push(std::move(n), Tensor({b, k}, std::move(out)));
}

// X[b,k] -> [b*times,k]; row s*times+i is X[s].
inline Var repeat_rows(Var x, std::size_t times) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "repeat_rows");
  const std::size_t k = xv.cols();
  std::vector<double> out;
  out.reserve(xv.size() * times);
  for (std::size_t s = 0; s < xv.rows(); ++s) {
    const auto r = xv.row(s);
    for (std::size_t i = 0; i < times; ++i) out.insert(out.end(), r.begin(), r.end());
  }
  auto n = detail::make_node(OpKind::RepeatRows, {x.id});
  n.int_attr = times;
  return x.tape->push(std::move(n), Tensor({xv.rows() * times, k}, std::move(out)));
}

// X[m,k] -> [times*m,k]; row s*m+i is X[i].
inline Var tile_rows(Var x, std::size_t times) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "tile_rows");
  std::vector<double> out;
  out.reserve(xv.size() * times);
  for (std::size_t s = 0; s < times; ++s) out.insert(out.end(), xv.data().begin(), xv.data().end());
  auto n = detail::make_node(OpKind::TileRows, {x.id});
  n.int_attr = times;
  return x.tape->push(std::move(n), Tensor({xv.rows() * times, xv.cols()}, std::move(out)));
}

// Rows [begin, end) of X.
inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "slice_rows");
  if (begin >= end || end > xv.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(xv.shape()));
  }
  const std::size_t k = xv.cols();
  std::vector<double> out(xv.data().begin() + begin * k, xv.data().begin() + end * k);
  auto n = detail::make_node(OpKind::SliceRows, {x.id});
  n.index_attr = {begin, end};
  return x.tape->push(std::move(n), Tensor({end - begin, k}, std::move(out)));
}

inline Var reshape(Var x, Shape shape) {
  return x.tape->push(detail::make_node(OpKind::Reshape, {x.id}), x.value().reshaped(std::move(shape)));
}

// Mean over rows of -log softmax(logits_i)[label_i], max-shifted.
inline Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  const std::size_t b = lv.rows();
  const std::size_t c = lv.cols();
  if (labels.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw DomainError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                        " classes");
    }
    const auto r = lv.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(r[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(r[j] - mx) / z;
    loss += -(r[labels[i]] - mx - std::log(z));
  }
  auto n = detail::make_node(OpKind::SoftmaxCrossEntropy, {logits.id});
  n.index_attr = labels;
  n.saved.push_back(Tensor({b, c}, std::move(probs)));
  return logits.tape->push(std::move(n), Tensor::scalar(loss / static_cast<double>(b)));
}

// Batched chamfer between `batch` stacked clouds in A and in B. Nearest
// neighbour pairs are frozen at the evaluation point for the backward pass.
inline Var chamfer(Var a, Var b, std::size_t batch = 1) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "chamfer");
  detail::require_matrix(bv, "chamfer");
  if (av.cols() != 3 || bv.cols() != 3) throw DimensionError("chamfer expects n x 3 point sets");
  if (batch == 0 || av.rows() % batch != 0 || bv.rows() % batch != 0) {
    throw DimensionError("chamfer: row counts not divisible by batch " + std::to_string(batch));
  }
  auto pairs = detail::chamfer_pairs(av, bv, batch);
  auto n = detail::make_node(OpKind::Chamfer, {a.id, b.id});
  n.int_attr = batch;
  n.index_attr = std::move(pairs.a_to_b);
  n.index_attr.insert(n.index_attr.end(), pairs.b_to_a.begin(), pairs.b_to_a.end());
  return t.push(std::move(n), Tensor::scalar(pairs.loss));
}

// ---------------------------------------------------------------------------
// Reverse sweep.

namespace detail {

inline void backprop_node(const Tape& tape, NodeId id, const Tensor& g, GradientMap& grads) {
  const TapeNode& node = tape.node(id);
  const Tensor& out = tape.value(id);
  auto wants = [&](std::size_t k) { return tape.node(node.parent_ids[k]).requires_grad; };
  auto parent = [&](std::size_t k) -> const Tensor& { return tape.value(node.parent_ids[k]); };
  auto emit = [&](std::size_t k, Tensor t) { grads.accumulate(node.parent_ids[k], std::move(t)); };

  switch (node.op) {
    case OpKind::Leaf:
      return;
    case OpKind::MatMul:
      if (wants(0)) emit(0, gemm(g, parent(1), Transpose::Right));
      if (wants(1)) emit(1, gemm(parent(0), g, Transpose::Left));
      return;
    case OpKind::Add:
      if (wants(0)) emit(0, g);
      if (wants(1)) emit(1, g);
      return;
    case OpKind::Sub:
      if (wants(0)) emit(0, g);
      if (wants(1)) emit(1, map_values(g, [](double v) { return -v; }));
      return;
    case OpKind::Mul:
      if (wants(0)) emit(0, zip_values(g, parent(1), [](double u, double y) { return u * y; }));
      if (wants(1)) emit(1, zip_values(g, parent(0), [](double u, double x) { return u * x; }));
      return;
    case OpKind::Scale: {
      const double c = node.real_attr;
      emit(0, map_values(g, [c](double v) { return c * v; }));
      return;
    }
    case OpKind::AddBias: {
      if (wants(0)) emit(0, g);
      if (wants(1)) {
        const Tensor& bias = parent(1);
        std::vector<double> gb(bias.size(), 0.0);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const auto r = g.row(i);
          for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += r[j];
        }
        emit(1, Tensor(bias.shape(), std::move(gb)));
      }
      return;
    }
    case OpKind::Relu:
      emit(0, zip_values(g, parent(0), [](double u, double x) { return x > 0.0 ? u : 0.0; }));
      return;
    case OpKind::MaxOverPoints: {
      const Tensor& x = parent(0);
      std::vector<double> gx(x.size(), 0.0);
      const std::size_t d = x.cols();
      for (std::size_t idx = 0; idx < node.index_attr.size(); ++idx) {
        gx[node.index_attr[idx] * d + idx % d] += g[idx];
      }
      emit(0, Tensor(x.shape(), std::move(gx)));
      return;
    }
    case OpKind::Sum:
      emit(0, Tensor::filled(parent(0).shape(), g.item()));
      return;
    case OpKind::Exp:
      emit(0, zip_values(g, out, [](double u, double y) { return u * y; }));
      return;
    case OpKind::AbsPow: {
      const double p = node.real_attr;
      emit(0, zip_values(g, parent(0), [p](double u, double x) {
             if (x == 0.0) return 0.0;
             const double s = x > 0.0 ? 1.0 : -1.0;
             return u * p * s * std::pow(std::abs(x), p - 1.0);
           }));
      return;
    }
    case OpKind::Pow: {
      const double q = node.real_attr;
      emit(0, zip_values(g, parent(0), [q](double u, double x) { return u * q * std::pow(x, q - 1.0); }));
      return;
    }
    case OpKind::RowSum: {
      const Tensor& x = parent(0);
      std::vector<double> gx(x.size());
      const std::size_t k = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) gx[i * k + j] = g[i];
      emit(0, Tensor(x.shape(), std::move(gx)));
      return;
    }
    case OpKind::DivRows: {
      const Tensor& x = parent(0);
      const Tensor& n = parent(1);
      const std::size_t k = x.cols();
      if (wants(0)) {
        std::vector<double> gx(x.size());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < k; ++j) gx[i * k + j] = g[i * k + j] / n[i];
        emit(0, Tensor(x.shape(), std::move(gx)));
      }
      if (wants(1)) {
        std::vector<double> gn(n.size(), 0.0);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += g[i * k + j] * x.at(i, j);
          gn[i] = -s / (n[i] * n[i]);
        }
        emit(1, Tensor(n.shape(), std::move(gn)));
      }
      return;
    }
    case OpKind::NormalizeL2:
      emit(0, normalize_backward_l2(parent(0), g, node.real_attr));
      return;
    case OpKind::BatchNorm: {
      const Tensor& xhat = node.saved[0];
      const Tensor& inv_std = node.saved[1];
      const Tensor& gamma = parent(1);
      const std::size_t b = xhat.rows();
      const std::size_t k = xhat.cols();
      std::vector<double> sum_g(k, 0.0), sum_gx(k, 0.0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          sum_g[j] += g[i * k + j];
          sum_gx[j] += g[i * k + j] * xhat[i * k + j];
        }
      if (wants(0)) {
        std::vector<double> gx(b * k);
        const bool frozen = node.int_attr == 1;
        const double bd = static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double u = g[i * k + j];
            gx[i * k + j] = frozen ? gamma[j] * inv_std[j] * u
                                   : gamma[j] * inv_std[j] / bd *
                                         (bd * u - sum_g[j] - xhat[i * k + j] * sum_gx[j]);
          }
        emit(0, Tensor({b, k}, std::move(gx)));
      }
      if (wants(1)) emit(1, Tensor(gamma.shape(), sum_gx));
      if (wants(2)) emit(2, Tensor(parent(2).shape(), sum_g));
      return;
    }
    case OpKind::RepeatRows: {
      const Tensor& x = parent(0);
      const std::size_t times = node.int_attr;
      const std::size_t k = x.cols();
      std::vector<double> gx(x.size(), 0.0);
      for (std::size_t s = 0; s < x.rows(); ++s)
        for (std::size_t i = 0; i < times; ++i) {
          const auto r = g.row(s * times + i);
          for (std::size_t j = 0; j < k; ++j) gx[s * k + j] += r[j];
        }
      emit(0, Tensor(x.shape(), std::move(gx)));
      return;
    }
    case OpKind::TileRows: {
      const Tensor& x = parent(0);
      const std::size_t times = node.int_attr;
      std::vector<double> gx(x.size(), 0.0);
      for (std::size_t s = 0; s < times; ++s)
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[s * x.size() + i];
      emit(0, Tensor(x.shape(), std::move(gx)));
      return;
    }
    case OpKind::SliceRows: {
      const Tensor& x = parent(0);
      const std::size_t k = x.cols();
      std::vector<double> gx(x.size(), 0.0);
      std::copy(g.data().begin(), g.data().end(), gx.begin() + node.index_attr[0] * k);
      emit(0, Tensor(x.shape(), std::move(gx)));
      return;
    }
    case OpKind::Reshape:
      emit(0, g.reshaped(parent(0).shape()));
      return;
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& probs = node.saved[0];
      const std::size_t b = probs.rows();
      const std::size_t c = probs.cols();
      const double u = g.item() / static_cast<double>(b);
      std::vector<double> gl(probs.values());
      for (std::size_t i = 0; i < b; ++i) gl[i * c + node.index_attr[i]] -= 1.0;
      for (auto& v : gl) v *= u;
      emit(0, Tensor({b, c}, std::move(gl)));
      return;
    }
    case OpKind::Chamfer: {
      const Tensor& a = parent(0);
      const Tensor& b = parent(1);
      const std::size_t batch = node.int_attr;
      const double u = g.item() / static_cast<double>(batch);
      const double wa = u / static_cast<double>(a.rows() / batch);
      const double wb = u / static_cast<double>(b.rows() / batch);
      std::vector<double> ga(a.size(), 0.0), gb(b.size(), 0.0);
      // a-side terms: w * |a_i - b_nn(i)|^2
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const std::size_t j = node.index_attr[i];
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = 2.0 * wa * (a[i * 3 + c] - b[j * 3 + c]);
          ga[i * 3 + c] += diff;
          gb[j * 3 + c] -= diff;
        }
      }
      for (std::size_t j = 0; j < b.rows(); ++j) {
        const std::size_t i = node.index_attr[a.rows() + j];
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = 2.0 * wb * (b[j * 3 + c] - a[i * 3 + c]);
          gb[j * 3 + c] += diff;
          ga[i * 3 + c] -= diff;
        }
      }
      if (wants(0)) emit(0, Tensor(a.shape(), std::move(ga)));
      if (wants(1)) emit(1, Tensor(b.shape(), std::move(gb)));
      return;
    }
  }
}

}  // namespace detail

// Reverse accumulation from a scalar loss. Gradients of intermediate nodes
// are kept only when `keep_intermediate` is set; leaves always keep theirs.
inline GradientMap backward(const Tape& tape, Var loss, bool keep_intermediate = true) {
  if (loss.tape != &tape) throw ContractError("loss node is not on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.value().shape()));
  }
  GradientMap grads(tape.size());
  grads.accumulate(loss.id, Tensor(loss.value().shape(), {1.0}));
  for (NodeId id = loss.id + 1; id-- > 0;) {
    if (!grads.has(id)) continue;
    const TapeNode& node = tape.node(id);
    if (!node.requires_grad) continue;
    detail::backprop_node(tape, id, grads.at(id), grads);
    if (!keep_intermediate && node.op != OpKind::Leaf && id != loss.id) grads.release(id);
  }
  return grads;
}

}  // namespace hyperlab
