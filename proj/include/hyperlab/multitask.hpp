#pragma once

// Loss-combination strategies for joint completion + classification:
// fixed weights, gradient surgery (PCGrad), uncertainty weighting and a
// grid search over fixed weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

inline void validate_weights(std::size_t n_losses, const std::vector<double>& weights) {
  if (n_losses != weights.size()) {
    throw DimensionError("combine_weighted: " + std::to_string(n_losses) + " losses, " +
                         std::to_string(weights.size()) + " weights");
  }
  bool any = false;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("task weights must be finite and >= 0");
    any = any || w > 0.0;
  }
  if (!any) throw DomainError("task weights are all zero");
}

inline double combine_weighted(const std::vector<double>& losses, const std::vector<double>& weights) {
  validate_weights(losses.size(), weights);
  double s = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) s += weights[i] * losses[i];
  return s;
}

inline Var combine_weighted(const std::vector<Var>& losses, const std::vector<double>& weights) {
  validate_weights(losses.size(), weights);
  std::optional<Var> total;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    Var term = weights[i] == 1.0 ? losses[i] : scale(losses[i], weights[i]);
    total = total ? add(*total, term) : term;
  }
  return *total;
}

// sum_i exp(-s_i) L_i + s_i
inline double uncertainty_combine(const std::vector<double>& losses, const std::vector<double>& log_vars) {
  if (losses.size() != log_vars.size()) throw DimensionError("one log-variance per task required");
  double s = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) s += std::exp(-log_vars[i]) * losses[i] + log_vars[i];
  return s;
}

inline Var uncertainty_combine(const std::vector<Var>& losses, const std::vector<Var>& log_vars) {
  if (losses.size() != log_vars.size()) throw DimensionError("one log-variance per task required");
  if (losses.empty()) throw DomainError("uncertainty_combine needs at least one task");
  std::optional<Var> total;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    Var term = add(mul(exp(scale(log_vars[i], -1.0)), losses[i]), log_vars[i]);
    total = total ? add(*total, term) : term;
  }
  return *total;
}

using TaskGradients = std::vector<std::vector<double>>;

struct PcGradReport {
  TaskGradients adjusted;
  std::size_t projections = 0;
  std::size_t skipped_zero = 0;
};

// For each task i, visit the other tasks in a shuffled order and remove the
// component of g_i along any original g_j it conflicts with
// (<g_i, g_j> < 0). Zero-norm g_j are skipped and counted.
inline PcGradReport pcgrad_report(const TaskGradients& grads, std::mt19937_64& rng) {
  if (grads.size() < 2) throw DomainError("pcgrad needs at least two tasks");
  const std::size_t n = grads[0].size();
  for (const auto& g : grads) {
    if (g.size() != n) throw DimensionError("task gradients differ in length");
  }
  PcGradReport report;
  report.adjusted = grads;
  std::vector<double> sq(grads.size());
  for (std::size_t j = 0; j < grads.size(); ++j) sq[j] = dot(grads[j], grads[j]);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < grads.size(); ++j)
      if (j != i) order.push_back(j);
    std::shuffle(order.begin(), order.end(), rng);
    auto& gi = report.adjusted[i];
    for (std::size_t j : order) {
      const double ip = dot(gi, grads[j]);
      if (!(ip < 0.0)) continue;
      if (sq[j] == 0.0) {
        ++report.skipped_zero;
        continue;
      }
      const double c = ip / sq[j];
      for (std::size_t k = 0; k < n; ++k) gi[k] -= c * grads[j][k];
      ++report.projections;
    }
  }
  return report;
}

inline TaskGradients pcgrad(const TaskGradients& grads, std::mt19937_64& rng) {
  return pcgrad_report(grads, rng).adjusted;
}

struct SearchPoint {
  std::vector<double> weights;
  std::uint64_t seed = 0;
  bool ok = false;
  double chamfer = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct SearchResult {
  std::vector<double> best;
  std::vector<SearchPoint> table;
};

struct EvalOutcome {
  double chamfer;
  double accuracy;
};

using TrainEvalFn = std::function<EvalOutcome(const std::vector<double>& weights, std::uint64_t seed)>;

// Trains one run per grid point and keeps the weights with the lowest
// held-out chamfer. Failures are recorded and the search moves on.
inline SearchResult weight_search(const std::vector<std::vector<double>>& grid, const TrainEvalFn& train_eval,
                                  std::uint64_t seed) {
  if (grid.empty()) throw DomainError("weight_search needs a non-empty grid");
  SearchResult out;
  std::optional<std::size_t> best;
  for (const auto& w : grid) {
    SearchPoint pt;
    pt.weights = w;
    pt.seed = seed;
    try {
      const EvalOutcome r = train_eval(w, seed);
      pt.chamfer = r.chamfer;
      pt.accuracy = r.accuracy;
      pt.ok = std::isfinite(r.chamfer);
      if (!pt.ok) pt.error = "non-finite chamfer";
    } catch (const Error& e) {
      pt.error = e.what();
    }
    out.table.push_back(pt);
    if (pt.ok && (!best || pt.chamfer < out.table[*best].chamfer)) best = out.table.size() - 1;
  }
  if (!best) throw NumericError("weight_search: every grid point failed");
  out.best = out.table[*best].weights;
  return out;
}

// Completion weight 1 with classification weight in {0, 0.01, 0.1, 0.5, 1, 2}.
inline std::vector<std::vector<double>> default_weight_grid() {
  std::vector<std::vector<double>> grid;
  for (double w : {0.0, 0.01, 0.1, 0.5, 1.0, 2.0}) grid.push_back({1.0, w});
  return grid;
}

}  // namespace hyperlab
