#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>

#include "hyperlab/errors.hpp"
#include "hyperlab/params.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

enum class OptimizerKind { Sgd, Adam, RmsProp };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::RmsProp: return "rmsprop";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "rmsprop") return OptimizerKind::RmsProp;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd, adam or rmsprop)");
}

struct OptimizerHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double rho = 0.9;
  double rms_eps = 1e-8;
};

// Per-parameter moments are keyed by name. One optimizer may serve several
// parameter maps (model weights and uncertainty log-variances) as long as
// their names do not collide.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, OptimizerHyper hyper = {}) : kind_(kind), lr_(lr), hyper_(hyper) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  }

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }
  std::size_t step_count() const { return steps_; }
  const NamedTensors& first_moments() const { return m_; }
  const NamedTensors& second_moments() const { return v_; }

  // Applies one update to every tensor in `params`; `grads` must cover
  // exactly that set.
  void step(NamedTensors& params, const NamedTensors& grads) {
    // Validate everything before touching any state.
    for (const auto& [name, theta] : params) {
      const auto it = grads.find(name);
      if (it == grads.end()) throw ContractError("missing gradient for parameter '" + name + "'");
      if (it->second.shape() != theta.shape()) {
        throw DimensionError("gradient shape " + shape_str(it->second.shape()) + " for parameter '" + name +
                             "' of shape " + shape_str(theta.shape()));
      }
    }
    for (const auto& [name, _] : grads) {
      if (!params.contains(name)) throw ContractError("gradient for unknown parameter '" + name + "'");
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    for (auto& [name, theta] : params) {
      const Tensor& g = grads.at(name);
      auto th = theta.mutable_data();
      switch (kind_) {
        case OptimizerKind::Sgd:
          for (std::size_t i = 0; i < th.size(); ++i) th[i] -= lr_ * g[i];
          break;
        case OptimizerKind::Adam: {
          auto m = moment(m_, name, theta).mutable_data();
          auto v = moment(v_, name, theta).mutable_data();
          const double c1 = 1.0 - std::pow(hyper_.beta1, t);
          const double c2 = 1.0 - std::pow(hyper_.beta2, t);
          for (std::size_t i = 0; i < th.size(); ++i) {
            m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
            v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
            th[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.adam_eps);
          }
          break;
        }
        case OptimizerKind::RmsProp: {
          auto v = moment(v_, name, theta).mutable_data();
          for (std::size_t i = 0; i < th.size(); ++i) {
            v[i] = hyper_.rho * v[i] + (1.0 - hyper_.rho) * g[i] * g[i];
            th[i] -= lr_ * g[i] / (std::sqrt(v[i]) + hyper_.rms_eps);
          }
          break;
        }
      }
      theta.check_finite();
    }
  }

 private:
  static Tensor& moment(NamedTensors& store, const std::string& name, const Tensor& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor::zeros(like.shape())).first;
    return it->second;
  }

  OptimizerKind kind_;
  double lr_;
  OptimizerHyper hyper_;
  std::size_t steps_ = 0;
  NamedTensors m_;
  NamedTensors v_;
};

}  // namespace hyperlab
