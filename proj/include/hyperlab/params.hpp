#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

// Named parameter tensors ("<block>.<layer>.<weight|bias|bn_gamma|bn_beta>")
// plus non-trainable buffers such as batch-norm running statistics.
struct ModelParams {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor> buffers;

  bool contains(const std::string& name) const { return tensors.contains(name); }

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }

  const Tensor& buffer(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ContractError("missing buffer '" + name + "'");
    return it->second;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using NamedTensors = std::map<std::string, Tensor>;

// Kaiming-uniform (fan-in) weight [fan_in, fan_out].
inline Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = dist(rng);
  return Tensor({fan_in, fan_out}, std::move(w));
}

inline std::string param_name(const std::string& block, std::size_t layer, const char* kind) {
  return block + "." + std::to_string(layer) + "." + kind;
}

inline void add_linear(ModelParams& params, const std::string& block, std::size_t layer,
                       std::size_t in, std::size_t out, std::mt19937_64& rng) {
  params.tensors[param_name(block, layer, "weight")] = kaiming_uniform(in, out, rng);
  params.tensors[param_name(block, layer, "bias")] = Tensor::zeros({out});
}

// Puts parameters onto a tape on first use and remembers the mapping so
// gradients can be read back by name.
class BoundParams {
 public:
  BoundParams(Tape& tape, ModelParams& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Tensor& value = params_.at(name);
    Var v = trainable_ ? tape_.variable(value) : tape_.constant(value);
    vars_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  ModelParams& params() { return params_; }
  bool trainable() const { return trainable_; }

  const std::map<std::string, Var>& bound() const { return vars_; }

  // Gradient per bound parameter; parameters that did not influence the loss
  // get zeros.
  NamedTensors gradients(const GradientMap& grads) const {
    NamedTensors out;
    for (const auto& [name, var] : vars_) {
      out.emplace(name, grads.has(var) ? grads.at(var) : Tensor::zeros(var.value().shape()));
    }
    return out;
  }

 private:
  Tape& tape_;
  ModelParams& params_;
  bool trainable_;
  std::map<std::string, Var> vars_;
};

// x[r,in] * W + b
inline Var linear(BoundParams& p, Var x, const std::string& block, std::size_t layer) {
  return add_bias(matmul(x, p(param_name(block, layer, "weight"))), p(param_name(block, layer, "bias")));
}

}  // namespace hyperlab
