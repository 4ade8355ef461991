#pragma once

// Hyperspherical embedding module: an optional stack of linear layers
// (optionally followed by batch-norm and ReLU) and a p-norm normalization
// that places the embedding on the unit sphere.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/normalize.hpp"
#include "hyperlab/params.hpp"
#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

enum class Mode { Train, Eval };

struct HypersphereConfig {
  int mlp_layers = 1;
  bool use_relu_bn = false;
  int norm_p = 2;
  // Off only for the "MLP without normalization" ablation row.
  bool apply_norm = true;
  std::size_t input_dim = 128;
  std::size_t output_dim = 128;
  double eps_guard = kDefaultEpsGuard;

  void validate() const {
    if (mlp_layers < 0 || mlp_layers > 2) throw ConfigError("hyper.mlp_layers must be 0, 1 or 2");
    if (norm_p < 1 || norm_p > 3) throw ConfigError("hyper.norm_p must be 1, 2 or 3");
    if (input_dim == 0 || output_dim == 0) throw ConfigError("hyper dims must be >= 1");
    if (!(eps_guard > 0.0)) throw ConfigError("hyper.eps_guard must be > 0");
    if (mlp_layers == 0 && input_dim != output_dim) {
      throw ConfigError("hyper.output_dim must equal input_dim when mlp_layers = 0");
    }
  }

  std::size_t layer_input(int layer) const { return layer == 0 ? input_dim : output_dim; }
};

inline constexpr double kBatchNormMomentum = 0.9;
inline const std::string kHyperBlock = "hyper";

inline void add_hypersphere_params(ModelParams& params, const HypersphereConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  for (int l = 0; l < cfg.mlp_layers; ++l) {
    const auto layer = static_cast<std::size_t>(l);
    add_linear(params, kHyperBlock, layer, cfg.layer_input(l), cfg.output_dim, rng);
    if (cfg.use_relu_bn) {
      params.tensors[param_name(kHyperBlock, layer, "bn_gamma")] = Tensor::filled({cfg.output_dim}, 1.0);
      params.tensors[param_name(kHyperBlock, layer, "bn_beta")] = Tensor::zeros({cfg.output_dim});
      params.buffers[param_name(kHyperBlock, layer, "bn_mean")] = Tensor::zeros({cfg.output_dim});
      params.buffers[param_name(kHyperBlock, layer, "bn_var")] = Tensor::filled({cfg.output_dim}, 1.0);
    }
  }
}

inline std::size_t hypersphere_param_count(const HypersphereConfig& cfg) {
  std::size_t n = 0;
  for (int l = 0; l < cfg.mlp_layers; ++l) {
    n += cfg.layer_input(l) * cfg.output_dim + cfg.output_dim;
    if (cfg.use_relu_bn) n += 2 * cfg.output_dim;
  }
  return n;
}

struct EmbeddingVars {
  Var pre_norm;
  Var post_norm;
};

// f (pre_norm), f_hat (post_norm) and ||f||_p per row.
struct EmbeddingBatch {
  Tensor pre_norm;
  Tensor post_norm;
  Tensor norms;
};

// Records the module on the tape. In Train mode batch-norm layers use batch
// statistics and fold them into the running buffers; Eval mode reads the
// running buffers.
inline EmbeddingVars hyper_forward(BoundParams& p, Var embedding, const HypersphereConfig& cfg, Mode mode) {
  cfg.validate();
  const Tensor& in = embedding.value();
  if (in.rank() != 2 || in.cols() != cfg.input_dim) {
    throw DimensionError("hyper_forward expects [b," + std::to_string(cfg.input_dim) + "], got " +
                         shape_str(in.shape()));
  }
  Var h = embedding;
  for (int l = 0; l < cfg.mlp_layers; ++l) {
    const auto layer = static_cast<std::size_t>(l);
    h = linear(p, h, kHyperBlock, layer);
    if (cfg.use_relu_bn) {
      const std::string mean_name = param_name(kHyperBlock, layer, "bn_mean");
      const std::string var_name = param_name(kHyperBlock, layer, "bn_var");
      Var gamma = p(param_name(kHyperBlock, layer, "bn_gamma"));
      Var beta = p(param_name(kHyperBlock, layer, "bn_beta"));
      if (mode == Mode::Eval) {
        const BatchStats running{p.params().buffer(mean_name), p.params().buffer(var_name)};
        h = batch_norm(h, gamma, beta, &running, nullptr);
      } else {
        BatchStats stats;
        h = batch_norm(h, gamma, beta, nullptr, &stats);
        auto blend = [](Tensor& run, const Tensor& batch) {
          auto r = run.mutable_data();
          for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] = kBatchNormMomentum * r[j] + (1.0 - kBatchNormMomentum) * batch[j];
          }
        };
        blend(p.params().buffers.at(mean_name), stats.mean);
        blend(p.params().buffers.at(var_name), stats.var);
      }
      h = relu(h);
    }
  }
  if (!cfg.apply_norm) return {h, h};
  return {h, normalize_p(h, cfg.norm_p, cfg.eps_guard)};
}

inline EmbeddingBatch to_batch(const EmbeddingVars& vars, const HypersphereConfig& cfg) {
  const Tensor& pre = vars.pre_norm.value();
  return {pre, vars.post_norm.value(), Tensor::vector(row_norms(pre, cfg.apply_norm ? cfg.norm_p : 2))};
}

// Value-level forward on a [b,in] batch.
inline EmbeddingBatch hyper_forward(const Tensor& embedding, const ModelParams& params,
                                    const HypersphereConfig& cfg, Mode mode = Mode::Eval) {
  Tape tape;
  ModelParams scratch = params;
  BoundParams bound(tape, scratch, false);
  Var in = tape.constant(embedding.rank() == 1 ? embedding.reshaped({1, embedding.size()}) : embedding);
  return to_batch(hyper_forward(bound, in, cfg, mode), cfg);
}

// Upstream gradient dL/df_hat for the current f at step t.
using UpstreamFn = std::function<Tensor(const Tensor& f, std::size_t step)>;

// Plain gradient descent on the embedding itself with the l2 backward:
// f <- f - eta * dL/df. Returns ||f_t||_2 for t = 0..steps.
inline std::vector<double> sgd_norm_trace(const Tensor& f0, const UpstreamFn& grad_fn, double eta,
                                          std::size_t steps, double eps_guard = kDefaultEpsGuard) {
  if (!(eta > 0.0)) throw DomainError("learning rate must be positive");
  Tensor f = f0.reshaped({1, f0.size()});
  std::vector<double> norms{l2_norm(f.data())};
  norms.reserve(steps + 1);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor upstream = grad_fn(f, t).reshaped({1, f.size()});
    const Tensor grad = normalize_backward_l2(f, upstream, eps_guard);
    auto fd = f.mutable_data();
    for (std::size_t j = 0; j < fd.size(); ++j) fd[j] -= eta * grad[j];
    f.check_finite();
    norms.push_back(l2_norm(f.data()));
  }
  return norms;
}

}  // namespace hyperlab
