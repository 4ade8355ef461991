#pragma once

// Encoder-decoder pipeline: a PointNet-style encoder (shared per-point MLP
// followed by max pooling), an optional hypersphere module, and two heads
// consuming the same embedding: a one-stage folding decoder for completion
// and a two-layer classifier.

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperlab/errors.hpp"
#include "hyperlab/hypersphere.hpp"
#include "hyperlab/params.hpp"
#include "hyperlab/rng.hpp"
#include "hyperlab/tape.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

inline const std::string kEncoderBlock = "encoder";
inline const std::string kFoldBlock = "fold";
inline const std::string kClassifierBlock = "cls";

struct ArchConfig {
  std::size_t embedding_dim = 128;
  std::vector<std::size_t> encoder_hidden{64, 128};
  std::size_t grid_side = 16;
  std::vector<std::size_t> decoder_hidden{128, 64};
  std::size_t classifier_hidden = 64;
  std::size_t num_classes = 4;
  bool hyper_enabled = true;
  HypersphereConfig hyper;
  bool completion = true;
  bool classification = false;

  // Width of the embedding the decoders consume.
  std::size_t decoder_input_dim() const { return hyper_enabled ? hyper.output_dim : embedding_dim; }
  std::size_t grid_points() const { return grid_side * grid_side; }

  void validate() const {
    if (embedding_dim == 0) throw ConfigError("model.embedding_dim must be >= 1");
    if (grid_side == 0) throw ConfigError("model.grid_side must be >= 1");
    if (num_classes == 0) throw ConfigError("model.num_classes must be >= 1");
    if (classifier_hidden == 0) throw ConfigError("model.classifier_hidden must be >= 1");
    for (auto w : encoder_hidden)
      if (w == 0) throw ConfigError("encoder widths must be >= 1");
    for (auto w : decoder_hidden)
      if (w == 0) throw ConfigError("decoder widths must be >= 1");
    if (!completion && !classification) throw ConfigError("at least one decoder must be enabled");
    if (hyper_enabled) {
      if (hyper.input_dim != embedding_dim) {
        throw ConfigError("hyper.input_dim must equal model.embedding_dim");
      }
      hyper.validate();
    }
  }

  // Encoder layer widths including input (3) and output (embedding_dim).
  std::vector<std::size_t> encoder_widths() const {
    std::vector<std::size_t> w{3};
    w.insert(w.end(), encoder_hidden.begin(), encoder_hidden.end());
    w.push_back(embedding_dim);
    return w;
  }

  std::vector<std::size_t> decoder_widths() const {
    std::vector<std::size_t> w{decoder_input_dim() + 2};
    w.insert(w.end(), decoder_hidden.begin(), decoder_hidden.end());
    w.push_back(3);
    return w;
  }

  // Name of the encoder's final linear weight (the W in f = W x).
  std::string final_encoder_weight() const {
    return param_name(kEncoderBlock, encoder_hidden.size(), "weight");
  }
};

namespace detail {
inline std::size_t mlp_count(const std::vector<std::size_t>& widths) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) n += widths[i] * widths[i + 1] + widths[i + 1];
  return n;
}
}  // namespace detail

// Closed form: sum over linear layers of in*out + out, plus 2*out per
// batch-norm layer in the hypersphere module. Decoders are always allocated
// so checkpoints stay interchangeable across task settings.
inline std::size_t parameter_count(const ArchConfig& cfg) {
  std::size_t n = detail::mlp_count(cfg.encoder_widths());
  if (cfg.hyper_enabled) n += hypersphere_param_count(cfg.hyper);
  n += detail::mlp_count(cfg.decoder_widths());
  n += detail::mlp_count({cfg.decoder_input_dim(), cfg.classifier_hidden, cfg.num_classes});
  return n;
}

inline ModelParams init_params(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = keyed_rng(seed, Stream::Init);
  ModelParams params;
  const auto enc = cfg.encoder_widths();
  for (std::size_t l = 0; l + 1 < enc.size(); ++l) add_linear(params, kEncoderBlock, l, enc[l], enc[l + 1], rng);
  if (cfg.hyper_enabled) add_hypersphere_params(params, cfg.hyper, rng);
  const auto dec = cfg.decoder_widths();
  for (std::size_t l = 0; l + 1 < dec.size(); ++l) add_linear(params, kFoldBlock, l, dec[l], dec[l + 1], rng);
  add_linear(params, kClassifierBlock, 0, cfg.decoder_input_dim(), cfg.classifier_hidden, rng);
  add_linear(params, kClassifierBlock, 1, cfg.classifier_hidden, cfg.num_classes, rng);
  return params;
}

// Uniform lattice on [-0.5, 0.5]^2, x-major.
inline Tensor folding_grid(std::size_t side) {
  if (side == 0) throw DimensionError("grid side must be >= 1");
  std::vector<double> g;
  g.reserve(side * side * 2);
  auto coord = [side](std::size_t i) {
    return side == 1 ? 0.0 : -0.5 + static_cast<double>(i) / static_cast<double>(side - 1);
  };
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      g.push_back(coord(i));
      g.push_back(coord(j));
    }
  }
  return Tensor({side * side, 2}, std::move(g));
}

// points: [b*n, 3] holding b clouds of n points. Returns [b, d].
inline Var encode(BoundParams& p, Var points, std::size_t points_per_cloud, std::size_t layers) {
  const Tensor& pv = points.value();
  if (pv.rank() != 2 || pv.cols() != 3) throw DimensionError("encode expects [n,3], got " + shape_str(pv.shape()));
  if (points_per_cloud == 0) throw DomainError("encode of an empty point cloud");
  Var h = points;
  for (std::size_t l = 0; l < layers; ++l) {
    h = linear(p, h, kEncoderBlock, l);
    if (l + 1 < layers) h = relu(h);
  }
  return max_over_points(h, points_per_cloud);
}

// embedding: [b, D]. Returns [b*m, 3], m = grid_side^2. The first layer acts
// on concat(embedding, grid point); it is evaluated as E*W[:D] + G*W[D:] so the
// embedding product is computed once per cloud.
inline Var fold_decode(BoundParams& p, Var embedding, std::size_t grid_side, std::size_t layers) {
  const Tensor& ev = embedding.value();
  if (ev.rank() != 2) throw DimensionError("fold_decode expects [b,D], got " + shape_str(ev.shape()));
  const std::size_t b = ev.rows();
  const std::size_t d = ev.cols();
  Var w0 = p(param_name(kFoldBlock, 0, "weight"));
  if (w0.value().rows() != d + 2) {
    throw DimensionError("fold_decode: embedding width " + std::to_string(d) + " does not match decoder input " +
                         std::to_string(w0.value().rows() - 2) + "+2");
  }
  const std::size_t m = grid_side * grid_side;
  Var grid = p.tape().constant(folding_grid(grid_side));
  Var from_embedding = repeat_rows(matmul(embedding, slice_rows(w0, 0, d)), m);
  Var from_grid = tile_rows(matmul(grid, slice_rows(w0, d, d + 2)), b);
  Var h = add_bias(add(from_embedding, from_grid), p(param_name(kFoldBlock, 0, "bias")));
  for (std::size_t l = 1; l < layers; ++l) {
    h = linear(p, relu(h), kFoldBlock, l);
  }
  return h;
}

// embedding: [b, D] -> logits [b, c]
inline Var classify(BoundParams& p, Var embedding) {
  const Tensor& ev = embedding.value();
  const Tensor& w0 = p.params().at(param_name(kClassifierBlock, 0, "weight"));
  if (ev.rank() != 2 || ev.cols() != w0.rows()) {
    throw DimensionError("classify: embedding " + shape_str(ev.shape()) + " vs weight " + shape_str(w0.shape()));
  }
  return linear(p, relu(linear(p, embedding, kClassifierBlock, 0)), kClassifierBlock, 1);
}

struct PipelineVars {
  Var raw;                               // E(x)
  std::optional<EmbeddingVars> hyper;    // present when the module is enabled
  Var embedding;                         // what every decoder consumes
  std::optional<Var> completion;         // [b*m, 3]
  std::optional<Var> logits;             // [b, c]
};

// y_i = D_i(E(x)) with an optional hypersphere module between E and the D_i.
inline PipelineVars pipeline_forward(BoundParams& p, Var points, std::size_t points_per_cloud,
                                     const ArchConfig& cfg, Mode mode) {
  PipelineVars out;
  out.raw = encode(p, points, points_per_cloud, cfg.encoder_widths().size() - 1);
  out.embedding = out.raw;
  if (cfg.hyper_enabled) {
    out.hyper = hyper_forward(p, out.raw, cfg.hyper, mode);
    out.embedding = out.hyper->post_norm;
  }
  if (cfg.completion) out.completion = fold_decode(p, out.embedding, cfg.grid_side, cfg.decoder_widths().size() - 1);
  if (cfg.classification) out.logits = classify(p, out.embedding);
  return out;
}

// ---------------------------------------------------------------------------
// Value-level wrappers for a single cloud.

struct PipelineOutput {
  EmbeddingBatch embedding_batch;
  std::optional<Tensor> completion;
  std::optional<Tensor> logits;
};

inline Tensor encode(const Tensor& points, const ModelParams& params, const ArchConfig& cfg) {
  if (points.rows() == 0) throw DomainError("encode of an empty point cloud");
  Tape tape;
  ModelParams scratch = params;
  BoundParams p(tape, scratch, false);
  Var e = encode(p, tape.constant(points), points.rows(), cfg.encoder_widths().size() - 1);
  return e.value().reshaped({e.value().size()});
}

inline Tensor fold_decode(const Tensor& embedding, const ModelParams& params, std::size_t grid_side) {
  Tape tape;
  ModelParams scratch = params;
  BoundParams p(tape, scratch, false);
  std::size_t layers = 0;
  while (params.contains(param_name(kFoldBlock, layers, "weight"))) ++layers;
  Var e = tape.constant(embedding.reshaped({1, embedding.size()}));
  return fold_decode(p, e, grid_side, layers).value();
}

inline Tensor classify(const Tensor& embedding, const ModelParams& params) {
  Tape tape;
  ModelParams scratch = params;
  BoundParams p(tape, scratch, false);
  Var out = classify(p, tape.constant(embedding.reshaped({1, embedding.size()})));
  return out.value().reshaped({out.value().size()});
}

inline PipelineOutput pipeline_forward(const Tensor& points, const ModelParams& params, const ArchConfig& cfg) {
  Tape tape;
  ModelParams scratch = params;
  BoundParams p(tape, scratch, false);
  const PipelineVars vars = pipeline_forward(p, tape.constant(points), points.rows(), cfg, Mode::Eval);
  PipelineOutput out;
  if (vars.hyper) {
    out.embedding_batch = to_batch(*vars.hyper, cfg.hyper);
  } else {
    const Tensor& raw = vars.raw.value();
    out.embedding_batch = {raw, raw, Tensor::vector(row_norms(raw, 2))};
  }
  if (vars.completion) out.completion = vars.completion->value();
  if (vars.logits) out.logits = vars.logits->value().reshaped({vars.logits->value().size()});
  return out;
}

}  // namespace hyperlab
