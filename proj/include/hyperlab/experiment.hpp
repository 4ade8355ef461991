#pragma once

// Experiment driver: seeded training loop with the multi-task strategies,
// held-out evaluation, learning-rate sweeps, the ablation grid, the
// multi-task comparison table and the diagnostic bundle.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "hyperlab/checkpoint.hpp"
#include "hyperlab/config.hpp"
#include "hyperlab/datasynth.hpp"
#include "hyperlab/diagnostics.hpp"
#include "hyperlab/hypersphere.hpp"
#include "hyperlab/losses.hpp"
#include "hyperlab/multitask.hpp"
#include "hyperlab/netblocks.hpp"
#include "hyperlab/optim.hpp"
#include "hyperlab/params.hpp"
#include "hyperlab/rng.hpp"
#include "hyperlab/tape.hpp"

namespace hyperlab {

// Training allocates and frees the same multi-megabyte activations every
// step. Keeping freed memory in the heap avoids a page-fault storm that
// otherwise costs about a quarter of the run time. No-op off glibc.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kChamferReportScale = 1e4;

inline const std::string kUncertaintyCompletion = "uncertainty.completion.log_var";
inline const std::string kUncertaintyClassification = "uncertainty.classification.log_var";

// ---------------------------------------------------------------------------
// Batching and evaluation.

inline Tensor stack_clouds(const Dataset& ds, std::span<const std::size_t> idx, bool partial) {
  const std::size_t n = partial ? ds.header.points_partial : ds.header.points_complete;
  std::vector<double> data;
  data.reserve(idx.size() * n * 3);
  for (std::size_t i : idx) {
    const Tensor& t = partial ? ds.samples[i].partial : ds.samples[i].complete;
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor({idx.size() * n, 3}, std::move(data));
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds.samples[i].class_id);
  return out;
}

struct EvalResult {
  double chamfer = kNaN;
  double accuracy = kNaN;
  Tensor pre_norm;    // [N, d] embedding before normalization (raw encoder output when off)
  Tensor embedding;   // [N, D] embedding the decoders consume
  std::vector<std::size_t> labels;
  double post_norm_max_deviation = kNaN;  // max | |row|_2 - 1 | over decoder inputs (l2 module only)
};

inline std::vector<std::size_t> eval_indices(const Dataset& ds, std::size_t max_samples) {
  const std::size_t n = max_samples == 0 ? ds.samples.size() : std::min(max_samples, ds.samples.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    data.insert(data.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return Tensor({rows, parts.front().cols()}, std::move(data));
}

// Eval-mode forward over (a prefix of) a split.
inline EvalResult evaluate(const ModelParams& params, const ArchConfig& arch, const Dataset& ds,
                           std::size_t batch_size, std::size_t max_samples = 0) {
  const auto idx = eval_indices(ds, max_samples);
  if (idx.empty()) throw DomainError("evaluation split is empty");
  ModelParams scratch = params;
  EvalResult r;
  std::vector<Tensor> pre, emb;
  double cd_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, idx.size() - start);
    std::span<const std::size_t> batch(idx.data() + start, b);
    Tape tape;
    BoundParams bp(tape, scratch, false);
    const auto out = pipeline_forward(bp, tape.constant(stack_clouds(ds, batch, true)), ds.header.points_partial, arch,
                                      Mode::Eval);
    pre.push_back(out.hyper ? out.hyper->pre_norm.value() : out.raw.value());
    emb.push_back(out.embedding.value());
    const auto labels = labels_of(ds, batch);
    r.labels.insert(r.labels.end(), labels.begin(), labels.end());
    if (out.completion) {
      const Tensor target = stack_clouds(ds, batch, false);
      cd_sum += detail::chamfer_pairs(out.completion->value(), target, b).loss * static_cast<double>(b);
    }
    if (out.logits) {
      const auto pred = argmax_rows(out.logits->value());
      for (std::size_t i = 0; i < b; ++i) correct += pred[i] == labels[i] ? 1 : 0;
    }
  }
  const double n = static_cast<double>(idx.size());
  if (arch.completion) r.chamfer = cd_sum / n;
  if (arch.classification) r.accuracy = static_cast<double>(correct) / n;
  r.pre_norm = concat_rows(pre);
  r.embedding = concat_rows(emb);
  if (arch.hyper_enabled && arch.hyper.apply_norm && arch.hyper.norm_p == 2) {
    double worst = 0.0;
    for (std::size_t i = 0; i < r.embedding.rows(); ++i) {
      worst = std::max(worst, std::abs(l2_norm(r.embedding.row(i)) - 1.0));
    }
    r.post_norm_max_deviation = worst;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training.

enum class RunStatus { Ok, Diverged };

struct TrainResult {
  RunStatus status = RunStatus::Ok;
  std::optional<std::size_t> failed_step;
  std::string error;
  ArchConfig arch;
  ModelParams params;
  ModelParams initial_params;
  std::vector<nlohmann::json> records;
  EvalResult initial_eval;
  EvalResult final_eval;
  std::vector<double> grad_cosines;  // one per multi-task step
  std::vector<double> embedding_norms;  // mean pre-norm embedding norm per eval (epoch 0..E)

  bool ok() const { return status == RunStatus::Ok; }

  double mean_grad_cosine() const {
    if (grad_cosines.empty()) return kNaN;
    double s = 0.0;
    for (double c : grad_cosines) s += c;
    return s / static_cast<double>(grad_cosines.size());
  }

  std::string metrics_jsonl() const {
    std::string out;
    for (const auto& r : records) out += r.dump() + "\n";
    return out;
  }
};

inline bool is_shared_param(const std::string& name) {
  return name.rfind(kEncoderBlock + ".", 0) == 0 || name.rfind(kHyperBlock + ".", 0) == 0;
}

inline bool is_encoder_param(const std::string& name) { return name.rfind(kEncoderBlock + ".", 0) == 0; }

inline std::vector<double> flatten_where(const NamedTensors& grads, bool (*pred)(const std::string&)) {
  std::vector<double> out;
  for (const auto& [name, t] : grads) {
    if (pred(name)) out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

namespace detail {

inline double json_real(double v) { return v; }

inline nlohmann::json nullable(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

struct EpochStats {
  double loss_completion = 0.0;
  double loss_classification = 0.0;
  std::size_t batches = 0;
  std::vector<double> cosines, mag1, mag2;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline NamedTensors add_scaled(const NamedTensors& a, double wa, const NamedTensors& b, double wb) {
  NamedTensors out;
  for (const auto& [name, ta] : a) {
    const Tensor& tb = b.at(name);
    std::vector<double> v(ta.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = wa * ta[i] + wb * tb[i];
    out.emplace(name, Tensor(ta.shape(), std::move(v)));
  }
  return out;
}

}  // namespace detail

class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, const DatasetSplits& data)
      : cfg_(cfg), data_(data), arch_(cfg.arch_for_tasks()), optimizer_(cfg.optimizer, cfg.lr) {
    cfg_.validate();
    if (data.train.samples.empty()) throw DomainError("training split is empty");
    arch_.num_classes = std::max<std::size_t>(data.train.header.classes, 1);
    if (arch_.classification) {
      for (const auto& s : data.train.samples) {
        if (s.class_id >= arch_.num_classes) throw FormatError("class id exceeds dataset class count");
      }
    }
    params_ = init_params(arch_, cfg_.seed);
    if (cfg_.multitask() && cfg_.strategy == Strategy::Uncertainty) {
      params_.tensors[kUncertaintyCompletion] = Tensor::zeros({1});
      params_.tensors[kUncertaintyClassification] = Tensor::zeros({1});
    }
    pcgrad_rng_ = keyed_rng(cfg_.seed, Stream::PcGrad);
  }

  TrainResult run() {
    TrainResult result;
    result.arch = arch_;
    result.initial_params = params_;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t step = 0;
    std::size_t epoch = 0;
    try {
      result.initial_eval = evaluate(params_, arch_, data_.test, cfg_.batch_size, cfg_.eval_max_samples);
      result.records.push_back(record(0, 0, {}, result.initial_eval, t0));
      result.embedding_norms.push_back(mean_norm(result.initial_eval));
      const std::size_t n = data_.train.samples.size();
      for (epoch = 1; epoch <= cfg_.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        auto shuffle_rng = keyed_rng(cfg_.seed, Stream::Shuffle, epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        detail::EpochStats stats;
        for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
          const std::size_t b = std::min(cfg_.batch_size, n - start);
          ++step;
          train_step(std::span<const std::size_t>(order.data() + start, b), stats);
        }
        result.grad_cosines.insert(result.grad_cosines.end(), stats.cosines.begin(), stats.cosines.end());
        result.final_eval = evaluate(params_, arch_, data_.test, cfg_.batch_size, cfg_.eval_max_samples);
        result.records.push_back(record(epoch, step, stats, result.final_eval, t0));
        result.embedding_norms.push_back(mean_norm(result.final_eval));
      }
    } catch (const NumericError& e) {
      result.status = RunStatus::Diverged;
      result.failed_step = step;
      result.error = e.what();
      nlohmann::json abort;
      abort["run_id"] = cfg_.derived_run_id();
      abort["event"] = "abort";
      abort["epoch"] = epoch;
      abort["step"] = step;
      abort["error"] = e.what();
      result.records.push_back(abort);
    }
    result.params = params_;
    return result;
  }

  const ModelParams& params() const { return params_; }
  const ArchConfig& arch() const { return arch_; }

 private:
  static double mean_norm(const EvalResult& e) {
    double s = 0.0;
    for (std::size_t i = 0; i < e.pre_norm.rows(); ++i) s += l2_norm(e.pre_norm.row(i));
    return s / static_cast<double>(e.pre_norm.rows());
  }

  void train_step(std::span<const std::size_t> batch, detail::EpochStats& stats) {
    const Dataset& ds = data_.train;
    const std::size_t b = batch.size();
    Tape tape;
    BoundParams bp(tape, params_);
    const auto out = pipeline_forward(bp, tape.constant(stack_clouds(ds, batch, true)), ds.header.points_partial, arch_,
                                      Mode::Train);
    std::vector<Var> losses;
    if (out.completion) losses.push_back(chamfer(*out.completion, tape.constant(stack_clouds(ds, batch, false)), b));
    if (out.logits) losses.push_back(softmax_cross_entropy(*out.logits, labels_of(ds, batch)));
    for (auto& l : losses) l.value().check_finite();

    std::size_t k = 0;
    if (out.completion) stats.loss_completion += losses[k++].value().item();
    if (out.logits) stats.loss_classification += losses[k++].value().item();
    ++stats.batches;

    NamedTensors grads;
    if (losses.size() == 1) {
      grads = bp.gradients(backward(tape, losses[0], false));
    } else {
      const NamedTensors g0 = bp.gradients(backward(tape, losses[0], false));
      const NamedTensors g1 = bp.gradients(backward(tape, losses[1], false));
      const auto e0 = flatten_where(g0, is_encoder_param);
      const auto e1 = flatten_where(g1, is_encoder_param);
      if (l2_norm(e0) > 0.0 && l2_norm(e1) > 0.0) {
        const auto c = gradient_conflict(e0, e1);
        stats.cosines.push_back(c.cosine);
        stats.mag1.push_back(c.mag1);
        stats.mag2.push_back(c.mag2);
      }
      switch (cfg_.strategy) {
        case Strategy::Equal: grads = detail::add_scaled(g0, 1.0, g1, 1.0); break;
        case Strategy::Fixed: grads = detail::add_scaled(g0, cfg_.weights[0], g1, cfg_.weights[1]); break;
        case Strategy::PcGrad: grads = pcgrad_combine(g0, g1); break;
        case Strategy::Uncertainty: {
          Var total = uncertainty_combine(losses, {bp(kUncertaintyCompletion), bp(kUncertaintyClassification)});
          grads = bp.gradients(backward(tape, total, false));
          break;
        }
      }
    }
    for (const auto& [name, t] : params_.tensors) {
      if (!grads.contains(name)) grads.emplace(name, Tensor::zeros(t.shape()));
    }
    optimizer_.step(params_.tensors, grads);
  }

  NamedTensors pcgrad_combine(const NamedTensors& g0, const NamedTensors& g1) {
    const TaskGradients adjusted = pcgrad({flatten_where(g0, is_shared_param), flatten_where(g1, is_shared_param)},
                                          pcgrad_rng_);
    NamedTensors out = detail::add_scaled(g0, 1.0, g1, 1.0);
    std::size_t offset = 0;
    for (auto& [name, t] : out) {
      if (!is_shared_param(name)) continue;
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = adjusted[0][offset + i] + adjusted[1][offset + i];
      offset += d.size();
    }
    return out;
  }

  nlohmann::json record(std::size_t epoch, std::size_t step, const detail::EpochStats& stats, const EvalResult& ev,
                        std::chrono::steady_clock::time_point t0) const {
    using detail::nullable;
    nlohmann::json r;
    r["run_id"] = cfg_.derived_run_id();
    r["epoch"] = epoch;
    r["step"] = step;
    const double nb = static_cast<double>(std::max<std::size_t>(stats.batches, 1));
    r["loss_completion"] = nullable(arch_.completion && stats.batches ? stats.loss_completion / nb : kNaN);
    r["loss_classification"] = nullable(arch_.classification && stats.batches ? stats.loss_classification / nb : kNaN);
    r["eval_chamfer"] = nullable(ev.chamfer);
    r["eval_chamfer_x1e4"] = nullable(ev.chamfer * kChamferReportScale);
    r["eval_accuracy"] = nullable(ev.accuracy);
    const double norm = mean_norm(ev);
    r["embedding_norm_mean"] = nullable(norm);
    r["effective_lr"] = nullable(cfg_.lr / norm);
    const auto cos = pairwise_cosine_stats(ev.embedding, nullptr, 1);
    r["cosine_mean"] = nullable(cos.overall.summary.mean);
    r["cosine_std"] = nullable(cos.overall.summary.std);
    r["grad_cosine"] = nullable(detail::mean_of(stats.cosines));
    r["grad_mag_completion"] = nullable(detail::mean_of(stats.mag1));
    r["grad_mag_classification"] = nullable(detail::mean_of(stats.mag2));
    if (cfg_.log_wall_clock) {
      r["wall_clock_ms"] =
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    }
    return r;
  }

  ExperimentConfig cfg_;
  const DatasetSplits& data_;
  ArchConfig arch_;
  ModelParams params_;
  Optimizer optimizer_;
  std::mt19937_64 pcgrad_rng_;
};

inline TrainResult train(const ExperimentConfig& cfg, const DatasetSplits& data) { return Trainer(cfg, data).run(); }

// ---------------------------------------------------------------------------
// Output helpers.

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string csv_real(double v) { return std::isfinite(v) ? format_real(v) : "nan"; }

// Writes metrics.jsonl, checkpoint.hckp and config.resolved under dir.
inline void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg, const TrainResult& r) {
  ensure_dir(dir);
  write_text(dir / "metrics.jsonl", r.metrics_jsonl());
  write_text(dir / "config.resolved", render_config(cfg));
  save_checkpoint(dir / "checkpoint.hckp", Checkpoint{r.arch, r.params});
}

// Runs fn(0..n-1) on up to `jobs` threads; results land by index.
inline void run_indexed(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(jobs, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Learning-rate sweep.

struct SweepRow {
  double lr = 0.0;
  bool hyper = false;
  bool ok = false;
  double chamfer = kNaN;
  double accuracy = kNaN;
  std::optional<std::size_t> failed_step;
  std::string error;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<double> duplicates;
};

inline std::vector<double> dedup_lrs(const std::vector<double>& lrs, std::vector<double>* dropped) {
  std::vector<double> out;
  for (double lr : lrs) {
    if (!(lr > 0.0)) throw ConfigError("sweep learning rates must be > 0");
    if (std::find(out.begin(), out.end(), lr) != out.end()) {
      if (dropped) dropped->push_back(lr);
      continue;
    }
    out.push_back(lr);
  }
  return out;
}

inline SweepRow summarize_run(double lr, bool hyper, const TrainResult& r) {
  SweepRow row;
  row.lr = lr;
  row.hyper = hyper;
  row.ok = r.ok();
  row.failed_step = r.failed_step;
  row.error = r.error;
  if (r.ok()) {
    row.chamfer = r.final_eval.chamfer;
    row.accuracy = r.final_eval.accuracy;
  }
  return row;
}

// Trains every learning rate with and without the module. Rows are ordered
// by learning rate, hyper-on first.
inline SweepResult sweep_lr(const ExperimentConfig& base, const DatasetSplits& data, const std::vector<double>& lrs,
                            const std::filesystem::path* run_dir = nullptr) {
  SweepResult out;
  const auto unique = dedup_lrs(lrs, &out.duplicates);
  for (double d : out.duplicates) std::cerr << "warning: duplicate learning rate " << d << " ignored\n";
  out.rows.resize(unique.size() * 2);
  run_indexed(out.rows.size(), base.jobs, [&](std::size_t i) {
    ExperimentConfig cfg = base;
    cfg.lr = unique[i / 2];
    cfg.arch.hyper_enabled = i % 2 == 0;
    cfg.run_id.clear();
    const TrainResult r = train(cfg, data);
    if (run_dir) write_run(*run_dir / cfg.derived_run_id(), cfg, r);
    out.rows[i] = summarize_run(cfg.lr, cfg.arch.hyper_enabled, r);
  });
  return out;
}

inline std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  os << "lr,variant,status,eval_chamfer,eval_chamfer_x1e4,eval_accuracy,failed_step\n";
  for (const auto& r : s.rows) {
    os << format_real(r.lr) << ',' << (r.hyper ? "hyper" : "plain") << ',' << (r.ok ? "ok" : "diverged") << ','
       << csv_real(r.chamfer) << ',' << csv_real(r.chamfer * kChamferReportScale) << ',' << csv_real(r.accuracy) << ','
       << (r.failed_step ? std::to_string(*r.failed_step) : "") << '\n';
  }
  return os.str();
}

// A variant is stable when every run finished with finite chamfer and the
// worst final chamfer is within `ratio` of the best.
struct StabilityVerdict {
  bool stable = false;
  double best = kNaN;
  double worst = kNaN;
  std::size_t diverged = 0;
};

inline StabilityVerdict lr_stability(const SweepResult& s, bool hyper, double ratio = 3.0) {
  StabilityVerdict v;
  double best = std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (const auto& r : s.rows) {
    if (r.hyper != hyper) continue;
    if (!r.ok || !std::isfinite(r.chamfer)) {
      ++v.diverged;
      continue;
    }
    best = std::min(best, r.chamfer);
    worst = std::max(worst, r.chamfer);
  }
  if (std::isfinite(best)) {
    v.best = best;
    v.worst = worst;
  }
  v.stable = v.diverged == 0 && std::isfinite(best) && worst <= ratio * best;
  return v;
}

// ---------------------------------------------------------------------------
// Ablation.

struct AblationVariant {
  std::string name;
  bool hyper = false;
  int mlp_layers = 0;
  bool relu_bn = false;
  int norm_p = 2;
  bool normalize = true;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {
      {"base", false, 0, false, 2, false},
      {"1-layer MLP", true, 1, false, 2, false},
      {"2-layer MLP", true, 2, false, 2, true},
      {"ReLU&BN", true, 1, true, 2, true},
      {"l1", true, 1, false, 1, true},
      {"l2", true, 1, false, 2, true},
      {"l3", true, 1, false, 3, true},
  };
}

struct AblationRow {
  AblationVariant variant;
  bool ok = false;
  double chamfer = kNaN;
  double post_norm_max_deviation = kNaN;
  std::string error;
};

inline ExperimentConfig ablation_config(const ExperimentConfig& base, const AblationVariant& v) {
  ExperimentConfig cfg = base;
  cfg.tasks = TaskSet::Completion;
  cfg.run_id.clear();
  cfg.arch.hyper_enabled = v.hyper;
  cfg.arch.hyper.mlp_layers = v.mlp_layers;
  cfg.arch.hyper.use_relu_bn = v.relu_bn;
  cfg.arch.hyper.norm_p = v.norm_p;
  cfg.arch.hyper.apply_norm = v.normalize;
  cfg.arch.hyper.input_dim = cfg.arch.embedding_dim;
  if (v.mlp_layers == 0) cfg.arch.hyper.output_dim = cfg.arch.embedding_dim;
  return cfg;
}

inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const DatasetSplits& data,
                                       const std::filesystem::path* run_dir = nullptr) {
  const auto variants = ablation_variants();
  std::vector<AblationRow> rows(variants.size());
  run_indexed(rows.size(), base.jobs, [&](std::size_t i) {
    const ExperimentConfig cfg = ablation_config(base, variants[i]);
    rows[i].variant = variants[i];
    const TrainResult r = train(cfg, data);
    if (run_dir) write_run(*run_dir / ("ablation-" + std::to_string(i)), cfg, r);
    rows[i].ok = r.ok();
    rows[i].error = r.error;
    if (r.ok()) {
      rows[i].chamfer = r.final_eval.chamfer;
      rows[i].post_norm_max_deviation = r.final_eval.post_norm_max_deviation;
    }
  });
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,hyper,mlp_layers,relu_bn,norm_p,normalized,status,eval_chamfer,eval_chamfer_x1e4,"
        "post_norm_max_deviation\n";
  for (const auto& r : rows) {
    const auto& v = r.variant;
    os << v.name << ',' << v.hyper << ',' << v.mlp_layers << ',' << v.relu_bn << ','
       << (v.hyper && v.normalize ? std::to_string(v.norm_p) : "") << ',' << (v.hyper && v.normalize) << ','
       << (r.ok ? "ok" : "failed") << ',' << csv_real(r.chamfer) << ',' << csv_real(r.chamfer * kChamferReportScale)
       << ',' << csv_real(r.post_norm_max_deviation) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Multi-task comparison.

// Positive when multi-task training improved on single-task completion.
inline double single_vs_multi(double cd_single, double cd_multi_best) {
  return 100.0 * (cd_single - cd_multi_best) / cd_single;
}

struct CompareRow {
  bool hyper = false;
  std::string setting;   // single-completion, single-classification, equal, pcgrad, uncertainty, weight-search
  bool ok = false;
  double accuracy = kNaN;
  double chamfer = kNaN;
  std::vector<double> weights;
  double s_vs_m = kNaN;
  std::string error;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  std::map<bool, SearchResult> searches;
};

inline std::vector<std::vector<double>> search_grid(const ExperimentConfig& cfg) {
  std::vector<std::vector<double>> grid;
  for (double w : cfg.search_weights) grid.push_back({1.0, w});
  return grid;
}

inline CompareResult compare_multitask(const ExperimentConfig& base, const DatasetSplits& data) {
  CompareResult out;
  for (bool hyper : {true, false}) {
    ExperimentConfig v = base;
    v.arch.hyper_enabled = hyper;
    v.run_id.clear();
    auto run_cell = [&](const std::string& setting, TaskSet tasks, Strategy strategy, std::vector<double> weights) {
      ExperimentConfig cfg = v;
      cfg.tasks = tasks;
      cfg.strategy = strategy;
      cfg.weights = weights;
      CompareRow row;
      row.hyper = hyper;
      row.setting = setting;
      row.weights = tasks == TaskSet::Both && strategy == Strategy::Fixed ? weights : std::vector<double>{};
      const TrainResult r = train(cfg, data);
      row.ok = r.ok();
      row.error = r.error;
      if (r.ok()) {
        row.accuracy = r.final_eval.accuracy;
        row.chamfer = r.final_eval.chamfer;
      }
      return row;
    };
    std::vector<CompareRow> rows(5);
    const std::vector<std::function<CompareRow()>> cells{
        [&] { return run_cell("single-completion", TaskSet::Completion, Strategy::Equal, {1, 1}); },
        [&] { return run_cell("single-classification", TaskSet::Classification, Strategy::Equal, {1, 1}); },
        [&] { return run_cell("equal", TaskSet::Both, Strategy::Equal, {1, 1}); },
        [&] { return run_cell("pcgrad", TaskSet::Both, Strategy::PcGrad, {1, 1}); },
        [&] { return run_cell("uncertainty", TaskSet::Both, Strategy::Uncertainty, {1, 1}); },
    };
    run_indexed(cells.size(), base.jobs, [&](std::size_t i) { rows[i] = cells[i](); });

    std::map<std::vector<double>, CompareRow> search_rows;
    SearchResult search;
    try {
      search = weight_search(
          search_grid(base),
          [&](const std::vector<double>& w, std::uint64_t) {
            CompareRow r = run_cell("weight-search", TaskSet::Both, Strategy::Fixed, w);
            search_rows[w] = r;
            if (!r.ok) throw NumericError(r.error);
            return EvalOutcome{r.chamfer, r.accuracy};
          },
          base.seed);
    } catch (const NumericError& e) {
      search.table.clear();
    }
    CompareRow best;
    best.hyper = hyper;
    best.setting = "weight-search";
    if (!search.best.empty()) {
      best = search_rows.at(search.best);
    } else {
      best.error = "every grid point failed";
    }
    rows.push_back(best);
    out.searches[hyper] = search;

    double multi_best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 2; i < rows.size(); ++i) {
      if (rows[i].ok && std::isfinite(rows[i].chamfer)) multi_best = std::min(multi_best, rows[i].chamfer);
    }
    const double single = rows[0].ok ? rows[0].chamfer : kNaN;
    const double svm = std::isfinite(single) && std::isfinite(multi_best) ? single_vs_multi(single, multi_best) : kNaN;
    for (auto& r : rows) r.s_vs_m = svm;
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
  }
  return out;
}

inline std::string compare_csv(const CompareResult& c) {
  std::ostringstream os;
  os << "variant,setting,status,accuracy,chamfer,chamfer_x1e4,weights,s_vs_m\n";
  for (const auto& r : c.rows) {
    os << (r.hyper ? "hyper" : "plain") << ',' << r.setting << ',' << (r.ok ? "ok" : "failed") << ','
       << csv_real(r.accuracy) << ',' << csv_real(r.chamfer) << ',' << csv_real(r.chamfer * kChamferReportScale) << ','
       << detail::join(r.weights) << ',' << csv_real(r.s_vs_m) << '\n';
  }
  return os.str();
}

inline std::string search_csv(const SearchResult& s) {
  std::ostringstream os;
  os << "w_completion,w_classification,status,accuracy,chamfer,seed\n";
  for (const auto& p : s.table) {
    os << csv_real(p.weights.at(0)) << ',' << csv_real(p.weights.at(1)) << ',' << (p.ok ? "ok" : "failed") << ','
       << csv_real(p.accuracy) << ',' << csv_real(p.chamfer) << ',' << p.seed << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Diagnostics bundle.

struct InterpolationResult {
  InterpolationMode mode = InterpolationMode::Linear;
  std::vector<Tensor> embeddings;
  std::vector<Tensor> clouds;
};

inline InterpolationMode resolve_interp_mode(const std::string& mode, const ArchConfig& arch) {
  if (mode == "linear") return InterpolationMode::Linear;
  if (mode == "spherical") return InterpolationMode::Spherical;
  const bool on_sphere = arch.hyper_enabled && arch.hyper.apply_norm && arch.hyper.norm_p == 2;
  return on_sphere ? InterpolationMode::Spherical : InterpolationMode::Linear;
}

inline InterpolationResult interpolate(const Checkpoint& ck, const EvalResult& ev, std::size_t src, std::size_t dst,
                                       std::size_t steps, InterpolationMode mode) {
  if (src >= ev.embedding.rows() || dst >= ev.embedding.rows()) {
    throw DomainError("interpolation sample index out of range");
  }
  const std::size_t d = ev.embedding.cols();
  const Tensor a({d}, std::vector<double>(ev.embedding.row(src).begin(), ev.embedding.row(src).end()));
  const Tensor b({d}, std::vector<double>(ev.embedding.row(dst).begin(), ev.embedding.row(dst).end()));
  InterpolationResult r;
  r.mode = mode;
  r.embeddings = interpolate_embeddings(a, b, steps, mode);
  for (const auto& e : r.embeddings) r.clouds.push_back(fold_decode(e, ck.params, ck.arch.grid_side));
  return r;
}

inline nlohmann::json to_json(const InterpolationResult& r, std::size_t src, std::size_t dst) {
  nlohmann::json j;
  j["mode"] = r.mode == InterpolationMode::Spherical ? "spherical" : "linear";
  j["source_index"] = src;
  j["target_index"] = dst;
  j["steps"] = r.embeddings.size();
  j["frames"] = nlohmann::json::array();
  for (std::size_t k = 0; k < r.embeddings.size(); ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(r.embeddings.size() - 1);
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < r.clouds[k].rows(); ++i) {
      pts.push_back({r.clouds[k].at(i, 0), r.clouds[k].at(i, 1), r.clouds[k].at(i, 2)});
    }
    j["frames"].push_back({{"t", t}, {"embedding_norm", l2_norm(r.embeddings[k].data())}, {"points", pts}});
  }
  return j;
}

struct DiagnosticBundle {
  Histogram norms;
  CosineStats cosine;
  SvdSpectrum svd;
  InterpolationResult interpolation;
  nlohmann::json metadata;
};

inline DiagnosticBundle diagnose(const Checkpoint& ck, const Dataset& test, const ExperimentConfig& cfg) {
  verify_checkpoint(ck);
  const EvalResult ev = evaluate(ck.params, ck.arch, test, cfg.batch_size, cfg.eval_max_samples);
  DiagnosticBundle b;
  b.norms = norm_histogram(ev.pre_norm, cfg.diag_bins);
  b.cosine = pairwise_cosine_stats(ev.embedding, &ev.labels, cfg.diag_bins);
  b.svd = weight_svd(ck.params.at(ck.arch.final_encoder_weight()));
  b.interpolation = interpolate(ck, ev, cfg.interp_src, cfg.interp_dst, cfg.interp_steps,
                                resolve_interp_mode(cfg.interp_mode, ck.arch));
  b.metadata = {{"samples", ev.embedding.rows()},
                {"hyper_enabled", ck.arch.hyper_enabled},
                {"norm_p", ck.arch.hyper_enabled && ck.arch.hyper.apply_norm ? nlohmann::json(ck.arch.hyper.norm_p)
                                                                               : nlohmann::json(nullptr)},
                {"post_norm_max_deviation", detail::nullable(ev.post_norm_max_deviation)},
                {"svd_weight", ck.arch.final_encoder_weight()},
                {"eval_chamfer", detail::nullable(ev.chamfer)},
                {"eval_accuracy", detail::nullable(ev.accuracy)}};
  return b;
}

inline void write_bundle(const std::filesystem::path& dir, const DiagnosticBundle& b, const ExperimentConfig& cfg) {
  ensure_dir(dir);
  write_json(dir / "norm_histogram.json", to_json(b.norms));
  write_json(dir / "cosine.json", to_json(b.cosine));
  write_json(dir / "svd.json", to_json(b.svd));
  write_json(dir / "interpolation.json", to_json(b.interpolation, cfg.interp_src, cfg.interp_dst));
  write_json(dir / "metadata.json", b.metadata);
}

}  // namespace hyperlab
