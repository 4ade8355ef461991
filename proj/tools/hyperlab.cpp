// Command-line driver for the hyperlab experiments.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hyperlab/checkpoint.hpp"
#include "hyperlab/config.hpp"
#include "hyperlab/datasynth.hpp"
#include "hyperlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace hyperlab;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config file");
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--override", f.overrides, "key=value, repeatable")->take_all();
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  for (const auto& kv : f.overrides) apply_override(cfg, kv);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.output = f.out;
  cfg.validate();
  return cfg;
}

fs::path checkpoint_path(const CommonFlags& f, const ExperimentConfig& cfg) {
  return f.checkpoint.empty() ? fs::path(cfg.output) / "checkpoint.hckp" : fs::path(f.checkpoint);
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.output;
  write_dataset_dir(dir, generate_dataset(cfg.data, cfg.seed));
  std::cout << "wrote " << (dir / "train.hpcd").string() << " and " << (dir / "test.hpcd").string() << "\n";
  return kOk;
}

int cmd_train(const ExperimentConfig& cfg) {
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const TrainResult r = train(cfg, data);
  write_run(cfg.output, cfg, r);
  if (!r.ok()) {
    std::cerr << "run aborted at step " << *r.failed_step << ": " << r.error << "\n";
    return kNumeric;
  }
  std::cout << r.records.back().dump() << "\n";
  return kOk;
}

int cmd_eval(const ExperimentConfig& cfg, const fs::path& ckpt) {
  const Checkpoint ck = load_checkpoint(ckpt);
  verify_checkpoint(ck);
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const EvalResult ev = evaluate(ck.params, ck.arch, data.test, cfg.batch_size, cfg.eval_max_samples);
  nlohmann::json j;
  j["samples"] = ev.embedding.rows();
  j["eval_chamfer"] = detail::nullable(ev.chamfer);
  j["eval_chamfer_x1e4"] = detail::nullable(ev.chamfer * kChamferReportScale);
  j["eval_accuracy"] = detail::nullable(ev.accuracy);
  ensure_dir(cfg.output);
  write_json(fs::path(cfg.output) / "eval.json", j);
  std::cout << j.dump() << "\n";
  return kOk;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const fs::path runs = fs::path(cfg.output) / "runs";
  const SweepResult s = sweep_lr(cfg, data, cfg.sweep_lrs, &runs);
  write_text(fs::path(cfg.output) / "sweep_lr.csv", sweep_csv(s));
  std::cout << sweep_csv(s);
  return kOk;
}

int cmd_ablate(const ExperimentConfig& cfg) {
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const auto rows = ablate(cfg, data);
  ensure_dir(cfg.output);
  write_text(fs::path(cfg.output) / "ablation.csv", ablation_csv(rows));
  std::cout << ablation_csv(rows);
  return kOk;
}

int cmd_compare(const ExperimentConfig& cfg) {
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const CompareResult c = compare_multitask(cfg, data);
  ensure_dir(cfg.output);
  write_text(fs::path(cfg.output) / "multitask.csv", compare_csv(c));
  for (const auto& [hyper, search] : c.searches) {
    write_text(fs::path(cfg.output) / (hyper ? "weight_search_hyper.csv" : "weight_search_plain.csv"),
               search_csv(search));
  }
  std::cout << compare_csv(c);
  return kOk;
}

int cmd_diagnose(const ExperimentConfig& cfg, const fs::path& ckpt) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const DiagnosticBundle b = diagnose(ck, data.test, cfg);
  write_bundle(cfg.output, b, cfg);
  std::cout << b.metadata.dump() << "\n";
  return kOk;
}

int cmd_interpolate(const ExperimentConfig& cfg, const fs::path& ckpt) {
  const Checkpoint ck = load_checkpoint(ckpt);
  verify_checkpoint(ck);
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  const EvalResult ev = evaluate(ck.params, ck.arch, data.test, cfg.batch_size, cfg.eval_max_samples);
  const auto r = interpolate(ck, ev, cfg.interp_src, cfg.interp_dst, cfg.interp_steps,
                             resolve_interp_mode(cfg.interp_mode, ck.arch));
  ensure_dir(cfg.output);
  write_json(fs::path(cfg.output) / "interpolation.json", to_json(r, cfg.interp_src, cfg.interp_dst));
  std::cout << "wrote " << r.clouds.size() << " frames\n";
  return kOk;
}

int cmd_stats(const ExperimentConfig& cfg) {
  const DatasetSplits data = read_dataset_dir(cfg.dataset);
  for (const auto* ds : {&data.train, &data.test}) {
    const auto& h = ds->header;
    std::cout << (ds == &data.train ? "train" : "test") << ": version=" << h.version << " samples=" << h.count
              << " complete_points=" << h.points_complete << " partial_points=" << h.points_partial
              << " classes=" << h.classes << "\n";
    const auto counts = class_counts(*ds);
    for (std::size_t c = 0; c < counts.size(); ++c) {
      std::cout << "  class " << c << " (" << to_string(static_cast<ShapeKind>(c)) << "): " << counts[c] << "\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"hyperlab: hyperspherical embedding experiments on synthetic point clouds"};
  app.require_subcommand(1);
  CommonFlags flags;

  struct Sub {
    const char* name;
    const char* help;
    bool needs_checkpoint;
  };
  const std::vector<Sub> subs{
      {"gen-data", "generate the synthetic train/test splits", false},
      {"train", "train one model and write metrics plus checkpoint", false},
      {"eval", "evaluate a checkpoint on the test split", true},
      {"sweep-lr", "learning-rate sweep with and without the module", false},
      {"ablate", "seven-row ablation of the module", false},
      {"compare-multitask", "multi-task strategy comparison", false},
      {"diagnose", "norm, cosine, singular value and interpolation diagnostics", true},
      {"interpolate", "decode an interpolation between two test embeddings", true},
      {"dataset-stats", "print dataset header and class counts", false},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : subs) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, flags);
    if (s.needs_checkpoint) cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint file");
    cmds[s.name] = cmd;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    const ExperimentConfig cfg = resolve(flags);
    if (*cmds["gen-data"]) return cmd_gen_data(cfg);
    if (*cmds["train"]) return cmd_train(cfg);
    if (*cmds["eval"]) return cmd_eval(cfg, checkpoint_path(flags, cfg));
    if (*cmds["sweep-lr"]) return cmd_sweep(cfg);
    if (*cmds["ablate"]) return cmd_ablate(cfg);
    if (*cmds["compare-multitask"]) return cmd_compare(cfg);
    if (*cmds["diagnose"]) return cmd_diagnose(cfg, checkpoint_path(flags, cfg));
    if (*cmds["interpolate"]) return cmd_interpolate(cfg, checkpoint_path(flags, cfg));
    if (*cmds["dataset-stats"]) return cmd_stats(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
