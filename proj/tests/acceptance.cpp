// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "hyperlab/experiment.hpp"
#include "support.hpp"

using namespace hyperlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s [%d] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

ExperimentConfig shipped(const char* name) {
  return load_config(fs::path(HYPERLAB_SOURCE_DIR) / "configs" / name);
}

// Random (f, g) pairs shared by the gradient checks.
struct GradPair {
  Tensor f;         // [1, d]
  Tensor g;         // [1, d]
};

std::vector<GradPair> gradient_pairs() {
  std::mt19937_64 rng(20240101);
  std::uniform_real_distribution<double> log_norm(std::log(0.1), std::log(100.0));
  const std::size_t dims[] = {2, 8, 128};
  std::vector<GradPair> out;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = dims[i % 3];
    Tensor f = testsupport::random_tensor(rng, {1, d});
    const double target = std::exp(log_norm(rng));
    const double scale = target / l2_norm(f.data());
    for (auto& x : f.mutable_data()) x *= scale;
    out.push_back({f, testsupport::random_tensor(rng, {1, d})});
  }
  return out;
}

// Smooth downstream loss on the normalized vector: <g, u> + sum sin(u).
double downstream(const std::vector<double>& f, const Tensor& g) {
  double n = 0.0;
  for (double x : f) n += x * x;
  n = std::sqrt(n);
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += g[i] * (f[i] / n) + std::sin(f[i] / n);
  return s;
}

Tensor downstream_upstream(const Tensor& f, const Tensor& g) {
  const double n = l2_norm(f.data());
  std::vector<double> up(f.size());
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = g[i] + std::cos(f[i] / n);
  return Tensor(f.shape(), std::move(up));
}

Outcome criterion_gradient() {
  double worst = 0.0;
  for (const auto& [f, g] : gradient_pairs()) {
    const Tensor analytic = normalize_backward_l2(f, downstream_upstream(f, g));
    const double h = 1e-5 * l2_norm(f.data());
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      std::vector<double> plus(f.values()), minus(f.values());
      plus[i] += h;
      minus[i] -= h;
      const double fd = (downstream(plus, g) - downstream(minus, g)) / (2.0 * h);
      err = std::max(err, std::abs(fd - analytic[i]));
      scale = std::max(scale, std::abs(analytic[i]));
    }
    worst = std::max(worst, err / scale);
  }
  return {worst < 1e-6, "max relative error " + fmt(worst) + " over 100 pairs"};
}

Outcome criterion_orthogonality() {
  double worst = 0.0;
  for (const auto& [f, g] : gradient_pairs()) {
    worst = std::max(worst, orthogonality_residual(f.data(), normalize_backward_l2(f, g).data()));
    worst = std::max(worst, orthogonality_residual(f.data(), normalize_backward_l2(f, downstream_upstream(f, g)).data()));
  }
  return {worst < 1e-10, "max residual " + fmt(worst)};
}

// Toy model: a free pre-norm embedding f followed by the l2 module. Each step
// draws one of four target directions, the way mini-batches from different
// classes pull on a shared embedding, and takes the loss |f_hat - t|^2.
struct ToyEmbedding {
  Tensor f0;
  std::vector<Tensor> targets;
  std::mt19937_64 rng;

  explicit ToyEmbedding(std::uint64_t seed) : rng(seed) {
    f0 = testsupport::random_tensor(rng, {1, 16});
    for (int k = 0; k < 4; ++k) targets.push_back(normalize(testsupport::random_tensor(rng, {1, 16}), 2));
  }

  Tensor upstream(const Tensor& f) {
    const Tensor& t = targets[std::uniform_int_distribution<std::size_t>(0, targets.size() - 1)(rng)];
    const Tensor u = normalize(f, 2);
    std::vector<double> up(f.size());
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = 2.0 * (u[i] - t[i]);
    return Tensor(f.shape(), std::move(up));
  }
};

Outcome criterion_norm_growth() {
  double worst_drop = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ToyEmbedding toy(seed);
    const auto trace = sgd_norm_trace(toy.f0, [&](const Tensor& f, std::size_t) { return toy.upstream(f); }, 0.1, 200);
    for (std::size_t t = 1; t < trace.size(); ++t) worst_drop = std::max(worst_drop, trace[t - 1] - trace[t]);
  }
  bool ok = worst_drop <= 1e-12;
  std::string detail = "sgd max per-step drop " + fmt(worst_drop);
  for (auto kind : {OptimizerKind::Adam, OptimizerKind::RmsProp}) {
    int grew = 0;
    double min_ratio = std::numeric_limits<double>::infinity();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ToyEmbedding toy(seed);
      NamedTensors params{{"f", toy.f0}};
      const double initial = l2_norm(toy.f0.data());
      Optimizer opt(kind, 1e-2);
      for (int step = 0; step < 200; ++step) {
        const Tensor& f = params.at("f");
        const NamedTensors grads{{"f", normalize_backward_l2(f, toy.upstream(f))}};
        opt.step(params, grads);
      }
      const double ratio = l2_norm(params.at("f").data()) / initial;
      min_ratio = std::min(min_ratio, ratio);
      grew += ratio > 1.0;
    }
    ok = ok && grew == 5;
    detail += std::string("; ") + to_string(kind) + " grew " + std::to_string(grew) + "/5 (min final/initial " +
              fmt(min_ratio) + ")";
  }
  return {ok, detail};
}

Outcome criterion_inverse_scaling() {
  double worst = 0.0;
  for (const auto& [f, g] : gradient_pairs()) {
    const Tensor base = normalize_backward_l2(f, g);
    for (double c : {0.5, 2.0, 10.0}) {
      std::vector<double> scaled(f.values());
      for (auto& x : scaled) x *= c;
      const Tensor at_scaled = normalize_backward_l2(Tensor(f.shape(), scaled), g);
      double err = 0.0;
      for (std::size_t i = 0; i < base.size(); ++i) err = std::max(err, std::abs(at_scaled[i] - base[i] / c));
      worst = std::max(worst, err / (l2_norm(base.data()) / c));
    }
  }
  return {worst < 1e-10, "max relative deviation " + fmt(worst)};
}

Outcome criterion_chamfer() {
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<std::size_t> size(1, 64);
  double worst = 0.0;
  bool exact = true;
  for (int i = 0; i < 200; ++i) {
    const Tensor a = testsupport::random_tensor(rng, {size(rng), 3});
    const Tensor b = testsupport::random_tensor(rng, {size(rng), 3});
    worst = std::max(worst, std::abs(chamfer(a, b) - testsupport::brute_chamfer(a, b)));
    exact = exact && chamfer(a, b) == chamfer(b, a) && chamfer(a, a) == 0.0;
  }
  return {worst <= 1e-12 && exact, "max deviation " + fmt(worst) + (exact ? ", symmetric, CD(A,A)=0" : ", exactness violated")};
}

Outcome criterion_pcgrad() {
  std::mt19937_64 rng(66);
  std::normal_distribution<double> gauss;
  double worst = 0.0;
  bool identity = true;
  for (int i = 0; i < 1000; ++i) {
    TaskGradients g(2, std::vector<double>(12));
    for (auto& v : g)
      for (auto& x : v) x = gauss(rng);
    const auto adj = pcgrad(g, rng);
    worst = std::min({worst, dot(adj[0], g[1]), dot(adj[1], g[0])});
    if (dot(g[0], g[1]) >= 0.0) identity = identity && adj == g;
  }
  return {worst >= -1e-9 && identity,
          "min adjusted inner product " + fmt(worst) + (identity ? ", identity without conflict" : ", identity violated")};
}

Outcome criterion_svd() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> rows(1, 64), cols(1, 128);
  double worst = 0.0;
  bool ordered = true;
  for (int i = 0; i < 100; ++i) {
    const Tensor w = testsupport::random_tensor(rng, {rows(rng), cols(rng)});
    const SvdResult r = svd(w);
    worst = std::max(worst, reconstruction_residual(w, r));
    for (std::size_t k = 0; k < r.singular.size(); ++k) {
      ordered = ordered && r.singular[k] >= 0.0 && (k == 0 || r.singular[k] <= r.singular[k - 1]);
    }
  }
  return {worst < 1e-8 && ordered, "max relative residual " + fmt(worst) + (ordered ? ", sorted and non-negative" : ", ordering violated")};
}

std::string sweep_summary(const SweepResult& s, bool hyper) {
  std::string out;
  for (const auto& r : s.rows) {
    if (r.hyper != hyper) continue;
    out += (out.empty() ? "" : " ") + fmt(r.lr) + ":" + (r.ok ? fmt(r.chamfer) : std::string("diverged"));
  }
  return out;
}

Outcome criterion_lr_stability() {
  const ExperimentConfig cfg = shipped("sweep.cfg");
  const DatasetSplits data = generate_dataset(cfg.data, 1);
  const SweepResult s = sweep_lr(cfg, data, cfg.sweep_lrs);
  const auto on = lr_stability(s, true);
  const auto off = lr_stability(s, false);
  const bool pass = on.stable && on.diverged == 0 && !off.stable;
  return {pass, "hyper-on worst/best " + fmt(on.worst / on.best) + " [" + sweep_summary(s, true) +
                    "]; hyper-off " + (off.stable ? "stable" : "unstable") + " [" + sweep_summary(s, false) + "]"};
}

struct ToyRuns {
  DatasetSplits data;
  std::map<std::pair<std::uint64_t, bool>, TrainResult> single;
  std::map<std::pair<std::uint64_t, bool>, TrainResult> joint;
};

ToyRuns& toy() {
  static ToyRuns runs = [] {
    ToyRuns r;
    r.data = generate_dataset(shipped("toy.cfg").data, 7);
    return r;
  }();
  return runs;
}

ExperimentConfig toy_config(std::uint64_t seed, bool hyper, bool joint) {
  ExperimentConfig cfg = shipped("toy.cfg");
  cfg.seed = seed;
  cfg.arch.hyper_enabled = hyper;
  if (joint) {
    cfg.tasks = TaskSet::Both;
    cfg.strategy = Strategy::Equal;
  }
  return cfg;
}

const TrainResult& toy_run(std::uint64_t seed, bool hyper, bool joint) {
  auto& cache = joint ? toy().joint : toy().single;
  auto it = cache.find({seed, hyper});
  if (it == cache.end()) {
    TrainResult r = train(toy_config(seed, hyper, joint), toy().data);
    if (!r.ok()) throw NumericError("toy run diverged: " + r.error);
    it = cache.emplace(std::make_pair(seed, hyper), std::move(r)).first;
  }
  return it->second;
}

Outcome criterion_cosine_spread() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto spread = [&](bool hyper) {
      return pairwise_cosine_stats(toy_run(seed, hyper, false).final_eval.embedding, nullptr, 1).overall.summary.std;
    };
    const double on = spread(true), off = spread(false);
    wins += on < off;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " " + fmt(on) + " vs " + fmt(off);
  }
  return {wins == 3, "cosine std on vs off: " + detail};
}

Outcome criterion_conditioning() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto spectrum = [&](bool hyper) {
      const TrainResult& r = toy_run(seed, hyper, false);
      return weight_svd(r.params.at(r.arch.final_encoder_weight()));
    };
    const SvdSpectrum on = spectrum(true), off = spectrum(false);
    const double mean_gap = std::abs(on.mean_sv - off.mean_sv) / std::min(on.mean_sv, off.mean_sv);
    wins += on.condition_number > off.condition_number && mean_gap < 0.5;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " cond " +
              fmt(on.condition_number) + " vs " + fmt(off.condition_number) + ", mean sv " + fmt(on.mean_sv) +
              " vs " + fmt(off.mean_sv);
  }
  return {wins == 3, detail};
}

Outcome criterion_gradient_conflict() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double on = toy_run(seed, true, true).mean_grad_cosine();
    const double off = toy_run(seed, false, true).mean_grad_cosine();
    wins += on > off;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " " + fmt(on) + " vs " + fmt(off);
  }
  return {wins == 3, "mean encoder gradient cosine on vs off: " + detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome criterion_determinism() {
  const ExperimentConfig cfg = toy_config(1, true, false);
  const fs::path root = fs::temp_directory_path() / "hyperlab_acceptance_determinism";
  fs::remove_all(root);
  write_run(root / "a", cfg, toy_run(1, true, false));
  write_run(root / "b", cfg, train(cfg, toy().data));
  const std::string a = slurp(root / "a" / "metrics.jsonl");
  const std::string b = slurp(root / "b" / "metrics.jsonl");
  fs::remove_all(root);
  return {!a.empty() && a == b, std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different")};
}

}  // namespace

int main() {
  configure_allocator();
  report(1, "normalization gradient matches finite differences", criterion_gradient);
  report(2, "embedding gradient is orthogonal to the embedding", criterion_orthogonality);
  report(3, "pre-norm embedding norm grows under SGD, Adam and RMSprop", criterion_norm_growth);
  report(4, "gradient scales inversely with the embedding norm", criterion_inverse_scaling);
  report(5, "chamfer distance matches a brute-force oracle", criterion_chamfer);
  report(6, "gradient surgery removes conflicts", criterion_pcgrad);
  report(7, "Jacobi SVD reconstructs random matrices", criterion_svd);
  report(8, "learning-rate stability with and without the module", criterion_lr_stability);
  report(9, "hyperspherical embeddings have a tighter cosine distribution", criterion_cosine_spread);
  report(10, "module raises the condition number at a similar mean singular value", criterion_conditioning);
  report(11, "module reduces gradient conflict between tasks", criterion_gradient_conflict);
  report(12, "training twice gives byte-identical metrics", criterion_determinism);
  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
