// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. `acceptance 3 5` runs only criteria 3 and 5.

#include "mimo/adversarial.hpp"
#include "mimo/arch.hpp"
#include "mimo/baselines.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/cli.hpp"
#include "mimo/data_io.hpp"
#include "mimo/metrics.hpp"
#include "mimo/predictive.hpp"
#include "mimo/sync.hpp"
#include "mimo/trainer.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace mimo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Linear interpolation between order statistics.
double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// ---------------------------------------------------------------------------

Outcome parameter_parity() {
  std::vector<std::size_t> counts;
  for (int m = 1; m <= 4; ++m) {
    ArchConfig cfg;
    cfg.base_channels = 48;
    cfg.num_subnetworks = m;
    counts.push_back(build_model(cfg).param_count());
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  const double spread = static_cast<double>(*hi - *lo) / static_cast<double>(*hi);
  return {spread < 0.02, fmt::format("counts {} {} {} {}, spread {:.3f}%", counts[0], counts[1],
                                     counts[2], counts[3], 100.0 * spread)};
}

Outcome nll_gradient() {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  constexpr int kPixels = 1000;
  std::vector<double> f1(kPixels), f2(kPixels), y(kPixels);
  for (int p = 0; p < kPixels; ++p) {
    f1[p] = static_cast<float>(u(gen));
    f2[p] = static_cast<float>(2.0 * u(gen));
    do y[p] = static_cast<float>(2.0 * u(gen));
    while (std::abs(y[p] - f1[p]) <= 1e-3);
  }
  // Reference: central differences of log b + |y - mu| / b in double.
  auto term = [](double a, double s, double t) { return s + std::abs(t - a) / std::exp(s); };
  constexpr double h = 1e-6;
  // d/df2 = 1 - |y - mu| / b vanishes where |y - mu| = b, so the comparison is
  // allclose-style: |g - fd| <= rtol |fd| + atol with atol at the FD noise level.
  constexpr double rtol = 1e-4, atol = 1e-8;
  double worst = 0.0;
  auto check = [&](double g, double fd) { worst = std::max(worst, std::abs(g - fd) / (rtol * std::abs(fd) + atol)); };

  // The raster path (one subnetwork, mean over pixels) stores the kernel
  // gradient in float; it must agree with the kernel to float rounding.
  SubnetworkOutput out{RasterTensor(1, 10, 100), RasterTensor(1, 10, 100)};
  RasterTensor target(1, 10, 100);
  for (int p = 0; p < kPixels; ++p) {
    out.f1.values()[p] = static_cast<float>(f1[p]);
    out.f2.values()[p] = static_cast<float>(f2[p]);
    target.values()[p] = static_cast<float>(y[p]);
  }
  const double w[] = {1.0};
  const SubnetworkOutput outs[] = {out};
  const RasterTensor targets[] = {target};
  const auto raster = mimo_loss_gradient(outs, targets, w);
  double worst_raster = 0.0;
  for (int p = 0; p < kPixels; ++p) {
    const double d1 = (term(f1[p] + h, f2[p], y[p]) - term(f1[p] - h, f2[p], y[p])) / (2 * h);
    const double d2 = (term(f1[p], f2[p] + h, y[p]) - term(f1[p], f2[p] - h, y[p])) / (2 * h);
    const auto g = laplace::nll_gradient(f1[p], f2[p], y[p]);
    check(g.d_f1, d1);
    check(g.d_f2, d2);
    const double s = 1.0 / kPixels;
    worst_raster = std::max({worst_raster,
                             std::abs(raster[0].d_f1.values()[p] - s * g.d_f1) / (s * std::abs(g.d_f1)),
                             std::abs(raster[0].d_f2.values()[p] - s * g.d_f2) / (s * std::abs(g.d_f2) + s * 1e-7)});
  }
  return {worst <= 1.0 && worst_raster <= 1e-6,
          fmt::format("{} pixels, max |g - fd| / (1e-4 |fd| + 1e-8) = {:.2e}, raster vs kernel {:.1e}",
                      kPixels, worst, worst_raster)};
}

double mixture_variance_by_quadrature(const std::vector<double>& mu, const std::vector<double>& b) {
  using boost::math::quadrature::gauss_kronrod;
  auto density = [&](double y) {
    double p = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) p += std::exp(-std::abs(y - mu[i]) / b[i]) / (2.0 * b[i]);
    return p / static_cast<double>(mu.size());
  };
  // Split at every component location so each piece is smooth.
  std::vector<double> cuts = mu;
  std::sort(cuts.begin(), cuts.end());
  const double inf = std::numeric_limits<double>::infinity();
  auto moment = [&](int k) {
    auto f = [&](double y) { return std::pow(y, k) * density(y); };
    double s = gauss_kronrod<double, 61>::integrate(f, -inf, cuts.front(), 15, 1e-13);
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
      if (cuts[i + 1] > cuts[i]) s += gauss_kronrod<double, 61>::integrate(f, cuts[i], cuts[i + 1], 15, 1e-13);
    s += gauss_kronrod<double, 61>::integrate(f, cuts.back(), inf, 15, 1e-13);
    return s;
  };
  const double m1 = moment(1);
  return moment(2) - m1 * m1;
}

Outcome variance_decomposition() {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_total = 0.0, worst_ratio = 0.0, worst_oracle_ratio = 0.0;
  for (int c = 0; c < 100; ++c) {
    const int m = 2 + c % 4;
    std::vector<double> mu(m), b(m);
    for (int i = 0; i < m; ++i) {
      mu[i] = 2.0 * u(gen) - 1.0;
      b[i] = 0.05 + 0.95 * u(gen);
    }
    const double oracle = mixture_variance_by_quadrature(mu, b);
    double mean_aleatoric = 0.0;
    for (double s : b) mean_aleatoric += 2.0 * s * s / m;
    const auto pop = laplace::decompose(mu, b, EpistemicEstimator::population);
    const auto shipped = laplace::decompose(mu, b, EpistemicEstimator::unbiased);
    const double factor = static_cast<double>(m) / (m - 1);
    worst_total = std::max(worst_total, rel_err(pop.combined, oracle));
    worst_ratio = std::max(worst_ratio, rel_err(shipped.epistemic / pop.epistemic, factor));
    worst_oracle_ratio =
        std::max(worst_oracle_ratio, rel_err(shipped.epistemic / (oracle - mean_aleatoric), factor));
  }
  const bool ok = worst_total <= 1e-6 && worst_ratio <= 1e-12 && worst_oracle_ratio <= 1e-6;
  return {ok, fmt::format("100 configs: total rel err {:.2e}, shipped/population ratio err {:.2e}, "
                          "shipped/oracle ratio err {:.2e}",
                          worst_total, worst_ratio, worst_oracle_ratio)};
}

Outcome sync_weights_properties() {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  double worst_sum = 0.0, worst_flat = 0.0;
  long violations = 0;
  for (int k = 0; k < 10000; ++k) {
    const int m = 2 + k % 4;
    std::vector<double> l(m);
    for (double& v : l) v = u(gen);
    const auto w = sync_weights(l, 0.3);
    double s = 0.0;
    for (double v : w) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - m));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        if (l[i] > l[j] && !(w[i] > w[j])) ++violations;
    for (double v : sync_weights(l, 1e6)) worst_flat = std::max(worst_flat, std::abs(v - 1.0));
  }
  const bool ok = worst_sum <= 1e-12 && violations == 0 && worst_flat < 1e-4;
  return {ok, fmt::format("1e4 vectors: |sum - m| {:.1e}, monotonicity violations {}, "
                          "max |w - 1| at tau=1e6 {:.1e}",
                          worst_sum, violations, worst_flat)};
}

Outcome calibration_oracle() {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int n = 100000;
  std::vector<double> pit(n), pit_sharp(n);
  for (int k = 0; k < n; ++k) {
    const double mu = 2.0 * u(gen) - 1.0;
    const double b = 0.05 + 0.45 * u(gen);
    // Inverse CDF of the Laplace distribution.
    const double v = u(gen) - 0.5;
    const double y = mu - b * (v < 0 ? -1.0 : 1.0) * std::log1p(-2.0 * std::abs(v));
    pit[k] = laplace::cdf(mu, b, y);
    pit_sharp[k] = laplace::cdf(mu, 0.5 * b, y);
  }
  const double ece = calibration(pit).ece;
  const double ece_sharp = calibration(pit_sharp).ece;
  // Population value for the halved scale: P(PIT <= p) = sqrt(2p) / 2 below the
  // median, mirrored above it.
  double limit = 0.0;
  const auto levels = default_calibration_levels();
  for (double p : levels)
    limit += std::abs(p - (p < 0.5 ? 0.5 * std::sqrt(2 * p) : 1 - 0.5 * std::sqrt(2 * (1 - p))));
  limit /= static_cast<double>(levels.size());
  return {ece < 0.02 && ece_sharp > 0.10,
          fmt::format("ECE matched {:.4f} (< 0.02), halved b {:.4f} (> 0.10; population value {:.4f})",
                      ece, ece_sharp, limit)};
}

// ---------------------------------------------------------------------------
// Trained-model criteria share one m = 2 model on the 64x64 synthetic task.

struct SyntheticRun {
  SynthTaskConfig task;
  Dataset test, ood;
  std::unique_ptr<MimoModel> model;
  double train_seconds = 0.0;
};

SynthTaskConfig task_64() {
  SynthTaskConfig t;
  t.height = t.width = 64;
  return t;
}

SyntheticRun& synthetic_run() {
  static std::optional<SyntheticRun> run;
  if (run) return *run;
  run.emplace();
  run->task = task_64();
  SynthTaskConfig train_task = run->task;
  train_task.seed = 11;
  const Dataset train_set = generate_samples(train_task, 1000);
  SynthTaskConfig test_task = run->task;
  test_task.seed = 12;
  run->test = generate_samples(test_task, 200);
  test_task.ood_shift = 0.5;
  run->ood = generate_samples(test_task, 200);

  ArchConfig arch;
  arch.base_channels = 32;
  arch.depth = 1;
  arch.num_subnetworks = 2;
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.lr_decay = {0.5, 8};
  run->model = std::make_unique<MimoModel>(build_model(arch));
  const auto t0 = std::chrono::steady_clock::now();
  train(*run->model, train_set.samples, tc);
  run->train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return *run;
}

EvalReport evaluate_with(const MimoModel& model, const Dataset& data) {
  return evaluate(Predictor::mimo(model), data.samples, {}, data.noise_scales);
}

Outcome end_to_end_training() {
  SyntheticRun& run = synthetic_run();
  const EvalReport r = evaluate_with(*run.model, run.test);
  const double floor = *r.noise_floor_mae;
  const bool ok = run.train_seconds < 20 * 60 && r.mae <= 1.5 * floor && *r.scale_pearson > 0.7;
  return {ok, fmt::format("train {:.0f} s, MAE {:.4f} vs floor {:.4f} (ratio {:.3f}), "
                          "scale Pearson {:.3f}",
                          run.train_seconds, r.mae, floor, r.mae / floor, *r.scale_pearson)};
}

Outcome ood_entropy_shift() {
  SyntheticRun& run = synthetic_run();
  const EvalReport id = evaluate_with(*run.model, run.test);
  const EvalReport ood = evaluate_with(*run.model, run.ood);
  const double id_q75 = quantile(id.image_epistemic_entropy, 0.75);
  const double ood_median = quantile(ood.image_epistemic_entropy, 0.5);
  return {ood_median > id_q75,
          fmt::format("OOD median {:.3f} vs ID q75 {:.3f} (nats)", ood_median, id_q75)};
}

Outcome fgsm_trend() {
  SyntheticRun& run = synthetic_run();
  std::vector<double> mae, entropy;
  for (double eps : {0.0, 0.02, 0.04}) {
    std::vector<Sample> attacked = run.test.samples;
    for (auto& s : attacked) s.input = fgsm(*run.model, s.input, s.target, AttackConfig{eps, 0.0, 1.0});
    const EvalReport r = evaluate(Predictor::mimo(*run.model), attacked);
    mae.push_back(r.mae);
    entropy.push_back(r.mean_epistemic_entropy);
  }
  const bool ok = mae[0] <= mae[1] && mae[1] <= mae[2] && entropy[0] <= entropy[1] &&
                  entropy[1] <= entropy[2];
  return {ok, fmt::format("eps 0/0.02/0.04: MAE {:.4f} {:.4f} {:.4f}, epistemic entropy {:.3f} "
                          "{:.3f} {:.3f}",
                          mae[0], mae[1], mae[2], entropy[0], entropy[1], entropy[2])};
}

// ---------------------------------------------------------------------------
// Ablations on a smaller copy of the task (32x32, 300 training images).

struct SmallTask {
  Dataset train, test;
};

const SmallTask& small_task() {
  static std::optional<SmallTask> task;
  if (task) return *task;
  SynthTaskConfig t;
  t.height = t.width = 32;
  t.spatial_multiple = 4;
  t.seed = 21;
  task.emplace();
  task->train = generate_samples(t, 300);
  t.seed = 22;
  task->test = generate_samples(t, 100);
  return *task;
}

EvalReport train_small(std::uint64_t seed, bool sync, double rho) {
  const SmallTask& task = small_task();
  ArchConfig arch;
  arch.base_channels = 16;
  arch.depth = 2;
  arch.num_subnetworks = 2;
  arch.seed = seed;
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.lr_decay = {0.5, 4};
  tc.rho = rho;
  tc.sync.enabled = sync;
  tc.seed = seed;
  MimoModel model = build_model(arch);
  train(model, task.train.samples, tc);
  return evaluate_with(model, task.test);
}

double spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

Outcome sync_ablation() {
  bool ok = true;
  std::string detail = "spread with/without sync:";
  for (std::uint64_t seed : {1, 2, 3}) {
    const double with = spread(train_small(seed, true, 0.0).per_submodel_nll);
    const double without = spread(train_small(seed, false, 0.0).per_submodel_nll);
    ok = ok && with < without;
    detail += fmt::format(" seed {} {:.4f}/{:.4f}{}", seed, with, without, with < without ? "" : " (!)");
  }
  return {ok, detail};
}

Outcome input_repetition() {
  bool ok = true;
  std::string detail = "rho 0.9 vs 0.0:";
  for (std::uint64_t seed : {1, 2, 3}) {
    const EvalReport hi = train_small(seed, true, 0.9);
    const EvalReport lo = train_small(seed, true, 0.0);
    const bool pass = hi.mean_epistemic_var < lo.mean_epistemic_var && hi.nll <= lo.nll;
    ok = ok && pass;
    detail += fmt::format(" seed {} var {:.3e}/{:.3e} nll {:.4f}/{:.4f}{}", seed,
                          hi.mean_epistemic_var, lo.mean_epistemic_var, hi.nll, lo.nll,
                          pass ? "" : " (!)");
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

bool identical(const UncertaintyDecomposition& a, const UncertaintyDecomposition& b) {
  return a.mean == b.mean && a.aleatoric_var == b.aleatoric_var && a.epistemic_var == b.epistemic_var &&
         a.combined_var == b.combined_var;
}

Outcome aggregation_parity() {
  // p = 0 dropout passes and an ensemble of copies of one model yield the same
  // field list; the MIMO list must aggregate like a direct decomposition.
  ArchConfig single;
  single.base_channels = 8;
  single.depth = 2;
  single.num_subnetworks = 1;
  single.seed = 7;
  const MimoModel model = build_model(single);
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RasterTensor x(2, 16, 16);
  for (float& v : x.values()) v = static_cast<float>(u(gen));

  bool ok = true;
  for (int count : {1, 3, 5}) {
    Rng rng(12);
    const auto drop = dropout_predict(model, x, count, rng);
    std::vector<const MimoModel*> members(count, &model);
    const auto ens = ensemble_predict(members, x);
    bool same_lists = drop.size() == ens.size();
    for (std::size_t i = 0; same_lists && i < drop.size(); ++i)
      same_lists = drop[i].mu == ens[i].mu && drop[i].b == ens[i].b;
    ok = ok && same_lists && identical(aggregate(drop), aggregate(ens));
  }

  ArchConfig two = single;
  two.num_subnetworks = 2;
  const auto fields = mimo_predict(build_model(two), x);
  ok = ok && identical(aggregate(fields), decompose_variance(fields));
  return {ok, "dropout, ensemble and MIMO lists give bit-identical decompositions (1, 3, 5 members)"};
}

struct ScopedDir {
  fs::path path;
  explicit ScopedDir(const std::string& tag) {
    std::string templ = (fs::temp_directory_path() / ("mimo_accept_" + tag + "_XXXXXX")).string();
    path = mkdtemp(templ.data());
  }
  ~ScopedDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

Outcome reproducibility() {
  setenv("MIMO_RUN_THREADS", "1", 1);
  ScopedDir tmp("repro");
  const fs::path data = tmp.path / "data", run = tmp.path / "run", cfg = tmp.path / "cfg.json";
  std::ofstream(cfg) << R"({"arch": {"base_channels": 8, "depth": 2, "num_subnetworks": 2},
    "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.001}})";
  std::ostringstream out, err;
  auto cli = [&](std::vector<std::string> args) { return cli::run(args, out, err); };
  if (cli({"gen-data", "--out", data.string(), "--n", "24", "--size", "16", "--seed", "5"}) != 0)
    return {false, "gen-data failed: " + err.str()};

  std::vector<std::string> hashes, metrics;
  for (int k = 0; k < 2; ++k) {
    fs::remove_all(run);
    if (cli({"train", "--config", cfg.string(), "--data", data.string(), "--run", run.string(),
             "--seed", "9"}) != 0 ||
        cli({"eval", "--run", run.string(), "--data", data.string(), "--threads", "1"}) != 0)
      return {false, "train/eval failed: " + err.str()};
    hashes.push_back(checkpoint_hash(run / "checkpoints" / "final"));
    metrics.push_back(read_file(run / "reports" / "id" / "metrics.json"));
  }
  const bool ok = hashes[0] == hashes[1] && metrics[0] == metrics[1] && !metrics[0].empty();
  return {ok, fmt::format("checkpoint sha256 {} / {}, metrics.json {}", hashes[0].substr(0, 12),
                          hashes[1].substr(0, 12), metrics[0] == metrics[1] ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"parameter parity", parameter_parity},
      {"NLL gradient vs finite differences", nll_gradient},
      {"variance decomposition vs quadrature", variance_decomposition},
      {"sync weight properties", sync_weights_properties},
      {"calibration oracle", calibration_oracle},
      {"end-to-end synthetic training", end_to_end_training},
      {"sync ablation spread", sync_ablation},
      {"OOD epistemic entropy shift", ood_entropy_shift},
      {"input repetition trend", input_repetition},
      {"FGSM trend", fgsm_trend},
      {"aggregation parity", aggregation_parity},
      {"reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    fmt::print("{} {:2d} {}: {}\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first, o.detail);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
