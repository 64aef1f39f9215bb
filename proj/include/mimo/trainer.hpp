#pragma once

#include "mimo/arch.hpp"
#include "mimo/baselines.hpp"
#include "mimo/batching.hpp"
#include "mimo/metrics.hpp"
#include "mimo/sync.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mimo {

struct LrDecay {
  double gamma = 0.5;
  int step_epochs = 20;
};

struct SyncConfig {
  bool enabled = true;
  double temperature = kDefaultSyncTemperature;
  int window = kDefaultSyncWindow;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double learning_rate = 1e-4;
  LrDecay lr_decay;
  double weight_decay = 0.0;
  double rho = 0.0;
  SyncConfig sync;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  double learning_rate_at(int epoch) const;
};

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  std::vector<double> nll;      // per subnetwork, before weighting
  std::vector<double> weights;  // sync weights used for this step
  double total_loss = 0.0;      // (1/m) sum_i w_i nll_i
  double learning_rate = 0.0;
};

std::string train_log_header(int m);
std::string train_log_line(const TrainLogRow& row);

struct TrainHooks {
  // When set, a checkpoint is written to <dir>/epoch_<k> after every epoch,
  // and to <dir>/diagnostic when the loss turns non-finite.
  std::optional<std::filesystem::path> checkpoint_dir;
  ModelKind kind = ModelKind::mimo;
  std::function<void(const TrainLogRow&)> on_step;
  std::function<void(int epoch, const MimoModel&)> on_epoch;
};

// Trains `model` in place. `sync_state` may be null (an internal one is used
// when sync is enabled). Throws TrainingDiverged on a non-finite loss.
std::vector<TrainLogRow> train(MimoModel& model, std::span<const Sample> dataset,
                               const TrainConfig& cfg, SyncState* sync_state = nullptr,
                               const TrainHooks& hooks = {});

struct EvalOptions {
  std::vector<double> levels;     // empty: 0.05 .. 0.95
  std::vector<double> fractions;  // empty: 0.05 .. 1.00
  int histogram_bins = 50;
  std::optional<std::pair<double, double>> histogram_range;  // auto when unset
  int threads = 0;  // 0: MIMO_RUN_THREADS or hardware concurrency
};

struct EvalReport {
  std::size_t images = 0;
  std::size_t pixels = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double nll = 0.0;  // mixture NLL, nats per pixel
  double ece = 0.0;
  CalibrationReport calibration;
  SparsificationCurve sparsification;
  Histogram epistemic_entropy_hist;
  Histogram combined_entropy_hist;
  std::vector<double> per_submodel_nll;         // training NLL term of each member
  std::vector<double> image_epistemic_entropy;  // mean per image, dataset order
  std::vector<double> image_mae;
  double mean_aleatoric_var = 0.0;
  double mean_epistemic_var = 0.0;
  double mean_epistemic_entropy = 0.0;
  double mean_combined_entropy = 0.0;
  // Present when ground-truth noise scales are supplied.
  std::optional<double> noise_floor_mae;  // mean b*
  std::optional<double> scale_pearson;    // Pearson(mean_i b_i, b*)
};

// Results do not depend on sample order or thread count.
EvalReport evaluate(const Predictor& predictor, std::span<const Sample> samples,
                    const EvalOptions& options = {},
                    std::span<const RasterTensor> noise_scales = {});

int run_threads(int requested = 0);

}  // namespace mimo
