#include "mimo/trainer.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/error.hpp"
#include "mimo/nn/adam.hpp"
#include "mimo/predictive.hpp"

#include <fmt/format.h>

#include <cmath>

namespace mimo {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be a finite value >= 0");
  if (!(lr_decay.gamma > 0.0 && lr_decay.gamma <= 1.0)) throw ConfigError("lr gamma must lie in (0, 1]");
  if (lr_decay.step_epochs < 1) throw ConfigError("lr step_epochs must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  RepetitionPolicy{rho}.validate();
  if (!(sync.temperature > 0.0)) throw ConfigError("sync temperature must be > 0");
  if (sync.window < 1) throw ConfigError("sync window must be >= 1");
}

double TrainConfig::learning_rate_at(int epoch) const {
  return learning_rate * std::pow(lr_decay.gamma, epoch / lr_decay.step_epochs);
}

std::string train_log_header(int m) {
  std::string h = "step,epoch";
  for (int i = 0; i < m; ++i) h += fmt::format(",nll_{}", i);
  for (int i = 0; i < m; ++i) h += fmt::format(",weight_{}", i);
  return h + ",total_loss,learning_rate";
}

std::string train_log_line(const TrainLogRow& row) {
  std::string s = fmt::format("{},{}", row.step, row.epoch);
  for (double v : row.nll) s += fmt::format(",{:.17g}", v);
  for (double v : row.weights) s += fmt::format(",{:.17g}", v);
  return s + fmt::format(",{:.17g},{:.17g}", row.total_loss, row.learning_rate);
}

namespace {

void check_dataset(const MimoModel& model, std::span<const Sample> data) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  const auto& cfg = model.config();
  for (const auto& s : data) {
    if (s.input.channels() != cfg.in_channels)
      throw ShapeError(fmt::format("train: sample has {} input channels, model expects {}",
                                   s.input.channels(), cfg.in_channels));
    if (s.target.channels() != 1 || s.target.height() != s.input.height() ||
        s.target.width() != s.input.width())
      throw ShapeError("train: target must be (1, H, W) matching the input");
    if (s.input.height() != data.front().input.height() || s.input.width() != data.front().input.width())
      throw ShapeError("train: samples differ in size");
  }
}

}  // namespace

std::vector<TrainLogRow> train(MimoModel& model, std::span<const Sample> dataset,
                               const TrainConfig& cfg, SyncState* sync_state,
                               const TrainHooks& hooks) {
  cfg.validate();
  check_dataset(model, dataset);
  const int m = model.num_subnetworks();
  std::optional<SyncState> own_sync;
  if (cfg.sync.enabled && sync_state == nullptr) {
    own_sync.emplace(m, cfg.sync.window, cfg.sync.temperature);
    sync_state = &*own_sync;
  }
  if (sync_state && sync_state->num_submodels() != m)
    throw ConfigError("sync state tracks a different number of submodels");

  Rng data_rng(Rng::derive_seed(cfg.seed, 0));
  Rng dropout_rng(Rng::derive_seed(cfg.seed, 1));
  ForwardOptions fwd;
  if (model.config().dropout > 0.0) fwd.dropout_rng = &dropout_rng;

  const auto params = model.parameters();
  nn::GradientSet grads(std::vector<const nn::Parameter*>(params.begin(), params.end()));
  nn::AdamW optimizer(params, nn::AdamConfig{.weight_decay = cfg.weight_decay});
  const RepetitionPolicy policy{cfg.rho};

  std::vector<TrainLogRow> log;
  std::vector<Sample> chunk;
  long step = 0;
  const std::size_t n = dataset.size();
  const std::size_t bsz = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    const auto order = data_rng.permutation(n);
    for (std::size_t start = 0; start < n; start += bsz) {
      const std::size_t count = std::min(bsz, n - start);
      chunk.clear();
      for (std::size_t k = 0; k < count; ++k) chunk.push_back(dataset[order[start + k]]);
      const MimoBatch batch = make_train_batch(chunk, m, policy, data_rng);

      std::vector<nn::Tensor> inputs;
      for (int i = 0; i < m; ++i) {
        std::vector<const RasterTensor*> xs;
        for (std::size_t b = 0; b < count; ++b) xs.push_back(&batch.input(i, b));
        inputs.push_back(nn::batch_of(xs));
      }
      ForwardTape tape;
      const auto heads = model.forward(inputs, &tape, fwd);

      auto keep_of = [&](int i, std::size_t b) -> std::span<const std::uint8_t> {
        const auto& mask = batch.sample(i, b).mask;
        return mask ? std::span<const std::uint8_t>(mask->keep) : std::span<const std::uint8_t>{};
      };

      TrainLogRow row;
      row.step = step;
      row.epoch = epoch;
      row.learning_rate = lr;
      std::vector<std::size_t> pixels(m, 0);
      bool finite = true;
      for (int i = 0; i < m; ++i) {
        double sum = 0.0;
        for (std::size_t b = 0; b < count; ++b) {
          const int bi = static_cast<int>(b);
          const auto l = accumulate_head_loss(heads[i].channel(bi, 0), heads[i].channel(bi, 1),
                                              batch.target(i, b).values(), keep_of(i, b), 0.0, {}, {});
          sum += l.nll_sum;
          pixels[i] += l.pixels;
        }
        if (pixels[i] == 0) throw std::invalid_argument("train: a batch has no unmasked pixels");
        row.nll.push_back(sum / static_cast<double>(pixels[i]));
        finite = finite && std::isfinite(row.nll.back());
      }
      if (!finite) {
        if (hooks.checkpoint_dir)
          save_checkpoint(*hooks.checkpoint_dir / "diagnostic",
                          CheckpointInfo{hooks.kind, epoch, step, true}, model);
        throw TrainingDiverged(step, fmt::format("non-finite training loss at step {} (epoch {})",
                                                 step, epoch));
      }
      row.weights = cfg.sync.enabled ? sync_state->push_and_weight(row.nll)
                                     : std::vector<double>(static_cast<std::size_t>(m), 1.0);
      row.total_loss = apply_weights(row.nll, row.weights);

      std::vector<nn::Tensor> d_heads;
      for (int i = 0; i < m; ++i) {
        nn::Tensor d(heads[i].n(), heads[i].c(), heads[i].h(), heads[i].w());
        const double scale = row.weights[i] / (static_cast<double>(m) * static_cast<double>(pixels[i]));
        for (std::size_t b = 0; b < count; ++b) {
          const int bi = static_cast<int>(b);
          accumulate_head_loss(heads[i].channel(bi, 0), heads[i].channel(bi, 1),
                               batch.target(i, b).values(), keep_of(i, b), scale, d.channel(bi, 0),
                               d.channel(bi, 1));
        }
        d_heads.push_back(std::move(d));
      }
      grads.zero();
      model.backward(tape, d_heads, &grads, false);
      optimizer.step(grads, lr);

      if (hooks.on_step) hooks.on_step(row);
      log.push_back(std::move(row));
      ++step;
    }
    if (hooks.checkpoint_dir)
      save_checkpoint(*hooks.checkpoint_dir / fmt::format("epoch_{:03d}", epoch + 1),
                      CheckpointInfo{hooks.kind, epoch + 1, step, false}, model);
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, model);
  }
  return log;
}

}  // namespace mimo
