#pragma once

#include "mimo/arch.hpp"
#include "mimo/checkpoint.hpp"
#include "mimo/predictive.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mimo {

struct DropoutConfig {
  double p = 0.1;
  int samples = 8;  // T stochastic passes at inference

  void validate() const;  // throws ConfigError
};

struct EnsembleConfig {
  int size = 5;
  std::vector<std::uint64_t> seeds;  // one per member, pairwise distinct

  void validate() const;  // throws ConfigError
  // Seeds base, base+1, ... when none are given.
  static EnsembleConfig with_consecutive_seeds(int size, std::uint64_t base);
};

// T forward passes of a single-subnetwork model with independent spatial
// dropout masks, drawn from `rng`. With p = 0 all T fields are identical.
std::vector<LaplaceField> dropout_predict(const MimoModel& model, const RasterTensor& x, int samples,
                                          Rng& rng);

// One forward pass per member. Members must share one architecture with m = 1
// (seeds may differ).
std::vector<LaplaceField> ensemble_predict(std::span<const MimoModel* const> members,
                                           const RasterTensor& x);

// m fields from one MIMO forward pass on the input tiled m times.
std::vector<LaplaceField> mimo_predict(const MimoModel& model, const RasterTensor& x);

// The aggregation used by every method. One field (m = 1, T = 1, M = 1) has no
// disagreement term, so it takes the aleatoric-only path (epistemic = 0).
UncertaintyDecomposition aggregate(std::span<const LaplaceField> fields);

// Uniform access to a trained method for evaluation and attacks.
class Predictor {
 public:
  // MIMO: one model. Dropout: one model with dropout > 0 and `dropout_samples`
  // passes; per-image masks come from derive_seed(dropout_seed, image index).
  // Ensemble: the members.
  static Predictor from_checkpoint(Checkpoint ck, int dropout_samples = 8,
                                   std::uint64_t dropout_seed = 0);
  static Predictor mimo(MimoModel model);

  ModelKind kind() const noexcept { return kind_; }
  const std::vector<MimoModel>& models() const noexcept { return models_; }
  int members() const noexcept;  // m, T or M
  std::size_t param_count() const;

  // `index` identifies the image so stochastic methods are order independent.
  std::vector<LaplaceField> predict(const RasterTensor& x, std::size_t index) const;

 private:
  ModelKind kind_ = ModelKind::mimo;
  std::vector<MimoModel> models_;
  int dropout_samples_ = 8;
  std::uint64_t dropout_seed_ = 0;
};

}  // namespace mimo
