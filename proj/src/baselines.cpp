#include "mimo/baselines.hpp"
#include "mimo/batching.hpp"
#include "mimo/error.hpp"

#include <algorithm>
#include <set>

namespace mimo {

void DropoutConfig::validate() const {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout p must lie in [0, 1)");
  if (samples < 1) throw ConfigError("dropout samples must be >= 1");
}

void EnsembleConfig::validate() const {
  if (size < 1) throw ConfigError("ensemble size must be >= 1");
  if (seeds.size() != static_cast<std::size_t>(size))
    throw ConfigError("ensemble needs one seed per member");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("ensemble seeds must be pairwise distinct");
}

EnsembleConfig EnsembleConfig::with_consecutive_seeds(int size, std::uint64_t base) {
  EnsembleConfig cfg;
  cfg.size = size;
  for (int k = 0; k < size; ++k) cfg.seeds.push_back(base + static_cast<std::uint64_t>(k));
  return cfg;
}

namespace {

LaplaceField field_of(const nn::Tensor& heads, int image) {
  return to_laplace(SubnetworkOutput{nn::channel_of(heads, image, 0), nn::channel_of(heads, image, 1)});
}

bool same_arch_except_seed(ArchConfig a, ArchConfig b) {
  a.seed = b.seed = 0;
  return a.in_channels == b.in_channels && a.base_channels == b.base_channels &&
         a.depth == b.depth && a.num_subnetworks == b.num_subnetworks &&
         a.activation == b.activation && a.dropout == b.dropout;
}

}  // namespace

std::vector<LaplaceField> dropout_predict(const MimoModel& model, const RasterTensor& x, int samples,
                                          Rng& rng) {
  if (samples < 1) throw ConfigError("dropout_predict: samples must be >= 1");
  if (model.num_subnetworks() != 1)
    throw ConfigError("dropout_predict: expects a single-subnetwork model");
  // One pass per sample rather than one batch of T copies: GEMM blocking
  // depends on the batch width, and batching would let identical masks give
  // slightly different fields.
  const nn::Tensor batch = nn::batch_of(x);
  ForwardOptions opts;
  opts.dropout_rng = &rng;
  std::vector<LaplaceField> fields;
  fields.reserve(samples);
  for (int t = 0; t < samples; ++t) {
    const auto heads = model.forward(std::span<const nn::Tensor>(&batch, 1), nullptr, opts);
    fields.push_back(field_of(heads.front(), 0));
  }
  return fields;
}

std::vector<LaplaceField> ensemble_predict(std::span<const MimoModel* const> members,
                                           const RasterTensor& x) {
  if (members.empty()) throw ConfigError("ensemble_predict: no members");
  for (const MimoModel* m : members) {
    if (m->num_subnetworks() != 1)
      throw ConfigError("ensemble_predict: members must have a single subnetwork");
    if (!same_arch_except_seed(m->config(), members.front()->config()))
      throw ConfigError("ensemble_predict: members use different architectures");
  }
  const nn::Tensor batch = nn::batch_of(x);
  std::vector<LaplaceField> fields;
  fields.reserve(members.size());
  for (const MimoModel* m : members) {
    const auto heads = m->forward(std::span<const nn::Tensor>(&batch, 1));
    fields.push_back(field_of(heads.front(), 0));
  }
  return fields;
}

std::vector<LaplaceField> mimo_predict(const MimoModel& model, const RasterTensor& x) {
  std::vector<nn::Tensor> tiled;
  for (const RasterTensor* xi : make_eval_batch(x, model.num_subnetworks()))
    tiled.push_back(nn::batch_of(*xi));
  const auto heads = model.forward(tiled);
  std::vector<LaplaceField> fields;
  fields.reserve(heads.size());
  for (const auto& h : heads) fields.push_back(field_of(h, 0));
  return fields;
}

UncertaintyDecomposition aggregate(std::span<const LaplaceField> fields) {
  return decompose_variance(fields, fields.size() < 2 ? EpistemicEstimator::population
                                                      : EpistemicEstimator::unbiased);
}

Predictor Predictor::from_checkpoint(Checkpoint ck, int dropout_samples, std::uint64_t dropout_seed) {
  Predictor p;
  p.kind_ = ck.info.kind;
  p.models_ = std::move(ck.models);
  p.dropout_samples_ = dropout_samples;
  p.dropout_seed_ = dropout_seed;
  if (p.models_.empty()) throw ConfigError("checkpoint holds no model");
  if (p.kind_ == ModelKind::dropout) {
    if (dropout_samples < 1) throw ConfigError("dropout samples must be >= 1");
    if (p.models_.front().num_subnetworks() != 1)
      throw ConfigError("dropout checkpoint must hold a single-subnetwork model");
  }
  if (p.kind_ == ModelKind::ensemble) {
    for (const auto& m : p.models_)
      if (m.num_subnetworks() != 1 || !same_arch_except_seed(m.config(), p.models_.front().config()))
        throw ConfigError("ensemble members must share one single-subnetwork architecture");
  }
  return p;
}

Predictor Predictor::mimo(MimoModel model) {
  Predictor p;
  p.models_.push_back(std::move(model));
  return p;
}

int Predictor::members() const noexcept {
  switch (kind_) {
    case ModelKind::mimo: return models_.front().num_subnetworks();
    case ModelKind::dropout: return dropout_samples_;
    case ModelKind::ensemble: return static_cast<int>(models_.size());
  }
  return 1;
}

std::size_t Predictor::param_count() const {
  std::size_t n = 0;
  for (const auto& m : models_) n += m.param_count();
  return n;
}

std::vector<LaplaceField> Predictor::predict(const RasterTensor& x, std::size_t index) const {
  switch (kind_) {
    case ModelKind::mimo: return mimo_predict(models_.front(), x);
    case ModelKind::dropout: {
      Rng rng(Rng::derive_seed(dropout_seed_, index));
      return dropout_predict(models_.front(), x, dropout_samples_, rng);
    }
    case ModelKind::ensemble: {
      std::vector<const MimoModel*> ptrs;
      for (const auto& m : models_) ptrs.push_back(&m);
      return ensemble_predict(ptrs, x);
    }
  }
  return {};
}

}  // namespace mimo
