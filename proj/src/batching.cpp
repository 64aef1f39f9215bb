#include "mimo/batching.hpp"
#include "mimo/error.hpp"

#include <stdexcept>

namespace mimo {

void RepetitionPolicy::validate() const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("repetition probability must lie in [0, 1]");
}

MimoBatch make_train_batch(std::span<const Sample> samples, int m, const RepetitionPolicy& policy,
                           Rng& rng) {
  if (samples.empty()) throw std::invalid_argument("make_train_batch: empty batch");
  if (m < 1) throw ConfigError("make_train_batch: m must be >= 1");
  policy.validate();
  const std::size_t batch = samples.size();
  MimoBatch out;
  out.source = samples;
  out.slot.resize(m);
  out.repetition_mask.assign(batch, std::vector<bool>(m, false));
  out.slot[0] = rng.permutation(batch);
  for (int i = 1; i < m; ++i) {
    auto own = rng.permutation(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (rng.bernoulli(policy.rho)) {
        own[b] = out.slot[0][b];
        out.repetition_mask[b][i] = true;
      }
    }
    out.slot[i] = std::move(own);
  }
  return out;
}

std::vector<const RasterTensor*> make_eval_batch(const RasterTensor& x, int m) {
  if (m < 1) throw ConfigError("make_eval_batch: m must be >= 1");
  return std::vector<const RasterTensor*>(static_cast<std::size_t>(m), &x);
}

}  // namespace mimo
