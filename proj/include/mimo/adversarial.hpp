#pragma once

#include "mimo/arch.hpp"
#include "mimo/tensor.hpp"

#include <span>

namespace mimo {

struct AttackConfig {
  double epsilon = 0.0;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const;  // throws ConfigError
};

// Mean per-subnetwork NLL (training term, no sync weights, no weight decay)
// with x tiled m times and y as the target of every subnetwork.
double attack_loss(const MimoModel& model, const RasterTensor& x, const RasterTensor& y);

// d attack_loss / dx, summed over the m tiled copies of x.
RasterTensor input_gradient(const MimoModel& model, const RasterTensor& x, const RasterTensor& y);

// clip(x + eps * sign(grad)), sign(0) = 0. Throws std::domain_error on a
// non-finite gradient.
RasterTensor perturb(const RasterTensor& x, const RasterTensor& grad, const AttackConfig& cfg);

RasterTensor fgsm(const MimoModel& model, const RasterTensor& x, const RasterTensor& y,
                  const AttackConfig& cfg);

// Ensemble variant: gradient of the mean member loss.
RasterTensor fgsm(std::span<const MimoModel* const> members, const RasterTensor& x,
                  const RasterTensor& y, const AttackConfig& cfg);

}  // namespace mimo
