#pragma once

#include "mimo/nn/layers.hpp"

#include <vector>

namespace mimo::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled, multiplied by the learning rate
};

// Adam with decoupled weight decay (AdamW).
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamConfig cfg);

  void step(const GradientSet& grads, double learning_rate);
  long steps() const noexcept { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<FloatBuffer> m_;
  std::vector<FloatBuffer> v_;
  long t_ = 0;
};

}  // namespace mimo::nn
