#pragma once

#include "mimo/nn/tensor.hpp"
#include "mimo/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mimo::nn {

enum class Activation { relu, leaky_relu };

inline constexpr float kLeakySlope = 0.01f;

struct Parameter {
  std::string name;
  std::vector<int> shape;
  FloatBuffer value;
  int ordinal = -1;  // index into a GradientSet; assigned by the owning model

  std::size_t size() const noexcept { return value.size(); }
};

// Gradient storage kept outside the parameters, so forward/backward passes
// over a model stay const and can run concurrently.
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(std::span<const Parameter* const> params);

  std::span<float> of(const Parameter& p) { return grads_.at(p.ordinal); }
  std::span<const float> of(const Parameter& p) const { return grads_.at(p.ordinal); }
  void zero();
  std::size_t tensors() const noexcept { return grads_.size(); }

 private:
  std::vector<FloatBuffer> grads_;
};

// 2-D convolution, stride 1, "same" zero padding, odd square kernel (1 or 3).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel);

  // Fan-in scaled uniform init: U(-gain*sqrt(3/fan_in), +gain*sqrt(3/fan_in)), zero bias.
  void init(Rng& rng, double gain);

  Tensor forward(const Tensor& x) const;
  // Accumulates parameter gradients into `grads` when non-null; returns dL/dx
  // when `input_grad` is set (otherwise an empty tensor).
  Tensor backward(const Tensor& x, const Tensor& dy, GradientSet* grads, bool input_grad) const;

  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  int kernel() const noexcept { return k_; }

  Parameter weight;  // (out, in, k, k)
  Parameter bias;    // (out)

 private:
  int in_ = 0;
  int out_ = 0;
  int k_ = 0;
};

void activate(Tensor& x, Activation act);
// dy *= act'(.), using the activation output (sign is preserved by both activations).
void activate_backward(const Tensor& activated, Tensor& dy, Activation act);

Tensor maxpool2(const Tensor& x, std::vector<std::uint32_t>* argmax);
Tensor maxpool2_backward(const Tensor& dy, const std::vector<std::uint32_t>& argmax, int in_h,
                         int in_w);

// Bilinear 2x upsampling with half-pixel centres (align_corners = false).
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& dy);

// Channel-wise ("spatial") dropout: one keep/drop decision per (image, channel),
// kept channels scaled by 1/(1-p). Returns the per-(n,c) multipliers.
std::vector<float> spatial_dropout(Tensor& x, double p, Rng& rng);
void apply_channel_scale(Tensor& x, std::span<const float> scale);

}  // namespace mimo::nn
