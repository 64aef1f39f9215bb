#pragma once

#include "mimo/nn/layers.hpp"
#include "mimo/tensor.hpp"

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mimo {

using nn::Activation;

struct ArchConfig {
  int in_channels = 2;
  int base_channels = 32;
  int depth = 4;
  int num_subnetworks = 2;
  Activation activation = Activation::relu;
  double dropout = 0.0;  // spatial dropout after every conv block; 0 disables
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  int subnetwork_channels() const { return base_channels / num_subnetworks; }
  int core_input_channels() const { return num_subnetworks * subnetwork_channels(); }
  int channels_at(int level) const { return base_channels << level; }
  int spatial_multiple() const { return 1 << depth; }
};

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Raw heads of one subnetwork: f1 -> location, f2 -> log-scale.
struct SubnetworkOutput {
  RasterTensor f1;
  RasterTensor f2;
};

// Per-subnetwork encoder result. The encoder owns the full-resolution level
// only, so `skips` carries exactly one entry: the feature stack that feeds the
// matching decoder.
struct Encoding {
  RasterTensor features;
  std::vector<RasterTensor> skips;
};

namespace detail {

struct ConvBlockTape {
  nn::Tensor input;
  nn::Tensor hidden;
  nn::Tensor output;  // post-activation, pre-dropout
  std::vector<float> dropout_scale;
};

struct DownTape {
  std::vector<std::uint32_t> argmax;
  int in_h = 0, in_w = 0;
  ConvBlockTape block;
};

struct UpTape {
  nn::Tensor upsampled;
  nn::Tensor up_out;
  int up_channels = 0;
  ConvBlockTape block;
};

struct CoreTape {
  std::vector<DownTape> down;
  std::vector<UpTape> up;
};

struct DecoderTape {
  nn::Tensor input;   // concat(g, skip)
  nn::Tensor hidden;  // post-activation, pre-dropout
  nn::Tensor hidden_dropped;
  std::vector<float> dropout_scale;
};

}  // namespace detail

// Activations recorded by a forward pass for the matching backward pass.
struct ForwardTape {
  std::vector<detail::ConvBlockTape> encoders;
  std::vector<nn::Tensor> features;  // h_i
  detail::CoreTape core;
  std::vector<detail::DecoderTape> decoders;
};

// When `dropout_rng` is set and the model has dropout > 0, fresh spatial
// dropout masks are drawn (training and MC-dropout inference).
struct ForwardOptions {
  Rng* dropout_rng = nullptr;
};

class ConvBlock;  // two 3x3 convs + activation (+ dropout)

// m encoder/decoder pairs around one shared U-Net core.
class MimoModel {
 public:
  explicit MimoModel(const ArchConfig& cfg);
  MimoModel(const MimoModel& other);
  MimoModel& operator=(const MimoModel& other);
  MimoModel(MimoModel&&) noexcept;
  MimoModel& operator=(MimoModel&&) noexcept;
  ~MimoModel();

  const ArchConfig& config() const noexcept { return cfg_; }
  int num_subnetworks() const noexcept { return cfg_.num_subnetworks; }

  // Stable registration order; names are unique ("encoder.0.conv1.weight", ...).
  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  nn::Parameter* find_parameter(const std::string& name);
  std::size_t param_count() const;

  // Batched building blocks. Tapes may be null for inference.
  nn::Tensor encode(int i, const nn::Tensor& x, detail::ConvBlockTape* tape,
                    const ForwardOptions& opts = {}) const;
  nn::Tensor fuse_core(const nn::Tensor& stacked, detail::CoreTape* tape,
                       const ForwardOptions& opts = {}) const;
  nn::Tensor decode(int i, const nn::Tensor& g, const nn::Tensor& skip, detail::DecoderTape* tape,
                    const ForwardOptions& opts = {}) const;

  // inputs: m tensors (N, C_in, H, W). Returns m tensors (N, 2, H, W): channel 0
  // is f1, channel 1 is f2.
  std::vector<nn::Tensor> forward(std::span<const nn::Tensor> inputs, ForwardTape* tape = nullptr,
                                  const ForwardOptions& opts = {}) const;

  // d_outputs: m tensors (N, 2, H, W). Parameter gradients are accumulated into
  // `grads` when non-null. Returns dL/dx_i per subnetwork when `input_grad`.
  std::vector<nn::Tensor> backward(const ForwardTape& tape, std::span<const nn::Tensor> d_outputs,
                                   nn::GradientSet* grads, bool input_grad) const;

  // Number of core evaluations since construction (instrumentation).
  std::uint64_t core_evaluations() const noexcept { return core_calls_.load(); }

 private:
  void register_parameters();
  void check_input(const nn::Tensor& x) const;

  ArchConfig cfg_;
  struct Layers;
  std::unique_ptr<Layers> layers_;
  std::vector<nn::Parameter*> params_;
  mutable std::atomic<std::uint64_t> core_calls_{0};
};

MimoModel build_model(const ArchConfig& cfg);

// Single-image convenience API over the batched model.
Encoding encode(const MimoModel& model, int i, const RasterTensor& x);
RasterTensor fuse_core(const MimoModel& model, const RasterTensor& stacked);
SubnetworkOutput decode(const MimoModel& model, int i, const RasterTensor& g,
                        std::span<const RasterTensor> skips);
std::vector<SubnetworkOutput> forward(const MimoModel& model, std::span<const RasterTensor> inputs,
                                      const ForwardOptions& opts = {});
std::size_t param_count(const MimoModel& model);

// Splits a batched (N, 2, H, W) head tensor into per-image outputs.
std::vector<SubnetworkOutput> split_heads(const nn::Tensor& heads);

}  // namespace mimo
