#pragma once

#include "mimo/tensor.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace mimo::nn {

// Float storage mapped by Eigen. A fixed base alignment keeps vectorised
// reductions in the same order whatever the heap state, so results do not
// depend on what else the process allocated.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

// NCHW batch tensor used inside the network.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f);

  int n() const noexcept { return n_; }
  int c() const noexcept { return c_; }
  int h() const noexcept { return h_; }
  int w() const noexcept { return w_; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  std::span<float> image(int i) noexcept {
    return values().subspan(static_cast<std::size_t>(i) * c_ * plane(), c_ * plane());
  }
  std::span<const float> image(int i) const noexcept {
    return values().subspan(static_cast<std::size_t>(i) * c_ * plane(), c_ * plane());
  }
  std::span<float> channel(int i, int ch) noexcept {
    return values().subspan((static_cast<std::size_t>(i) * c_ + ch) * plane(), plane());
  }
  std::span<const float> channel(int i, int ch) const noexcept {
    return values().subspan((static_cast<std::size_t>(i) * c_ + ch) * plane(), plane());
  }

  bool same_shape(const Tensor& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  Tensor& operator+=(const Tensor& other);

 private:
  int n_ = 0;
  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  FloatBuffer data_;
};

// Stacks equally shaped rasters into an (N, C, H, W) batch.
Tensor batch_of(std::span<const RasterTensor* const> images);
Tensor batch_of(const RasterTensor& image);
RasterTensor image_of(const Tensor& t, int index);
RasterTensor channel_of(const Tensor& t, int index, int channel);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Inverse of concat_channels for gradients: first `channels_a` go to the first result.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, int channels_a);

}  // namespace mimo::nn
