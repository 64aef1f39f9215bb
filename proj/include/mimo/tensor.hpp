#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mimo {

// Dense (channels, height, width) float raster, C row-major.
class RasterTensor {
 public:
  RasterTensor() = default;
  RasterTensor(int channels, int height, int width, float fill = 0.0f);
  RasterTensor(int channels, int height, int width, std::vector<float> values);

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t pixels() const noexcept {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& at(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  float at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::span<float> channel(int c) noexcept { return values().subspan(c * pixels(), pixels()); }
  std::span<const float> channel(int c) const noexcept {
    return values().subspan(c * pixels(), pixels());
  }

  bool same_shape(const RasterTensor& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  // Bitwise comparison of shape and payload.
  friend bool operator==(const RasterTensor& a, const RasterTensor& b) noexcept;

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

// Boolean per-pixel mask (true = pixel participates in losses/metrics).
struct PixelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> keep;

  std::size_t count() const noexcept;
};

}  // namespace mimo
