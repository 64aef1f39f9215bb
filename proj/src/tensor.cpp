#include "mimo/tensor.hpp"
#include "mimo/error.hpp"
#include "mimo/nn/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace mimo {

RasterTensor::RasterTensor(int channels, int height, int width, float fill)
    : channels_(channels), height_(height), width_(width) {
  if (channels < 0 || height < 0 || width < 0) throw ShapeError("negative raster dimension");
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

RasterTensor::RasterTensor(int channels, int height, int width, std::vector<float> values)
    : channels_(channels), height_(height), width_(width), data_(std::move(values)) {
  if (data_.size() != static_cast<std::size_t>(channels) * height * width)
    throw ShapeError("raster payload does not match its shape");
}

bool operator==(const RasterTensor& a, const RasterTensor& b) noexcept {
  return a.same_shape(b) &&
         std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
}

std::size_t PixelMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

}  // namespace mimo

namespace mimo::nn {

Tensor::Tensor(int n, int c, int h, int w, float fill) : n_(n), c_(c), h_(h), w_(w) {
  if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  data_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) throw ShapeError("tensor += with mismatched shapes");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor batch_of(std::span<const RasterTensor* const> images) {
  if (images.empty()) throw ShapeError("cannot batch zero images");
  const RasterTensor& first = *images.front();
  Tensor out(static_cast<int>(images.size()), first.channels(), first.height(), first.width());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i]->same_shape(first)) throw ShapeError("batched images differ in shape");
    std::copy(images[i]->values().begin(), images[i]->values().end(),
              out.image(static_cast<int>(i)).begin());
  }
  return out;
}

Tensor batch_of(const RasterTensor& image) {
  const RasterTensor* ptr = &image;
  return batch_of(std::span<const RasterTensor* const>(&ptr, 1));
}

RasterTensor image_of(const Tensor& t, int index) {
  auto src = t.image(index);
  return RasterTensor(t.c(), t.h(), t.w(), std::vector<float>(src.begin(), src.end()));
}

RasterTensor channel_of(const Tensor& t, int index, int channel) {
  auto src = t.channel(index, channel);
  return RasterTensor(1, t.h(), t.w(), std::vector<float>(src.begin(), src.end()));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: batch or spatial dimensions differ");
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    auto dst = out.image(i);
    std::copy(a.image(i).begin(), a.image(i).end(), dst.begin());
    std::copy(b.image(i).begin(), b.image(i).end(), dst.begin() + a.image(i).size());
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, int channels_a) {
  if (channels_a < 0 || channels_a > t.c()) throw ShapeError("split_channels: bad split point");
  Tensor a(t.n(), channels_a, t.h(), t.w());
  Tensor b(t.n(), t.c() - channels_a, t.h(), t.w());
  for (int i = 0; i < t.n(); ++i) {
    auto src = t.image(i);
    std::copy(src.begin(), src.begin() + a.image(i).size(), a.image(i).begin());
    std::copy(src.begin() + a.image(i).size(), src.end(), b.image(i).begin());
  }
  return {std::move(a), std::move(b)};
}

}  // namespace mimo::nn
