#include "mimo/nn/layers.hpp"
#include "mimo/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace mimo::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapRM = Eigen::Map<const MatRM>;
using Strided = Eigen::OuterStride<>;
using StridedMap = Eigen::Map<MatRM, 0, Strided>;
using ConstStridedMap = Eigen::Map<const MatRM, 0, Strided>;

// Patch matrices are built for a band of output rows of one image at a time
// so the (C*9) x cols block stays cache resident.
constexpr std::size_t kPatchBudget = 96 * 1024;  // floats

int band_rows(std::size_t k_rows, int width, int height) {
  const std::size_t per_row = k_rows * static_cast<std::size_t>(width);
  const int rows = static_cast<int>(std::max<std::size_t>(1, kPatchBudget / std::max<std::size_t>(1, per_row)));
  return std::min(rows, height);
}

// (C*9) x ((y1-y0)*W) patches of image n for a 3x3 kernel with zero padding 1.
void im2col3_rows(const Tensor& x, int n, int y0, int y1, MatRM& col) {
  const int C = x.c(), H = x.h(), W = x.w();
  const std::size_t cols = static_cast<std::size_t>(y1 - y0) * W;
  col.resize(static_cast<Eigen::Index>(C) * 9, static_cast<Eigen::Index>(cols));
  float* base = col.data();
  for (int c = 0; c < C; ++c) {
    const float* src = x.channel(n, c).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = base + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * cols;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = y0; y < y1; ++y) {
          float* d = row + static_cast<std::size_t>(y - y0) * W;
          const int sy = y + dy;
          if (sy < 0 || sy >= H) {
            std::fill(d, d + W, 0.0f);
            continue;
          }
          const float* s = src + static_cast<std::size_t>(sy) * W;
          if (dx == 0) {
            std::copy(s, s + W, d);
          } else if (dx < 0) {
            d[0] = 0.0f;
            std::copy(s, s + W - 1, d + 1);
          } else {
            std::copy(s + 1, s + W, d);
            d[W - 1] = 0.0f;
          }
        }
      }
    }
  }
}

// Rows [y0, y1) of every channel of image n, viewed as a channels x cols matrix.
ConstStridedMap band(const Tensor& t, int n, int y0, int y1) {
  return ConstStridedMap(t.channel(n, 0).data() + static_cast<std::size_t>(y0) * t.w(), t.c(),
                         static_cast<Eigen::Index>(y1 - y0) * t.w(),
                         Strided(static_cast<Eigen::Index>(t.plane())));
}

StridedMap band(Tensor& t, int n, int y0, int y1) {
  return StridedMap(t.channel(n, 0).data() + static_cast<std::size_t>(y0) * t.w(), t.c(),
                    static_cast<Eigen::Index>(y1 - y0) * t.w(),
                    Strided(static_cast<Eigen::Index>(t.plane())));
}

// Images [n0, n1) gathered into a channels x ((n1-n0)*H*W) matrix, and back.
void gather_images(const Tensor& t, int n0, int n1, MatRM& out) {
  const std::size_t hw = t.plane();
  out.resize(t.c(), static_cast<Eigen::Index>((n1 - n0) * hw));
  for (int n = n0; n < n1; ++n)
    for (int c = 0; c < t.c(); ++c) {
      auto src = t.channel(n, c);
      std::copy(src.begin(), src.end(), out.data() + c * out.cols() + (n - n0) * hw);
    }
}

void scatter_images(const MatRM& m, int n0, int n1, Tensor& t) {
  const std::size_t hw = t.plane();
  for (int n = n0; n < n1; ++n)
    for (int c = 0; c < t.c(); ++c) {
      const float* src = m.data() + c * m.cols() + (n - n0) * hw;
      std::copy(src, src + hw, t.channel(n, c).begin());
    }
}

// Patches of whole images [n0, n1): (C*9) x ((n1-n0)*H*W).
void im2col3_images(const Tensor& x, int n0, int n1, MatRM& col) {
  const std::size_t hw = x.plane();
  const Eigen::Index K = static_cast<Eigen::Index>(x.c()) * 9;
  col.resize(K, static_cast<Eigen::Index>((n1 - n0) * hw));
  thread_local MatRM one;
  for (int n = n0; n < n1; ++n) {
    im2col3_rows(x, n, 0, x.h(), one);
    col.middleCols(static_cast<Eigen::Index>((n - n0) * hw), static_cast<Eigen::Index>(hw)) = one;
  }
}

void add_bias(Tensor& out, const FloatBuffer& bias) {
  for (int n = 0; n < out.n(); ++n)
    for (int co = 0; co < out.c(); ++co) {
      const float b = bias[co];
      if (b == 0.0f) continue;
      for (float& v : out.channel(n, co)) v += b;
    }
}

// Small planes: how many whole images share one patch matrix (1 = banded path).
int image_group(std::size_t k_rows, const Tensor& t) {
  const std::size_t per_image = k_rows * t.plane();
  if (per_image * 4 > kPatchBudget) return 1;
  return static_cast<int>(std::max<std::size_t>(1, kPatchBudget / per_image));
}

}  // namespace

GradientSet::GradientSet(std::span<const Parameter* const> params) {
  grads_.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->ordinal != static_cast<int>(i))
      throw ConfigError("parameter ordinals must match registration order");
    grads_[i].assign(params[i]->size(), 0.0f);
  }
}

void GradientSet::zero() {
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0f);
}

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel)
    : in_(in_channels), out_(out_channels), k_(kernel) {
  if (kernel != 1 && kernel != 3) throw ConfigError("Conv2d supports kernel 1 or 3");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("Conv2d needs >=1 channel");
  weight.name = name + ".weight";
  weight.shape = {out_channels, in_channels, kernel, kernel};
  weight.value.assign(static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel, 0.0f);
  bias.name = name + ".bias";
  bias.shape = {out_channels};
  bias.value.assign(out_channels, 0.0f);
}

void Conv2d::init(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  const double bound = gain * std::sqrt(3.0 / fan_in);
  for (float& w : weight.value) w = static_cast<float>(rng.uniform(-bound, bound));
  std::fill(bias.value.begin(), bias.value.end(), 0.0f);
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.c() != in_) throw ShapeError("Conv2d(" + weight.name + "): input channel mismatch");
  const Eigen::Index K = static_cast<Eigen::Index>(in_) * k_ * k_;
  ConstMapRM wm(weight.value.data(), out_, K);
  Tensor out(x.n(), out_, x.h(), x.w());
  thread_local MatRM col;
  thread_local MatRM res;
  if (const int g = image_group(K, x); g > 1) {
    for (int n0 = 0; n0 < x.n(); n0 += g) {
      const int n1 = std::min(x.n(), n0 + g);
      if (k_ == 3) {
        im2col3_images(x, n0, n1, col);
      } else {
        gather_images(x, n0, n1, col);
      }
      res.noalias() = wm * col;
      scatter_images(res, n0, n1, out);
    }
    add_bias(out, bias.value);
    return out;
  }
  const int rows = k_ == 3 ? band_rows(K, x.w(), x.h()) : x.h();
  for (int n = 0; n < x.n(); ++n)
    for (int y0 = 0; y0 < x.h(); y0 += rows) {
      const int y1 = std::min(x.h(), y0 + rows);
      auto om = band(out, n, y0, y1);
      if (k_ == 3) {
        im2col3_rows(x, n, y0, y1, col);
        om.noalias() = wm * col;
      } else {
        om.noalias() = wm * band(x, n, y0, y1);
      }
    }
  add_bias(out, bias.value);
  return out;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, GradientSet* grads,
                        bool input_grad) const {
  if (dy.c() != out_ || dy.n() != x.n() || dy.h() != x.h() || dy.w() != x.w())
    throw ShapeError("Conv2d(" + weight.name + "): gradient shape mismatch");
  const Eigen::Index K = static_cast<Eigen::Index>(in_) * k_ * k_;
  thread_local MatRM col;

  if (grads != nullptr) {
    auto gw = grads->of(weight);
    Eigen::Map<MatRM> gwm(gw.data(), out_, K);
    auto gb = grads->of(bias);
    Eigen::Map<Eigen::VectorXf> gbv(gb.data(), out_);
    const int rows = k_ == 3 ? band_rows(K, x.w(), x.h()) : x.h();
    if (const int g = image_group(K, x); g > 1) {
      thread_local MatRM dyg;
      for (int n0 = 0; n0 < x.n(); n0 += g) {
        const int n1 = std::min(x.n(), n0 + g);
        if (k_ == 3) {
          im2col3_images(x, n0, n1, col);
        } else {
          gather_images(x, n0, n1, col);
        }
        gather_images(dy, n0, n1, dyg);
        gwm.noalias() += dyg * col.transpose();
        gbv += dyg.rowwise().sum();
      }
    } else {
      for (int n = 0; n < x.n(); ++n)
        for (int y0 = 0; y0 < x.h(); y0 += rows) {
          const int y1 = std::min(x.h(), y0 + rows);
          const auto dyb = band(dy, n, y0, y1);
          if (k_ == 3) {
            im2col3_rows(x, n, y0, y1, col);
            gwm.noalias() += dyb * col.transpose();
          } else {
            gwm.noalias() += dyb * band(x, n, y0, y1).transpose();
          }
          gbv += dyb.rowwise().sum();
        }
    }
  }

  if (!input_grad) return {};

  Tensor dx(x.n(), in_, x.h(), x.w());
  ConstMapRM wm(weight.value.data(), out_, K);
  if (k_ == 3) {
    // dx = conv(dy, w') with w'[ci][co][ky][kx] = w[co][ci][2-ky][2-kx]
    MatRM flipped(in_, static_cast<Eigen::Index>(out_) * 9);
    for (int co = 0; co < out_; ++co)
      for (int ci = 0; ci < in_; ++ci)
        for (int t = 0; t < 9; ++t) flipped(ci, co * 9 + t) = wm(co, ci * 9 + (8 - t));
    if (const int g = image_group(static_cast<std::size_t>(out_) * 9, dy); g > 1) {
      thread_local MatRM res;
      for (int n0 = 0; n0 < x.n(); n0 += g) {
        const int n1 = std::min(x.n(), n0 + g);
        im2col3_images(dy, n0, n1, col);
        res.noalias() = flipped * col;
        scatter_images(res, n0, n1, dx);
      }
      return dx;
    }
    const int rows = band_rows(static_cast<std::size_t>(out_) * 9, x.w(), x.h());
    for (int n = 0; n < x.n(); ++n)
      for (int y0 = 0; y0 < x.h(); y0 += rows) {
        const int y1 = std::min(x.h(), y0 + rows);
        im2col3_rows(dy, n, y0, y1, col);
        band(dx, n, y0, y1).noalias() = flipped * col;
      }
  } else {
    for (int n = 0; n < x.n(); ++n) band(dx, n, 0, x.h()).noalias() = wm.transpose() * band(dy, n, 0, x.h());
  }
  return dx;
}

void activate(Tensor& x, Activation act) {
  if (act == Activation::relu) {
    for (float& v : x.values()) v = v > 0.0f ? v : 0.0f;
  } else {
    for (float& v : x.values()) v = v > 0.0f ? v : kLeakySlope * v;
  }
}

void activate_backward(const Tensor& activated, Tensor& dy, Activation act) {
  if (!activated.same_shape(dy)) throw ShapeError("activation gradient shape mismatch");
  const float neg = act == Activation::relu ? 0.0f : kLeakySlope;
  const float* a = activated.data();
  float* d = dy.data();
  for (std::size_t i = 0; i < dy.size(); ++i) d[i] *= a[i] > 0.0f ? 1.0f : neg;
}

Tensor maxpool2(const Tensor& x, std::vector<std::uint32_t>* argmax) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) throw ShapeError("maxpool2 needs even spatial dims");
  const int oh = x.h() / 2, ow = x.w() / 2, W = x.w();
  Tensor out(x.n(), x.c(), oh, ow);
  if (argmax) argmax->resize(out.size());
  std::size_t k = 0;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c).data();
      float* dst = out.channel(n, c).data();
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++k) {
          std::uint32_t best = static_cast<std::uint32_t>(2 * y * W + 2 * xx);
          const std::uint32_t cand[3] = {best + 1, best + static_cast<std::uint32_t>(W),
                                         best + static_cast<std::uint32_t>(W) + 1};
          for (std::uint32_t idx : cand)
            if (src[idx] > src[best]) best = idx;
          dst[y * ow + xx] = src[best];
          if (argmax) (*argmax)[k] = best;
        }
    }
  return out;
}

Tensor maxpool2_backward(const Tensor& dy, const std::vector<std::uint32_t>& argmax, int in_h,
                         int in_w) {
  if (argmax.size() != dy.size()) throw ShapeError("maxpool2_backward: argmax size mismatch");
  Tensor dx(dy.n(), dy.c(), in_h, in_w);
  std::size_t k = 0;
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c) {
      float* dst = dx.channel(n, c).data();
      for (float g : dy.channel(n, c)) dst[argmax[k++]] += g;
    }
  return dx;
}

namespace {

struct Tap {
  int i0, i1;
  float w0, w1;
};

std::vector<Tap> upsample_taps(int in) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * 2);
  for (int o = 0; o < 2 * in; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const int i0 = static_cast<int>(src);
    const int i1 = std::min(i0 + 1, in - 1);
    const float l1 = static_cast<float>(src - i0);
    taps[o] = {i0, i1, 1.0f - l1, l1};
  }
  return taps;
}

}  // namespace

Tensor upsample2(const Tensor& x) {
  const int H = x.h(), W = x.w(), OH = 2 * H, OW = 2 * W;
  const auto ty = upsample_taps(H), tx = upsample_taps(W);
  Tensor out(x.n(), x.c(), OH, OW);
  std::vector<float> rows(static_cast<std::size_t>(H) * OW);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c).data();
      for (int y = 0; y < H; ++y)
        for (int o = 0; o < OW; ++o) {
          const Tap& t = tx[o];
          rows[y * OW + o] = t.w0 * src[y * W + t.i0] + t.w1 * src[y * W + t.i1];
        }
      float* dst = out.channel(n, c).data();
      for (int o = 0; o < OH; ++o) {
        const Tap& t = ty[o];
        const float* r0 = rows.data() + t.i0 * OW;
        const float* r1 = rows.data() + t.i1 * OW;
        for (int xx = 0; xx < OW; ++xx) dst[o * OW + xx] = t.w0 * r0[xx] + t.w1 * r1[xx];
      }
    }
  return out;
}

Tensor upsample2_backward(const Tensor& dy) {
  if (dy.h() % 2 != 0 || dy.w() % 2 != 0) throw ShapeError("upsample2_backward: odd dims");
  const int H = dy.h() / 2, W = dy.w() / 2, OH = dy.h(), OW = dy.w();
  const auto ty = upsample_taps(H), tx = upsample_taps(W);
  Tensor dx(dy.n(), dy.c(), H, W);
  std::vector<float> rows(static_cast<std::size_t>(H) * OW);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c) {
      std::fill(rows.begin(), rows.end(), 0.0f);
      const float* g = dy.channel(n, c).data();
      for (int o = 0; o < OH; ++o) {
        const Tap& t = ty[o];
        float* r0 = rows.data() + t.i0 * OW;
        float* r1 = rows.data() + t.i1 * OW;
        for (int xx = 0; xx < OW; ++xx) {
          r0[xx] += t.w0 * g[o * OW + xx];
          r1[xx] += t.w1 * g[o * OW + xx];
        }
      }
      float* dst = dx.channel(n, c).data();
      for (int y = 0; y < H; ++y)
        for (int o = 0; o < OW; ++o) {
          const Tap& t = tx[o];
          const float v = rows[y * OW + o];
          dst[y * W + t.i0] += t.w0 * v;
          dst[y * W + t.i1] += t.w1 * v;
        }
    }
  return dx;
}

std::vector<float> spatial_dropout(Tensor& x, double p, Rng& rng) {
  std::vector<float> scale(static_cast<std::size_t>(x.n()) * x.c(), 1.0f);
  if (p <= 0.0) return scale;
  const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
  for (float& s : scale) s = rng.bernoulli(p) ? 0.0f : keep_scale;
  apply_channel_scale(x, scale);
  return scale;
}

void apply_channel_scale(Tensor& x, std::span<const float> scale) {
  if (scale.size() != static_cast<std::size_t>(x.n()) * x.c())
    throw ShapeError("channel scale size mismatch");
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const float s = scale[static_cast<std::size_t>(n) * x.c() + c];
      if (s == 1.0f) continue;
      for (float& v : x.channel(n, c)) v *= s;
    }
}

}  // namespace mimo::nn
