#include "helpers.hpp"
#include "mimo/nn/adam.hpp"
#include "mimo/nn/layers.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>

using namespace mimo;
using namespace mimo::nn;

namespace {

// Central-difference derivative of a scalar function of one float slot.
double central_diff(float& slot, const std::function<double()>& f, float eps) {
  const float saved = slot;
  slot = saved + eps;
  const double up = f();
  slot = saved - eps;
  const double down = f();
  slot = saved;
  return (up - down) / (2.0 * static_cast<double>(eps));
}

void check_close(double analytic, double numeric, double tol) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  CHECK(std::abs(analytic - numeric) <= tol * scale);
}

}  // namespace

TEST_CASE("conv2d 3x3 forward matches a direct loop") {
  Rng rng(3);
  Conv2d conv("c", 3, 4, 3);
  conv.init(rng, 1.0);
  for (float& b : conv.bias.value) b = static_cast<float>(rng.uniform(-1, 1));
  const Tensor x = testing::random_tensor(2, 3, 5, 6, rng);
  const Tensor y = conv.forward(x);
  REQUIRE(y.n() == 2);
  REQUIRE(y.c() == 4);
  for (int n = 0; n < 2; ++n)
    for (int co = 0; co < 4; ++co)
      for (int yy = 0; yy < 5; ++yy)
        for (int xx = 0; xx < 6; ++xx) {
          double acc = conv.bias.value[co];
          for (int ci = 0; ci < 3; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sy = yy + ky - 1, sx = xx + kx - 1;
                if (sy < 0 || sy >= 5 || sx < 0 || sx >= 6) continue;
                acc += conv.weight.value[((co * 3 + ci) * 3 + ky) * 3 + kx] *
                       x.channel(n, ci)[sy * 6 + sx];
              }
          CHECK(y.channel(n, co)[yy * 6 + xx] == doctest::Approx(acc).epsilon(1e-5));
        }
}

TEST_CASE("conv2d banded and grouped paths agree on large and small planes") {
  Rng rng(5);
  Conv2d conv("c", 40, 8, 3);
  conv.init(rng, 1.0);
  // 40*9*64*64 floats exceeds the patch budget, so rows are banded.
  const Tensor big = testing::random_tensor(2, 40, 64, 64, rng);
  const Tensor y = conv.forward(big);
  for (int n = 0; n < 2; ++n) {
    Tensor one(1, 40, 64, 64);
    std::copy(big.image(n).begin(), big.image(n).end(), one.image(0).begin());
    const Tensor y1 = conv.forward(one);
    for (std::size_t k = 0; k < y1.size(); ++k)
      CHECK(y1.data()[k] == doctest::Approx(y.image(n)[k]).epsilon(1e-5));
  }
}

TEST_CASE("conv2d gradients match central differences") {
  for (int kernel : {1, 3}) {
    for (int size : {4, 8}) {
      CAPTURE(kernel);
      CAPTURE(size);
      Rng rng(11 + kernel + size);
      Conv2d conv("c", 3, 2, kernel);
      conv.init(rng, 1.0);
      for (float& b : conv.bias.value) b = static_cast<float>(rng.uniform(-1, 1));
      conv.weight.ordinal = 0;
      conv.bias.ordinal = 1;
      const Parameter* params[] = {&conv.weight, &conv.bias};
      GradientSet grads(params);
      Tensor x = testing::random_tensor(3, 3, size, size, rng);
      const Tensor r = testing::random_tensor(3, 2, size, size, rng);
      auto loss = [&] { return testing::dot(conv.forward(x), r); };
      const Tensor dx = conv.backward(x, r, &grads, true);
      for (int k = 0; k < 12; ++k) {
        const std::size_t wi = rng.below(conv.weight.size());
        check_close(grads.of(conv.weight)[wi], central_diff(conv.weight.value[wi], loss, 1e-2f), 2e-3);
        const std::size_t xi = rng.below(x.size());
        check_close(dx.data()[xi], central_diff(x.data()[xi], loss, 1e-2f), 2e-3);
      }
      for (std::size_t bi = 0; bi < conv.bias.size(); ++bi)
        check_close(grads.of(conv.bias)[bi], central_diff(conv.bias.value[bi], loss, 1e-2f), 2e-3);
    }
  }
}

TEST_CASE("maxpool2 and upsample2 gradients match central differences") {
  Rng rng(21);
  Tensor x = testing::random_tensor(2, 3, 6, 8, rng);
  {
    const Tensor r = testing::random_tensor(2, 3, 3, 4, rng);
    std::vector<std::uint32_t> argmax;
    maxpool2(x, &argmax);
    const Tensor dx = maxpool2_backward(r, argmax, 6, 8);
    auto loss = [&] { return testing::dot(maxpool2(x, nullptr), r); };
    for (std::size_t i = 0; i < x.size(); ++i) check_close(dx.data()[i], central_diff(x.data()[i], loss, 1e-4f), 1e-2);
  }
  {
    const Tensor r = testing::random_tensor(2, 3, 12, 16, rng);
    const Tensor dx = upsample2_backward(r);
    auto loss = [&] { return testing::dot(upsample2(x), r); };
    for (std::size_t i = 0; i < x.size(); ++i) check_close(dx.data()[i], central_diff(x.data()[i], loss, 1e-2f), 1e-3);
  }
}

TEST_CASE("upsample2 is bilinear with half-pixel centres") {
  Tensor x(1, 1, 1, 2);
  x.data()[0] = 0.0f;
  x.data()[1] = 4.0f;
  const Tensor y = upsample2(x);
  // Output centres map to source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
  CHECK(y.data()[0] == doctest::Approx(0.0));
  CHECK(y.data()[1] == doctest::Approx(1.0));
  CHECK(y.data()[2] == doctest::Approx(3.0));
  CHECK(y.data()[3] == doctest::Approx(4.0));
  // Constant fields stay constant.
  Tensor c(1, 2, 3, 3, 2.5f);
  const Tensor up = upsample2(c);
  for (float v : up.values()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("activations and their backward use the output sign") {
  Tensor x(1, 1, 1, 4);
  const float in[] = {-2.0f, -0.5f, 0.5f, 3.0f};
  std::copy(in, in + 4, x.data());
  Tensor leaky = x;
  activate(leaky, Activation::leaky_relu);
  CHECK(leaky.data()[0] == doctest::Approx(-0.02));
  CHECK(leaky.data()[3] == doctest::Approx(3.0));
  Tensor relu = x;
  activate(relu, Activation::relu);
  CHECK(relu.data()[1] == 0.0f);
  Tensor d(1, 1, 1, 4, 1.0f);
  activate_backward(leaky, d, Activation::leaky_relu);
  CHECK(d.data()[0] == doctest::Approx(0.01));
  CHECK(d.data()[2] == doctest::Approx(1.0));
}

TEST_CASE("spatial dropout drops whole channels and rescales the rest") {
  Rng rng(4);
  Tensor x(4, 16, 3, 3, 1.0f);
  const auto scale = spatial_dropout(x, 0.5, rng);
  REQUIRE(scale.size() == 64u);
  int dropped = 0;
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 16; ++c) {
      const float s = scale[n * 16 + c];
      CHECK((s == 0.0f || s == 2.0f));
      dropped += s == 0.0f;
      for (float v : x.channel(n, c)) CHECK(v == s);
    }
  CHECK(dropped > 10);
  CHECK(dropped < 54);

  Rng a(9), b(9);
  Tensor y(1, 3, 2, 2, 1.0f);
  const auto ones = spatial_dropout(y, 0.0, a);
  for (float s : ones) CHECK(s == 1.0f);
  CHECK(a.next_u64() == b.next_u64());  // p = 0 consumes no randomness
}

TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
  Parameter p{"w", {3}, {1.0f, -1.0f, 0.5f}, 0};
  const Parameter* cp[] = {&p};
  GradientSet g(cp);
  g.of(p)[0] = 2.0f;
  g.of(p)[1] = -0.1f;
  g.of(p)[2] = 0.0f;
  AdamW opt({&p}, AdamConfig{});
  opt.step(g, 0.01);
  // Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g).
  CHECK(p.value[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(-0.99).epsilon(1e-6));
  CHECK(p.value[2] == 0.5f);
}

TEST_CASE("AdamW weight decay is decoupled and scaled by the learning rate") {
  Parameter p{"w", {1}, {2.0f}, 0};
  const Parameter* cp[] = {&p};
  GradientSet g(cp);
  AdamW opt({&p}, AdamConfig{.weight_decay = 0.1});
  opt.step(g, 0.0);
  CHECK(p.value[0] == 2.0f);
  opt.step(g, 0.5);
  CHECK(p.value[0] == doctest::Approx(2.0 * (1.0 - 0.5 * 0.1)).epsilon(1e-6));
}
