#include "mimo/adversarial.hpp"
#include "mimo/batching.hpp"
#include "mimo/error.hpp"
#include "mimo/predictive.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mimo {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be >= 0");
  if (!(clip_lo < clip_hi)) throw ConfigError("clip range needs lo < hi");
}

namespace {

std::vector<nn::Tensor> tiled(const MimoModel& model, const RasterTensor& x) {
  std::vector<nn::Tensor> out;
  for (const RasterTensor* xi : make_eval_batch(x, model.num_subnetworks()))
    out.push_back(nn::batch_of(*xi));
  return out;
}

void check_target(const RasterTensor& x, const RasterTensor& y) {
  if (y.channels() != 1 || y.height() != x.height() || y.width() != x.width())
    throw ShapeError("attack target must be (1, H, W) matching the input");
}

}  // namespace

double attack_loss(const MimoModel& model, const RasterTensor& x, const RasterTensor& y) {
  check_target(x, y);
  const auto heads = model.forward(tiled(model, x));
  double total = 0.0;
  for (const auto& h : heads) {
    const auto loss = accumulate_head_loss(h.channel(0, 0), h.channel(0, 1), y.values(), {}, 0.0, {}, {});
    total += loss.nll_sum / static_cast<double>(loss.pixels);
  }
  return total / static_cast<double>(heads.size());
}

RasterTensor input_gradient(const MimoModel& model, const RasterTensor& x, const RasterTensor& y) {
  check_target(x, y);
  const auto inputs = tiled(model, x);
  ForwardTape tape;
  const auto heads = model.forward(inputs, &tape);
  const double m = static_cast<double>(heads.size());
  const double scale = 1.0 / (m * static_cast<double>(y.pixels()));
  std::vector<nn::Tensor> d_heads;
  for (const auto& h : heads) {
    nn::Tensor d(h.n(), h.c(), h.h(), h.w());
    accumulate_head_loss(h.channel(0, 0), h.channel(0, 1), y.values(), {}, scale, d.channel(0, 0),
                         d.channel(0, 1));
    d_heads.push_back(std::move(d));
  }
  const auto dx = model.backward(tape, d_heads, nullptr, true);
  RasterTensor grad(x.channels(), x.height(), x.width());
  for (const auto& d : dx) {
    const auto src = d.image(0);
    auto dst = grad.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
  return grad;
}

RasterTensor perturb(const RasterTensor& x, const RasterTensor& grad, const AttackConfig& cfg) {
  cfg.validate();
  if (!x.same_shape(grad)) throw ShapeError("gradient shape does not match input");
  const float lo = static_cast<float>(cfg.clip_lo), hi = static_cast<float>(cfg.clip_hi);
  for (float v : x.values())
    if (!(v >= lo && v <= hi)) throw std::invalid_argument("FGSM: input outside the clip range");
  RasterTensor out = x;
  if (cfg.epsilon == 0.0) return out;
  const float eps = static_cast<float>(cfg.epsilon);
  auto v = out.values();
  const auto g = grad.values();
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (!std::isfinite(g[k])) throw std::domain_error("FGSM: non-finite input gradient");
    const float s = g[k] > 0.0f ? 1.0f : (g[k] < 0.0f ? -1.0f : 0.0f);
    v[k] = std::clamp(v[k] + eps * s, lo, hi);
  }
  return out;
}

RasterTensor fgsm(const MimoModel& model, const RasterTensor& x, const RasterTensor& y,
                  const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.epsilon == 0.0) return perturb(x, RasterTensor(x.channels(), x.height(), x.width()), cfg);
  return perturb(x, input_gradient(model, x, y), cfg);
}

RasterTensor fgsm(std::span<const MimoModel* const> members, const RasterTensor& x,
                  const RasterTensor& y, const AttackConfig& cfg) {
  cfg.validate();
  if (members.empty()) throw ConfigError("fgsm: no ensemble members");
  RasterTensor grad(x.channels(), x.height(), x.width());
  if (cfg.epsilon > 0.0)
    for (const MimoModel* m : members) {
      const RasterTensor g = input_gradient(*m, x, y);
      for (std::size_t k = 0; k < grad.size(); ++k) grad.values()[k] += g.values()[k];
    }
  return perturb(x, grad, cfg);
}

}  // namespace mimo
