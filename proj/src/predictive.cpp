#include "mimo/predictive.hpp"
#include "mimo/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mimo {

namespace laplace {

double scale_from_raw(double f2) {
  return std::exp(std::clamp(f2, -kLogScaleClamp, kLogScaleClamp));
}

double nll_term(double mu, double b, double y) { return std::log(b) + std::abs(y - mu) / b; }

TermGradient nll_gradient(double f1, double f2, double y) {
  const double b = scale_from_raw(f2);
  const double r = y - f1;
  const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
  const bool inside = f2 > -kLogScaleClamp && f2 < kLogScaleClamp;
  return {-sign / b, inside ? 1.0 - std::abs(r) / b : 0.0};
}

double cdf(double mu, double b, double y) {
  const double z = (y - mu) / b;
  return z < 0.0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z);
}

double density(double mu, double b, double y) { return std::exp(-std::abs(y - mu) / b) / (2.0 * b); }

double mixture_cdf(std::span<const double> mu, std::span<const double> b, double y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) acc += cdf(mu[i], b[i], y);
  return acc / static_cast<double>(mu.size());
}

double mixture_nll(std::span<const double> mu, std::span<const double> b, double y) {
  const std::size_t m = mu.size();
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    const double lp = -std::log(2.0 * b[i]) - std::abs(y - mu[i]) / b[i];
    best = std::max(best, lp);
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    acc += std::exp(-std::log(2.0 * b[i]) - std::abs(y - mu[i]) / b[i] - best);
  return -(best + std::log(acc / static_cast<double>(m)));
}

PixelDecomposition decompose(std::span<const double> mu, std::span<const double> b,
                             EpistemicEstimator estimator) {
  const std::size_t m = mu.size();
  double mean = 0.0, alea = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    mean += mu[i];
    alea += 2.0 * b[i] * b[i];
  }
  mean /= static_cast<double>(m);
  alea /= static_cast<double>(m);
  double dev = 0.0;
  for (std::size_t i = 0; i < m; ++i) dev += (mu[i] - mean) * (mu[i] - mean);
  const double divisor =
      estimator == EpistemicEstimator::unbiased ? static_cast<double>(m - 1) : static_cast<double>(m);
  const double epi = dev / divisor;
  return {mean, alea, epi, alea + epi};
}

double gaussian_entropy(double variance) {
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * std::max(variance, 1e-12));
}

}  // namespace laplace

namespace {

void check_field(const LaplaceField& f, const RasterTensor& y) {
  if (!f.mu.same_shape(f.b)) throw ShapeError("Laplace field: mu and b shapes differ");
  if (!f.mu.same_shape(y)) throw ShapeError("Laplace field and target shapes differ");
}

std::span<const std::uint8_t> mask_span(const PixelMask* mask, const RasterTensor& y) {
  if (mask == nullptr) return {};
  if (mask->height != y.height() || mask->width != y.width() || y.channels() != 1 ||
      mask->keep.size() != y.pixels())
    throw ShapeError("mask shape does not match target");
  return mask->keep;
}

void check_fields(std::span<const LaplaceField> fields) {
  if (fields.empty()) throw ShapeError("need at least one Laplace field");
  for (const auto& f : fields) {
    if (!f.mu.same_shape(fields.front().mu) || !f.b.same_shape(fields.front().mu))
      throw ShapeError("Laplace fields differ in shape");
  }
}

}  // namespace

LaplaceField to_laplace(const SubnetworkOutput& out) {
  if (!out.f1.same_shape(out.f2)) throw ShapeError("to_laplace: f1 and f2 shapes differ");
  LaplaceField field{out.f1, RasterTensor(out.f2.channels(), out.f2.height(), out.f2.width())};
  auto f2 = out.f2.values();
  auto b = field.b.values();
  for (std::size_t i = 0; i < f2.size(); ++i) {
    if (std::isnan(f2[i]) || std::isnan(out.f1.values()[i]))
      throw std::domain_error("to_laplace: NaN in network output");
    b[i] = static_cast<float>(laplace::scale_from_raw(f2[i]));
  }
  return field;
}

NllMap laplace_nll(const LaplaceField& field, const RasterTensor& y, const PixelMask* mask) {
  check_field(field, y);
  auto keep = mask_span(mask, y);
  NllMap out{RasterTensor(y.channels(), y.height(), y.width()), 0.0};
  auto mu = field.mu.values();
  auto b = field.b.values();
  auto t = y.values();
  auto dst = out.per_pixel.values();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = laplace::nll_term(mu[i], b[i], t[i]);
    dst[i] = static_cast<float>(v);
    if (keep.empty() || keep[i % y.pixels()]) {
      sum += v;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("laplace_nll: mask excludes every pixel");
  out.mean = sum / static_cast<double>(count);
  return out;
}

HeadLoss accumulate_head_loss(std::span<const float> f1, std::span<const float> f2,
                              std::span<const float> y, std::span<const std::uint8_t> keep,
                              double scale, std::span<float> d_f1, std::span<float> d_f2) {
  HeadLoss loss;
  const bool grad = !d_f1.empty();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!keep.empty() && !keep[i]) {
      if (grad) {
        d_f1[i] = 0.0f;
        d_f2[i] = 0.0f;
      }
      continue;
    }
    const double b = laplace::scale_from_raw(f2[i]);
    loss.nll_sum += laplace::nll_term(f1[i], b, y[i]);
    ++loss.pixels;
    if (grad) {
      const auto g = laplace::nll_gradient(f1[i], f2[i], y[i]);
      d_f1[i] = static_cast<float>(scale * g.d_f1);
      d_f2[i] = static_cast<float>(scale * g.d_f2);
    }
  }
  return loss;
}

double mimo_loss(std::span<const LaplaceField> fields, std::span<const RasterTensor> targets,
                 std::span<const double> weights, const PixelMask* mask) {
  if (fields.size() != targets.size() || fields.size() != weights.size())
    throw ShapeError("mimo_loss: fields, targets and weights differ in length");
  if (fields.empty()) throw ShapeError("mimo_loss: no subnetworks");
  double total = 0.0;
  for (std::size_t i = 0; i < fields.size(); ++i)
    total += weights[i] * laplace_nll(fields[i], targets[i], mask).mean;
  return total / static_cast<double>(fields.size());
}

std::vector<HeadGradient> mimo_loss_gradient(std::span<const SubnetworkOutput> outputs,
                                             std::span<const RasterTensor> targets,
                                             std::span<const double> weights,
                                             const PixelMask* mask) {
  if (outputs.size() != targets.size() || outputs.size() != weights.size())
    throw ShapeError("mimo_loss_gradient: lengths differ");
  std::vector<HeadGradient> grads;
  const double m = static_cast<double>(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    if (!o.f1.same_shape(targets[i]) || !o.f2.same_shape(targets[i]))
      throw ShapeError("mimo_loss_gradient: head/target shapes differ");
    auto keep = mask_span(mask, targets[i]);
    const std::size_t d = keep.empty() ? targets[i].size()
                                       : static_cast<std::size_t>(
                                             std::count(keep.begin(), keep.end(), std::uint8_t{1}));
    if (d == 0) throw std::invalid_argument("mimo_loss_gradient: mask excludes every pixel");
    HeadGradient g{RasterTensor(1, o.f1.height(), o.f1.width()),
                   RasterTensor(1, o.f1.height(), o.f1.width())};
    accumulate_head_loss(o.f1.values(), o.f2.values(), targets[i].values(), keep,
                         weights[i] / (m * static_cast<double>(d)), g.d_f1.values(),
                         g.d_f2.values());
    grads.push_back(std::move(g));
  }
  return grads;
}

RasterTensor posterior_mean(std::span<const LaplaceField> fields) {
  check_fields(fields);
  const auto& first = fields.front().mu;
  RasterTensor mean(first.channels(), first.height(), first.width());
  auto dst = mean.values();
  const double m = static_cast<double>(fields.size());
  for (std::size_t p = 0; p < dst.size(); ++p) {
    double acc = 0.0;
    for (const auto& f : fields) acc += f.mu.values()[p];
    dst[p] = static_cast<float>(acc / m);
  }
  return mean;
}

UncertaintyDecomposition decompose_variance(std::span<const LaplaceField> fields,
                                            EpistemicEstimator estimator) {
  check_fields(fields);
  if (estimator == EpistemicEstimator::unbiased && fields.size() < 2)
    throw std::invalid_argument(
        "decompose_variance: epistemic variance needs at least 2 members (m >= 2)");
  const auto& first = fields.front().mu;
  const int c = first.channels(), h = first.height(), w = first.width();
  UncertaintyDecomposition dec{RasterTensor(c, h, w), RasterTensor(c, h, w), RasterTensor(c, h, w),
                               RasterTensor(c, h, w)};
  const std::size_t m = fields.size();
  std::vector<double> mu(m), b(m);
  for (std::size_t p = 0; p < first.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      mu[i] = fields[i].mu.values()[p];
      b[i] = fields[i].b.values()[p];
    }
    const auto px = laplace::decompose(mu, b, estimator);
    const float alea = static_cast<float>(px.aleatoric);
    const float epi = static_cast<float>(px.epistemic);
    dec.mean.values()[p] = static_cast<float>(px.mean);
    dec.aleatoric_var.values()[p] = alea;
    dec.epistemic_var.values()[p] = epi;
    dec.combined_var.values()[p] = alea + epi;
  }
  return dec;
}

NllMap mixture_nll(std::span<const LaplaceField> fields, const RasterTensor& y,
                   const PixelMask* mask) {
  check_fields(fields);
  check_field(fields.front(), y);
  auto keep = mask_span(mask, y);
  const std::size_t m = fields.size();
  std::vector<double> mu(m), b(m);
  NllMap out{RasterTensor(y.channels(), y.height(), y.width()), 0.0};
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < y.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      mu[i] = fields[i].mu.values()[p];
      b[i] = fields[i].b.values()[p];
    }
    const double v = laplace::mixture_nll(mu, b, y.values()[p]);
    out.per_pixel.values()[p] = static_cast<float>(v);
    if (keep.empty() || keep[p % y.pixels()]) {
      sum += v;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("mixture_nll: mask excludes every pixel");
  out.mean = sum / static_cast<double>(count);
  return out;
}

EntropyMaps entropy_maps(const UncertaintyDecomposition& dec) {
  EntropyMaps maps{RasterTensor(dec.epistemic_var.channels(), dec.epistemic_var.height(),
                                dec.epistemic_var.width()),
                   RasterTensor(dec.combined_var.channels(), dec.combined_var.height(),
                                dec.combined_var.width())};
  for (std::size_t p = 0; p < dec.epistemic_var.size(); ++p) {
    maps.epistemic.values()[p] =
        static_cast<float>(laplace::gaussian_entropy(dec.epistemic_var.values()[p]));
    maps.combined.values()[p] =
        static_cast<float>(laplace::gaussian_entropy(dec.combined_var.values()[p]));
  }
  return maps;
}

RasterTensor laplace_cdf(const LaplaceField& field, const RasterTensor& y) {
  check_field(field, y);
  RasterTensor out(y.channels(), y.height(), y.width());
  for (std::size_t p = 0; p < y.size(); ++p)
    out.values()[p] = static_cast<float>(
        laplace::cdf(field.mu.values()[p], field.b.values()[p], y.values()[p]));
  return out;
}

RasterTensor mixture_cdf(std::span<const LaplaceField> fields, const RasterTensor& y) {
  check_fields(fields);
  check_field(fields.front(), y);
  const std::size_t m = fields.size();
  std::vector<double> mu(m), b(m);
  RasterTensor out(y.channels(), y.height(), y.width());
  for (std::size_t p = 0; p < y.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      mu[i] = fields[i].mu.values()[p];
      b[i] = fields[i].b.values()[p];
    }
    out.values()[p] = static_cast<float>(laplace::mixture_cdf(mu, b, y.values()[p]));
  }
  return out;
}

}  // namespace mimo
