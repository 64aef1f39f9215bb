#include "mimo/metrics.hpp"
#include "mimo/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mimo {

namespace {

struct ErrorSums {
  double abs = 0.0;
  double sq = 0.0;
  std::size_t count = 0;
};

ErrorSums error_sums(const RasterTensor& pred, const RasterTensor& y, const PixelMask* mask) {
  if (!pred.same_shape(y)) throw ShapeError("prediction and target shapes differ");
  if (mask && (mask->height != y.height() || mask->width != y.width()))
    throw ShapeError("mask shape does not match target");
  ErrorSums s;
  const std::size_t pixels = y.pixels();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (mask && !mask->keep[i % pixels]) continue;
    const double d = static_cast<double>(pred.values()[i]) - y.values()[i];
    s.abs += std::abs(d);
    s.sq += d * d;
    ++s.count;
  }
  if (s.count == 0) throw std::invalid_argument("metrics: mask excludes every pixel");
  return s;
}

}  // namespace

double mae(const RasterTensor& pred, const RasterTensor& y, const PixelMask* mask) {
  const auto s = error_sums(pred, y, mask);
  return s.abs / static_cast<double>(s.count);
}

double rmse(const RasterTensor& pred, const RasterTensor& y, const PixelMask* mask) {
  const auto s = error_sums(pred, y, mask);
  return std::sqrt(s.sq / static_cast<double>(s.count));
}

std::vector<double> default_calibration_levels() {
  std::vector<double> levels;
  for (int j = 1; j <= 19; ++j) levels.push_back(0.05 * j);
  return levels;
}

CalibrationReport calibration(std::span<const double> pit_values, std::span<const double> levels) {
  if (pit_values.empty()) throw std::invalid_argument("calibration: no PIT values");
  CalibrationReport rep;
  rep.levels = levels.empty() ? default_calibration_levels()
                              : std::vector<double>(levels.begin(), levels.end());
  for (std::size_t j = 0; j < rep.levels.size(); ++j) {
    if (!(rep.levels[j] > 0.0 && rep.levels[j] < 1.0))
      throw ConfigError("calibration levels must lie in (0, 1)");
    if (j > 0 && !(rep.levels[j] > rep.levels[j - 1]))
      throw ConfigError("calibration levels must be strictly increasing");
  }
  std::vector<double> sorted(pit_values.begin(), pit_values.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double dev = 0.0;
  for (double level : rep.levels) {
    const auto below = std::upper_bound(sorted.begin(), sorted.end(), level) - sorted.begin();
    const double observed = static_cast<double>(below) / n;
    rep.observed.push_back(observed);
    dev += std::abs(level - observed);
  }
  rep.ece = dev / static_cast<double>(rep.levels.size());
  return rep;
}

std::vector<double> default_sparsification_fractions() {
  std::vector<double> f;
  for (int j = 1; j <= 20; ++j) f.push_back(0.05 * j);
  f.back() = 1.0;
  return f;
}

SparsificationCurve sparsification(std::span<const float> abs_error,
                                   std::span<const float> uncertainty,
                                   std::span<const double> fractions) {
  if (abs_error.size() != uncertainty.size())
    throw ShapeError("sparsification: error and uncertainty sizes differ");
  SparsificationCurve curve;
  curve.retained_fractions = fractions.empty()
                                 ? default_sparsification_fractions()
                                 : std::vector<double>(fractions.begin(), fractions.end());
  const std::size_t d = abs_error.size();
  if (d == 0) {
    curve.mae_at_fraction.assign(curve.retained_fractions.size(), 0.0);
    return curve;
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return uncertainty[a] < uncertainty[b];
  });
  std::vector<double> prefix(d + 1, 0.0);
  for (std::size_t k = 0; k < d; ++k) prefix[k + 1] = prefix[k] + abs_error[order[k]];
  for (std::size_t j = 0; j < curve.retained_fractions.size(); ++j) {
    const double r = curve.retained_fractions[j];
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("retained fractions must lie in (0, 1]");
    if (j > 0 && !(r > curve.retained_fractions[j - 1]))
      throw ConfigError("retained fractions must be increasing");
    std::size_t keep = static_cast<std::size_t>(std::llround(r * static_cast<double>(d)));
    keep = std::clamp<std::size_t>(keep, 1, d);
    curve.mae_at_fraction.push_back(prefix[keep] / static_cast<double>(keep));
  }
  return curve;
}

std::size_t Histogram::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

Histogram histogram(std::span<const float> values, double lo, double hi, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  if (!(hi > lo)) throw ConfigError("histogram range must satisfy lo < hi");
  Histogram h;
  h.counts.assign(bins, 0);
  for (int k = 0; k <= bins; ++k) h.edges.push_back(lo + (hi - lo) * k / bins);
  const double width = (hi - lo) / bins;
  for (float v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("histogram: non-finite value");
    long k = static_cast<long>(std::floor((v - lo) / width));
    k = std::clamp<long>(k, 0, bins - 1);
    ++h.counts[k];
  }
  return h;
}

Histogram entropy_histogram(std::span<const RasterTensor> maps, double lo, double hi, int bins) {
  Histogram total;
  for (const auto& m : maps) {
    auto h = histogram(m.values(), lo, hi, bins);
    if (total.counts.empty()) {
      total = std::move(h);
    } else {
      for (int k = 0; k < bins; ++k) total.counts[k] += h.counts[k];
    }
  }
  if (total.counts.empty()) total = histogram({}, lo, hi, bins);
  return total;
}

Histogram entropy_histogram(std::span<const RasterTensor> maps, int bins) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& m : maps)
    for (float v : m.values()) {
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
    }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  } else {
    hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
  }
  return entropy_histogram(maps, lo, hi, bins);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: bad sizes");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mimo
