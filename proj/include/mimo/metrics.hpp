#pragma once

#include "mimo/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace mimo {

double mae(const RasterTensor& pred, const RasterTensor& y, const PixelMask* mask = nullptr);
double rmse(const RasterTensor& pred, const RasterTensor& y, const PixelMask* mask = nullptr);

struct CalibrationReport {
  std::vector<double> levels;
  std::vector<double> observed;
  double ece = 0.0;
};

// 0.05, 0.10, ..., 0.95
std::vector<double> default_calibration_levels();

// observed_j = fraction of PIT values <= level_j; ece = mean_j |level_j - observed_j|.
CalibrationReport calibration(std::span<const double> pit_values,
                              std::span<const double> levels = {});

struct SparsificationCurve {
  std::vector<double> retained_fractions;
  std::vector<double> mae_at_fraction;
};

std::vector<double> default_sparsification_fractions();  // 0.05 .. 1.00

// Keeps the lowest-uncertainty pixels (ties broken by pixel index) and
// reports their MAE for each retained fraction.
SparsificationCurve sparsification(std::span<const float> abs_error,
                                   std::span<const float> uncertainty,
                                   std::span<const double> fractions = {});

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;

  std::size_t total() const noexcept;
};

// Fixed-range histogram; values outside [lo, hi] land in the end bins.
Histogram histogram(std::span<const float> values, double lo, double hi, int bins);
// Range taken from the data (a degenerate range is widened by +-0.5).
Histogram entropy_histogram(std::span<const RasterTensor> maps, int bins);
Histogram entropy_histogram(std::span<const RasterTensor> maps, double lo, double hi, int bins);

double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace mimo
