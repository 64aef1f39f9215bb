#pragma once

#include "mimo/batching.hpp"
#include "mimo/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mimo {

enum class FieldKind { gauss_bumps, value_noise };
enum class NoiseScaleFn { constant, input_magnitude };

std::string to_string(FieldKind k);
std::string to_string(NoiseScaleFn f);
FieldKind field_kind_from_string(const std::string& s);
NoiseScaleFn noise_scale_fn_from_string(const std::string& s);

// Synthetic pixel-regression task with known heteroscedastic Laplace noise.
//
// Inputs are smooth random fields in [0, 1]. The target is a fixed blur of
// the inputs passed through a pointwise nonlinearity, plus Laplace noise whose
// per-pixel scale b* is either constant or grows with the blurred last input
// channel. A positive `ood_shift` raises the spatial frequency and contrast
// of the input fields (not the noise).
struct SynthTaskConfig {
  FieldKind field_kind = FieldKind::value_noise;
  int channels = 2;
  int height = 64;
  int width = 64;
  NoiseScaleFn noise_scale_fn = NoiseScaleFn::input_magnitude;
  double noise_base = 0.02;
  double noise_slope = 0.2;
  double ood_shift = 0.0;
  double cell = 8.0;  // value-noise lattice spacing in pixels (in-distribution)
  int num_classes = 4;
  int spatial_multiple = 16;  // H and W must be divisible by this (2^depth)
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  std::string kind() const { return ood_shift > 0.0 ? "ood" : "id"; }
};

struct ClassMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;
};

struct SampleRecord {
  std::string input, target, noise_scale, class_map;  // relative paths ("" = absent)
  std::uint32_t input_crc32 = 0, target_crc32 = 0, noise_scale_crc32 = 0, class_map_crc32 = 0;
};

struct DatasetManifest {
  int version = 1;
  std::size_t sample_count = 0;
  int input_channels = 0;
  int target_channels = 1;
  int height = 0;
  int width = 0;
  std::optional<SynthTaskConfig> generator;
  std::string kind = "id";
  std::vector<SampleRecord> records;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
  std::vector<RasterTensor> noise_scales;  // ground-truth b*, one per sample (may be empty)
  std::vector<ClassMap> class_maps;        // may be empty
};

// In-memory generation; bytes are a pure function of (cfg, n).
Dataset generate_samples(const SynthTaskConfig& cfg, std::size_t n);

// Writes rasters and finally manifest.json (atomic rename), returns the manifest.
DatasetManifest write_dataset(const std::filesystem::path& dir, Dataset& dataset);
DatasetManifest generate_synthetic(const SynthTaskConfig& cfg, std::size_t n,
                                   const std::filesystem::path& dir);

// Accepts a dataset directory or the manifest.json path itself.
Dataset load_dataset(const std::filesystem::path& manifest_or_dir);

PixelMask mask_classes(const RasterTensor& y, const ClassMap& classes,
                       const std::set<std::int32_t>& keep);

// (IR - R) / (IR + R), 0 where IR + R == 0.
RasterTensor compute_ndvi(const RasterTensor& red, const RasterTensor& infrared);

}  // namespace mimo
