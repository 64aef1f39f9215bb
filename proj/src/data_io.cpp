#include "mimo/data_io.hpp"
#include "mimo/error.hpp"
#include "mimo/raster_io.hpp"
#include "mimo/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace mimo {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(FieldKind k) { return k == FieldKind::gauss_bumps ? "gauss_bumps" : "value_noise"; }

std::string to_string(NoiseScaleFn f) {
  return f == NoiseScaleFn::constant ? "constant" : "input_magnitude";
}

FieldKind field_kind_from_string(const std::string& s) {
  if (s == "gauss_bumps") return FieldKind::gauss_bumps;
  if (s == "value_noise") return FieldKind::value_noise;
  throw ConfigError("unknown field kind '" + s + "'");
}

NoiseScaleFn noise_scale_fn_from_string(const std::string& s) {
  if (s == "constant") return NoiseScaleFn::constant;
  if (s == "input_magnitude") return NoiseScaleFn::input_magnitude;
  throw ConfigError("unknown noise scale function '" + s + "'");
}

void SynthTaskConfig::validate() const {
  if (channels < 1) throw ConfigError("synthetic task needs >= 1 input channel");
  if (height < 1 || width < 1) throw ConfigError("synthetic task needs positive size");
  if (spatial_multiple < 1) throw ConfigError("spatial_multiple must be >= 1");
  if (height % spatial_multiple != 0 || width % spatial_multiple != 0)
    throw ConfigError("size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by " + std::to_string(spatial_multiple));
  const double hi = noise_scale_fn == NoiseScaleFn::constant ? noise_base : noise_base + noise_slope;
  if (noise_base < 1e-3 || noise_slope < 0.0 || hi > 1.0)
    throw ConfigError("noise scale must stay within [1e-3, 1]");
  if (!(ood_shift >= 0.0) || !std::isfinite(ood_shift)) throw ConfigError("ood_shift must be >= 0");
  if (!(cell >= 1.0)) throw ConfigError("cell must be >= 1 pixel");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
}

namespace {

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// One octave of lattice value noise with random phase, values in [0, 1].
std::vector<double> value_noise_octave(int h, int w, double cell, Rng& rng) {
  const double ox = rng.uniform(0.0, cell);
  const double oy = rng.uniform(0.0, cell);
  const int gw = static_cast<int>(std::ceil((w + cell) / cell)) + 1;
  const int gh = static_cast<int>(std::ceil((h + cell) / cell)) + 1;
  std::vector<double> lattice(static_cast<std::size_t>(gw) * gh);
  for (double& v : lattice) v = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double fy = (y + oy) / cell;
    const int iy = static_cast<int>(fy);
    const double ty = smoothstep(fy - iy);
    for (int x = 0; x < w; ++x) {
      const double fx = (x + ox) / cell;
      const int ix = static_cast<int>(fx);
      const double tx = smoothstep(fx - ix);
      const double v00 = lattice[iy * gw + ix], v01 = lattice[iy * gw + ix + 1];
      const double v10 = lattice[(iy + 1) * gw + ix], v11 = lattice[(iy + 1) * gw + ix + 1];
      const double top = v00 + (v01 - v00) * tx;
      const double bottom = v10 + (v11 - v10) * tx;
      out[y * w + x] = top + (bottom - top) * ty;
    }
  }
  return out;
}

std::vector<double> make_field(const SynthTaskConfig& cfg, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  const double freq = 1.0 + 2.0 * cfg.ood_shift;
  std::vector<double> f;
  if (cfg.field_kind == FieldKind::value_noise) {
    const double cell = cfg.cell / freq;
    auto coarse = value_noise_octave(h, w, cell, rng);
    auto fine = value_noise_octave(h, w, std::max(1.0, cell / 2.0), rng);
    f.resize(coarse.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.65 * coarse[i] + 0.35 * fine[i];
  } else {
    const int bumps = static_cast<int>(std::lround(6.0 * freq));
    std::vector<double> acc(static_cast<std::size_t>(h) * w, 0.0);
    for (int k = 0; k < bumps; ++k) {
      const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
      const double r = rng.uniform(0.5 * cfg.cell, 1.25 * cfg.cell) / freq;
      const double a = rng.uniform(0.3, 1.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          acc[y * w + x] += a * std::exp(-d2 / (2.0 * r * r));
        }
    }
    f.resize(acc.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = 1.0 - std::exp(-acc[i]);
  }
  if (cfg.ood_shift != 0.0) {
    const double gain = 1.0 + cfg.ood_shift;
    for (double& v : f) v = std::clamp(0.5 + gain * (v - 0.5) + 0.25 * cfg.ood_shift, 0.0, 1.0);
  }
  return f;
}

// Separable Gaussian blur (sigma 1.5, radius 3) with clamp-to-edge borders.
std::vector<double> blur(const std::vector<double>& src, int h, int w) {
  constexpr int radius = 3;
  double kernel[2 * radius + 1];
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-(k * k) / (2.0 * 1.5 * 1.5));
    norm += kernel[k + radius];
  }
  for (double& k : kernel) k /= norm;
  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * src[y * w + std::clamp(x + k, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * tmp[std::clamp(y + k, 0, h - 1) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

json generator_json(const SynthTaskConfig& cfg) {
  return json{{"kind", cfg.kind()},
              {"field_kind", to_string(cfg.field_kind)},
              {"channels", cfg.channels},
              {"height", cfg.height},
              {"width", cfg.width},
              {"noise_scale_fn", to_string(cfg.noise_scale_fn)},
              {"noise_base", cfg.noise_base},
              {"noise_slope", cfg.noise_slope},
              {"ood_shift", cfg.ood_shift},
              {"cell", cfg.cell},
              {"num_classes", cfg.num_classes},
              {"spatial_multiple", cfg.spatial_multiple},
              {"seed", cfg.seed}};
}

SynthTaskConfig generator_from_json(const json& j) {
  SynthTaskConfig cfg;
  cfg.field_kind = field_kind_from_string(j.at("field_kind").get<std::string>());
  cfg.channels = j.at("channels").get<int>();
  cfg.height = j.at("height").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.noise_scale_fn = noise_scale_fn_from_string(j.at("noise_scale_fn").get<std::string>());
  cfg.noise_base = j.at("noise_base").get<double>();
  cfg.noise_slope = j.at("noise_slope").get<double>();
  cfg.ood_shift = j.at("ood_shift").get<double>();
  cfg.cell = j.at("cell").get<double>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.spatial_multiple = j.at("spatial_multiple").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

std::string record_name(const char* dir, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.bin", i);
  return std::string(dir) + "/" + buf;
}

}  // namespace

Dataset generate_samples(const SynthTaskConfig& cfg, std::size_t n) {
  cfg.validate();
  if (n < 1) throw ConfigError("need at least one sample");
  const int h = cfg.height, w = cfg.width, c = cfg.channels;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Dataset ds;
  ds.manifest.sample_count = n;
  ds.manifest.input_channels = c;
  ds.manifest.height = h;
  ds.manifest.width = w;
  ds.manifest.generator = cfg;
  ds.manifest.kind = cfg.kind();
  ds.samples.reserve(n);
  ds.noise_scales.reserve(n);
  ds.class_maps.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    // The field stream ignores the shift, so ood_shift = 0 reproduces the ID data.
    Rng field_rng(Rng::derive_seed(cfg.seed, 2 * s));
    Rng noise_rng(Rng::derive_seed(cfg.seed, 2 * s + 1));
    RasterTensor input(c, h, w);
    std::vector<std::vector<double>> blurred;
    for (int ch = 0; ch < c; ++ch) {
      auto f = make_field(cfg, field_rng);
      auto dst = input.channel(ch);
      for (std::size_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(f[i]);
      std::vector<double> stored(dst.begin(), dst.end());
      blurred.push_back(blur(stored, h, w));
    }
    const auto& first = blurred.front();
    const auto& last = blurred.back();
    RasterTensor target(1, h, w), scale(1, h, w);
    ClassMap classes{h, w, std::vector<std::int32_t>(hw)};
    for (std::size_t i = 0; i < hw; ++i) {
      const double s0 = first[i], u = last[i];
      const double clean = s0 * (1.0 - 0.5 * u) + 0.25 * std::sin(2.0 * std::numbers::pi * u);
      double b = cfg.noise_base;
      if (cfg.noise_scale_fn == NoiseScaleFn::input_magnitude) b += cfg.noise_slope * std::clamp(u, 0.0, 1.0);
      b = std::clamp(b, 1e-3, 1.0);
      const float bf = static_cast<float>(b);
      scale.values()[i] = bf;
      target.values()[i] = static_cast<float>(noise_rng.laplace(clean, bf));
      const int label = static_cast<int>(std::floor(std::clamp(s0, 0.0, 1.0) * cfg.num_classes));
      classes.labels[i] = std::min(label, cfg.num_classes - 1);
    }
    ds.samples.push_back(Sample{std::move(input), std::move(target), std::nullopt});
    ds.noise_scales.push_back(std::move(scale));
    ds.class_maps.push_back(std::move(classes));
  }
  return ds;
}

DatasetManifest write_dataset(const fs::path& dir, Dataset& ds) {
  fs::create_directories(dir);
  auto& man = ds.manifest;
  man.sample_count = ds.samples.size();
  man.records.clear();
  json samples = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    SampleRecord rec;
    rec.input = record_name("inputs", i);
    rec.target = record_name("targets", i);
    rec.input_crc32 = io::write_f32(dir / rec.input, ds.samples[i].input.values());
    rec.target_crc32 = io::write_f32(dir / rec.target, ds.samples[i].target.values());
    json j{{"input", rec.input},
           {"input_crc32", rec.input_crc32},
           {"target", rec.target},
           {"target_crc32", rec.target_crc32}};
    if (i < ds.noise_scales.size()) {
      rec.noise_scale = record_name("noise_scale", i);
      rec.noise_scale_crc32 = io::write_f32(dir / rec.noise_scale, ds.noise_scales[i].values());
      j["noise_scale"] = rec.noise_scale;
      j["noise_scale_crc32"] = rec.noise_scale_crc32;
    }
    if (i < ds.class_maps.size()) {
      rec.class_map = record_name("class_map", i);
      rec.class_map_crc32 = io::write_i32(dir / rec.class_map, ds.class_maps[i].labels);
      j["class_map"] = rec.class_map;
      j["class_map_crc32"] = rec.class_map_crc32;
    }
    samples.push_back(std::move(j));
    man.records.push_back(std::move(rec));
  }
  json doc{{"version", man.version},
           {"sample_count", man.sample_count},
           {"input_channels", man.input_channels},
           {"target_channels", man.target_channels},
           {"height", man.height},
           {"width", man.width},
           {"kind", man.kind},
           {"samples", std::move(samples)}};
  if (man.generator) doc["generator"] = generator_json(*man.generator);
  io::write_text_atomic(dir / "manifest.json", doc.dump(2) + "\n");
  return man;
}

DatasetManifest generate_synthetic(const SynthTaskConfig& cfg, std::size_t n, const fs::path& dir) {
  Dataset ds = generate_samples(cfg, n);
  return write_dataset(dir, ds);
}

Dataset load_dataset(const fs::path& manifest_or_dir) {
  const fs::path manifest_path =
      fs::is_directory(manifest_or_dir) ? manifest_or_dir / "manifest.json" : manifest_or_dir;
  const fs::path root = manifest_path.parent_path();
  if (!fs::exists(manifest_path)) throw IoError("missing file: " + manifest_path.string());
  json doc;
  try {
    std::ifstream in(manifest_path);
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  auto& man = ds.manifest;
  try {
    man.version = doc.at("version").get<int>();
    if (man.version != 1)
      throw IoError("unsupported dataset version " + std::to_string(man.version) + " in " +
                    manifest_path.string());
    man.sample_count = doc.at("sample_count").get<std::size_t>();
    man.input_channels = doc.at("input_channels").get<int>();
    man.target_channels = doc.at("target_channels").get<int>();
    man.height = doc.at("height").get<int>();
    man.width = doc.at("width").get<int>();
    man.kind = doc.value("kind", std::string("id"));
    if (doc.contains("generator")) man.generator = generator_from_json(doc.at("generator"));
    const auto& samples = doc.at("samples");
    if (samples.size() != man.sample_count)
      throw IoError("manifest sample_count disagrees with its sample list: " +
                    manifest_path.string());
    const std::size_t hw = static_cast<std::size_t>(man.height) * man.width;
    for (const auto& j : samples) {
      SampleRecord rec;
      rec.input = j.at("input").get<std::string>();
      rec.input_crc32 = j.at("input_crc32").get<std::uint32_t>();
      rec.target = j.at("target").get<std::string>();
      rec.target_crc32 = j.at("target_crc32").get<std::uint32_t>();
      RasterTensor input(man.input_channels, man.height, man.width,
                         io::read_f32(root / rec.input, man.input_channels * hw, rec.input_crc32));
      RasterTensor target(
          man.target_channels, man.height, man.width,
          io::read_f32(root / rec.target, man.target_channels * hw, rec.target_crc32));
      ds.samples.push_back(Sample{std::move(input), std::move(target), std::nullopt});
      if (j.contains("noise_scale")) {
        rec.noise_scale = j.at("noise_scale").get<std::string>();
        rec.noise_scale_crc32 = j.at("noise_scale_crc32").get<std::uint32_t>();
        ds.noise_scales.emplace_back(
            man.target_channels, man.height, man.width,
            io::read_f32(root / rec.noise_scale, man.target_channels * hw, rec.noise_scale_crc32));
      }
      if (j.contains("class_map")) {
        rec.class_map = j.at("class_map").get<std::string>();
        rec.class_map_crc32 = j.at("class_map_crc32").get<std::uint32_t>();
        ds.class_maps.push_back(ClassMap{man.height, man.width,
                                         io::read_i32(root / rec.class_map, hw, rec.class_map_crc32)});
      }
      man.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

PixelMask mask_classes(const RasterTensor& y, const ClassMap& classes,
                       const std::set<std::int32_t>& keep) {
  if (keep.empty()) throw std::invalid_argument("mask_classes: keep set is empty");
  if (classes.height != y.height() || classes.width != y.width() ||
      classes.labels.size() != y.pixels())
    throw ShapeError("class map shape does not match target");
  PixelMask mask{y.height(), y.width(), std::vector<std::uint8_t>(y.pixels(), 0)};
  for (std::size_t i = 0; i < mask.keep.size(); ++i)
    mask.keep[i] = keep.count(classes.labels[i]) ? 1 : 0;
  return mask;
}

RasterTensor compute_ndvi(const RasterTensor& red, const RasterTensor& infrared) {
  if (!red.same_shape(infrared)) throw ShapeError("NDVI bands differ in shape");
  RasterTensor out(red.channels(), red.height(), red.width());
  for (std::size_t i = 0; i < red.size(); ++i) {
    const double r = red.values()[i], ir = infrared.values()[i];
    if (r < 0.0 || ir < 0.0) throw std::invalid_argument("NDVI: negative reflectance");
    const double sum = ir + r;
    out.values()[i] = sum == 0.0 ? 0.0f : static_cast<float>((ir - r) / sum);
  }
  return out;
}

}  // namespace mimo
