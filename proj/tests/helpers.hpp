#pragma once

#include "mimo/nn/tensor.hpp"
#include "mimo/rng.hpp"
#include "mimo/tensor.hpp"

#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testing {

inline mimo::nn::Tensor random_tensor(int n, int c, int h, int w, mimo::Rng& rng, double lo = -1.0,
                                      double hi = 1.0) {
  mimo::nn::Tensor t(n, c, h, w);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline mimo::RasterTensor random_raster(int c, int h, int w, mimo::Rng& rng, double lo = 0.0,
                                        double hi = 1.0) {
  mimo::RasterTensor t(c, h, w);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline double dot(const mimo::nn::Tensor& a, const mimo::nn::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::string templ = (std::filesystem::temp_directory_path() / ("mimo_" + tag + "_XXXXXX")).string();
    path_ = mkdtemp(templ.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
