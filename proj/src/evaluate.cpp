#include "mimo/error.hpp"
#include "mimo/predictive.hpp"
#include "mimo/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace mimo {

int run_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MIMO_RUN_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(n, 1);
}

namespace {

// Per-image partial results; reduced in a canonical order afterwards.
struct ImageStats {
  std::size_t pixels = 0;
  double abs_sum = 0, sq_sum = 0, nll_sum = 0;
  double alea_sum = 0, epi_sum = 0, epi_ent_sum = 0, comb_ent_sum = 0;
  double bstar_sum = 0;
  std::vector<double> member_nll;  // mean training term per member
  std::vector<double> pit;
  std::vector<float> abs_err, uncertainty, epi_entropy, comb_entropy;
  std::vector<std::pair<double, double>> scale_pairs;  // (mean b, b*)
};

ImageStats evaluate_image(const Predictor& predictor, const Sample& s, std::size_t index,
                          const RasterTensor* noise_scale) {
  if (s.target.channels() != 1 || s.target.height() != s.input.height() ||
      s.target.width() != s.input.width())
    throw ShapeError("evaluate: target must be (1, H, W) matching the input");
  const auto fields = predictor.predict(s.input, index);
  const auto dec = aggregate(fields);
  const std::size_t m = fields.size();
  const std::size_t d = s.target.size();
  if (noise_scale && noise_scale->size() != d) throw ShapeError("evaluate: noise scale shape mismatch");
  ImageStats st;
  st.member_nll.assign(m, 0.0);
  std::vector<double> mu(m), b(m);
  const auto y = s.target.values();
  for (std::size_t p = 0; p < d; ++p) {
    if (s.mask && !s.mask->keep[p]) continue;
    double bmean = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      mu[i] = fields[i].mu.values()[p];
      b[i] = fields[i].b.values()[p];
      st.member_nll[i] += laplace::nll_term(mu[i], b[i], y[p]);
      bmean += b[i];
    }
    bmean /= static_cast<double>(m);
    const double err = std::abs(static_cast<double>(dec.mean.values()[p]) - y[p]);
    const double epi_ent = laplace::gaussian_entropy(dec.epistemic_var.values()[p]);
    const double comb_ent = laplace::gaussian_entropy(dec.combined_var.values()[p]);
    ++st.pixels;
    st.abs_sum += err;
    st.sq_sum += err * err;
    st.nll_sum += laplace::mixture_nll(mu, b, y[p]);
    st.alea_sum += dec.aleatoric_var.values()[p];
    st.epi_sum += dec.epistemic_var.values()[p];
    st.epi_ent_sum += epi_ent;
    st.comb_ent_sum += comb_ent;
    st.pit.push_back(laplace::mixture_cdf(mu, b, y[p]));
    st.abs_err.push_back(static_cast<float>(err));
    st.uncertainty.push_back(dec.combined_var.values()[p]);
    st.epi_entropy.push_back(static_cast<float>(epi_ent));
    st.comb_entropy.push_back(static_cast<float>(comb_ent));
    if (noise_scale) {
      const double bs = noise_scale->values()[p];
      st.bstar_sum += bs;
      st.scale_pairs.emplace_back(bmean, bs);
    }
  }
  if (st.pixels > 0)
    for (double& v : st.member_nll) v /= static_cast<double>(st.pixels);
  return st;
}

double ordered_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

template <class F>
double reduce(const std::vector<ImageStats>& stats, F field) {
  std::vector<double> v;
  v.reserve(stats.size());
  for (const auto& s : stats) v.push_back(field(s));
  return ordered_sum(std::move(v));
}

}  // namespace

EvalReport evaluate(const Predictor& predictor, std::span<const Sample> samples,
                    const EvalOptions& options, std::span<const RasterTensor> noise_scales) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  if (!noise_scales.empty() && noise_scales.size() != samples.size())
    throw ShapeError("evaluate: one noise-scale raster per sample expected");
  std::vector<ImageStats> stats(samples.size());
  const int threads = std::min<int>(run_threads(options.threads), static_cast<int>(samples.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= samples.size()) return;
      try {
        stats[k] = evaluate_image(predictor, samples[k], k,
                                  noise_scales.empty() ? nullptr : &noise_scales[k]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(samples.size());
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  EvalReport r;
  r.images = samples.size();
  for (const auto& s : stats) r.pixels += s.pixels;
  if (r.pixels == 0) throw std::invalid_argument("evaluate: every pixel is masked");
  const double n = static_cast<double>(r.pixels);
  r.mae = reduce(stats, [](const ImageStats& s) { return s.abs_sum; }) / n;
  r.rmse = std::sqrt(reduce(stats, [](const ImageStats& s) { return s.sq_sum; }) / n);
  r.nll = reduce(stats, [](const ImageStats& s) { return s.nll_sum; }) / n;
  r.mean_aleatoric_var = reduce(stats, [](const ImageStats& s) { return s.alea_sum; }) / n;
  r.mean_epistemic_var = reduce(stats, [](const ImageStats& s) { return s.epi_sum; }) / n;
  r.mean_epistemic_entropy = reduce(stats, [](const ImageStats& s) { return s.epi_ent_sum; }) / n;
  r.mean_combined_entropy = reduce(stats, [](const ImageStats& s) { return s.comb_ent_sum; }) / n;
  const std::size_t m = stats.front().member_nll.size();
  for (std::size_t i = 0; i < m; ++i)
    r.per_submodel_nll.push_back(
        reduce(stats, [&](const ImageStats& s) {
          return s.member_nll[i] * static_cast<double>(s.pixels);
        }) / n);
  for (const auto& s : stats) {
    const double px = std::max<double>(1.0, static_cast<double>(s.pixels));
    r.image_epistemic_entropy.push_back(s.epi_ent_sum / px);
    r.image_mae.push_back(s.abs_sum / px);
  }

  std::vector<double> pit;
  pit.reserve(r.pixels);
  for (const auto& s : stats) pit.insert(pit.end(), s.pit.begin(), s.pit.end());
  r.calibration = calibration(pit, options.levels);
  r.ece = r.calibration.ece;

  // Canonical pixel order (uncertainty, then error) makes ties order free.
  std::vector<std::pair<float, float>> ranked;
  ranked.reserve(r.pixels);
  for (const auto& s : stats)
    for (std::size_t p = 0; p < s.abs_err.size(); ++p) ranked.emplace_back(s.uncertainty[p], s.abs_err[p]);
  std::sort(ranked.begin(), ranked.end());
  std::vector<float> unc(ranked.size()), err(ranked.size());
  for (std::size_t p = 0; p < ranked.size(); ++p) {
    unc[p] = ranked[p].first;
    err[p] = ranked[p].second;
  }
  r.sparsification = sparsification(err, unc, options.fractions);

  std::vector<RasterTensor> epi_maps, comb_maps;
  for (const auto& s : stats) {
    const int k = static_cast<int>(s.epi_entropy.size());
    epi_maps.emplace_back(1, 1, k, s.epi_entropy);
    comb_maps.emplace_back(1, 1, k, s.comb_entropy);
  }
  if (options.histogram_range) {
    const auto [lo, hi] = *options.histogram_range;
    r.epistemic_entropy_hist = entropy_histogram(epi_maps, lo, hi, options.histogram_bins);
    r.combined_entropy_hist = entropy_histogram(comb_maps, lo, hi, options.histogram_bins);
  } else {
    r.epistemic_entropy_hist = entropy_histogram(epi_maps, options.histogram_bins);
    r.combined_entropy_hist = entropy_histogram(comb_maps, options.histogram_bins);
  }

  if (!noise_scales.empty()) {
    r.noise_floor_mae = reduce(stats, [](const ImageStats& s) { return s.bstar_sum; }) / n;
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(r.pixels);
    for (const auto& s : stats) pairs.insert(pairs.end(), s.scale_pairs.begin(), s.scale_pairs.end());
    std::sort(pairs.begin(), pairs.end());
    std::vector<double> a(pairs.size()), bb(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      a[p] = pairs[p].first;
      bb[p] = pairs[p].second;
    }
    r.scale_pearson = pairs.size() >= 2 ? pearson(a, bb) : 0.0;
  }
  return r;
}

}  // namespace mimo
