#pragma once

#include "mimo/arch.hpp"
#include "mimo/tensor.hpp"

#include <span>
#include <vector>

namespace mimo {

inline constexpr double kLogScaleClamp = 10.0;

// Per-pixel Laplace parameters of one subnetwork (or dropout sample, or
// ensemble member).
struct LaplaceField {
  RasterTensor mu;
  RasterTensor b;
};

struct UncertaintyDecomposition {
  RasterTensor mean;
  RasterTensor aleatoric_var;
  RasterTensor epistemic_var;
  RasterTensor combined_var;
};

struct EntropyMaps {
  RasterTensor epistemic;
  RasterTensor combined;
};

struct NllMap {
  RasterTensor per_pixel;
  double mean = 0.0;  // over unmasked pixels, nats
};

// Divisor used for the disagreement term: 1/(m-1) (sample variance, the
// shipped estimator) or 1/m (law of total variance of the equal mixture).
enum class EpistemicEstimator { unbiased, population };

// Scalar kernels shared by the raster API and the training loop. All in double.
namespace laplace {

double scale_from_raw(double f2);  // exp(clamp(f2, -10, 10))
// log b + |y - mu| / b (the constant log 2 is omitted)
double nll_term(double mu, double b, double y);

struct TermGradient {
  double d_f1;
  double d_f2;
};
// Gradient of nll_term with mu = f1 and b = scale_from_raw(f2). The clamp
// has zero derivative outside [-10, 10]; at y == mu the sign is taken as 0.
TermGradient nll_gradient(double f1, double f2, double y);

double cdf(double mu, double b, double y);
double density(double mu, double b, double y);
double mixture_cdf(std::span<const double> mu, std::span<const double> b, double y);
// -log((1/m) sum_i exp(-|y-mu_i|/b_i) / (2 b_i)), log-sum-exp stabilised.
double mixture_nll(std::span<const double> mu, std::span<const double> b, double y);

struct PixelDecomposition {
  double mean;
  double aleatoric;
  double epistemic;
  double combined;
};
PixelDecomposition decompose(std::span<const double> mu, std::span<const double> b,
                             EpistemicEstimator estimator = EpistemicEstimator::unbiased);

double gaussian_entropy(double variance);  // 0.5 ln(2 pi e max(var, 1e-12))

}  // namespace laplace

LaplaceField to_laplace(const SubnetworkOutput& out);

NllMap laplace_nll(const LaplaceField& field, const RasterTensor& y,
                   const PixelMask* mask = nullptr);

// Sums the Laplace NLL term over the given head planes and writes the gradient of
// `scale * sum` w.r.t. f1/f2 into d_f1/d_f2 (which may be empty to skip).
// Returns the NLL sum and counts pixels used.
struct HeadLoss {
  double nll_sum = 0.0;
  std::size_t pixels = 0;
};
HeadLoss accumulate_head_loss(std::span<const float> f1, std::span<const float> f2,
                              std::span<const float> y, std::span<const std::uint8_t> keep,
                              double scale, std::span<float> d_f1, std::span<float> d_f2);

// (1/m) sum_i w_i * laplace_nll_i. Weight decay is applied by the optimizer.
double mimo_loss(std::span<const LaplaceField> fields, std::span<const RasterTensor> targets,
                 std::span<const double> weights, const PixelMask* mask = nullptr);

struct HeadGradient {
  RasterTensor d_f1;
  RasterTensor d_f2;
};
// Gradient of mimo_loss w.r.t. the raw heads of every subnetwork.
std::vector<HeadGradient> mimo_loss_gradient(std::span<const SubnetworkOutput> outputs,
                                             std::span<const RasterTensor> targets,
                                             std::span<const double> weights,
                                             const PixelMask* mask = nullptr);

RasterTensor posterior_mean(std::span<const LaplaceField> fields);

UncertaintyDecomposition decompose_variance(
    std::span<const LaplaceField> fields,
    EpistemicEstimator estimator = EpistemicEstimator::unbiased);

NllMap mixture_nll(std::span<const LaplaceField> fields, const RasterTensor& y,
                   const PixelMask* mask = nullptr);

EntropyMaps entropy_maps(const UncertaintyDecomposition& dec);

RasterTensor laplace_cdf(const LaplaceField& field, const RasterTensor& y);
RasterTensor mixture_cdf(std::span<const LaplaceField> fields, const RasterTensor& y);

}  // namespace mimo
