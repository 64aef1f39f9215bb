#include "mimo/sync.hpp"
#include "mimo/error.hpp"

#include <algorithm>
#include <cmath>

namespace mimo {

SyncState::SyncState(int num_submodels, int window, double temperature)
    : window_(window), temperature_(temperature) {
  if (num_submodels < 1) throw ConfigError("sync: need at least one submodel");
  if (window < 1) throw ConfigError("sync: window k must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ConfigError("sync: temperature must be positive and finite");
  buffers_.resize(num_submodels);
  weights_.assign(num_submodels, 1.0);
}

std::vector<double> SyncState::push_and_weight(std::span<const double> step_losses) {
  if (step_losses.size() != buffers_.size())
    throw ShapeError("sync: expected one loss per submodel");
  if (!std::all_of(step_losses.begin(), step_losses.end(),
                   [](double v) { return std::isfinite(v); }))
    return weights_;
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    buffers_[i].push_back(step_losses[i]);
    if (static_cast<int>(buffers_[i].size()) > window_) buffers_[i].pop_front();
  }
  weights_ = sync_weights(window_means(), temperature_);
  return weights_;
}

std::vector<double> SyncState::window_means() const {
  std::vector<double> means(buffers_.size(), 0.0);
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    const auto& buf = buffers_[i];
    if (buf.empty()) continue;
    double acc = 0.0;
    for (double v : buf) acc += v;
    means[i] = acc / static_cast<double>(buf.size());
  }
  return means;
}

std::vector<double> sync_weights(std::span<const double> mean_losses, double temperature) {
  const std::size_t m = mean_losses.size();
  if (m == 0) return {};
  const double top = *std::max_element(mean_losses.begin(), mean_losses.end());
  std::vector<double> w(m);
  double z = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    w[i] = std::exp((mean_losses[i] - top) / temperature);
    z += w[i];
  }
  for (double& v : w) v = static_cast<double>(m) * v / z;
  return w;
}

double apply_weights(std::span<const double> losses, std::span<const double> weights) {
  if (losses.size() != weights.size())
    throw ShapeError("apply_weights: losses and weights differ in length");
  if (losses.empty()) throw ShapeError("apply_weights: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) acc += weights[i] * losses[i];
  return acc / static_cast<double>(losses.size());
}

}  // namespace mimo
