#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

namespace mimo {

inline constexpr double kDefaultSyncTemperature = 0.3;
inline constexpr int kDefaultSyncWindow = 10;

// Submodel synchronisation: keeps the last k per-submodel losses and turns
// their window means into weights w_i = m * softmax(mean_i / tau), so lagging
// submodels get larger weights while the mean weight stays 1.
class SyncState {
 public:
  SyncState(int num_submodels, int window = kDefaultSyncWindow,
            double temperature = kDefaultSyncTemperature);

  // Appends one step's losses and returns the refreshed weights. Non-finite
  // losses are rejected: buffers stay untouched and the previous weights are
  // returned.
  std::vector<double> push_and_weight(std::span<const double> step_losses);

  const std::vector<double>& weights() const noexcept { return weights_; }
  std::vector<double> window_means() const;
  const std::deque<double>& buffer(int i) const { return buffers_.at(i); }
  int window() const noexcept { return window_; }
  double temperature() const noexcept { return temperature_; }
  int num_submodels() const noexcept { return static_cast<int>(buffers_.size()); }

 private:
  int window_;
  double temperature_;
  std::vector<std::deque<double>> buffers_;
  std::vector<double> weights_;
};

// Softmax weights scaled by m, evaluated with max subtraction.
std::vector<double> sync_weights(std::span<const double> mean_losses, double temperature);

// (1/m) * sum_i w_i * L_i. Weights are plain numbers here: no gradient flows
// through them.
double apply_weights(std::span<const double> losses, std::span<const double> weights);

}  // namespace mimo
