#pragma once

#include "mimo/rng.hpp"
#include "mimo/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace mimo {

// One training/evaluation example.
struct Sample {
  RasterTensor input;
  RasterTensor target;
  std::optional<PixelMask> mask;
};

struct RepetitionPolicy {
  double rho = 0.0;  // probability that slot b of subnetwork i>=2 copies subnetwork 1

  void validate() const;
};

// Per-subnetwork views into a sample list. slot[i][b] indexes the source
// samples, so inputs and targets of a slot always come from the same sample.
struct MimoBatch {
  std::span<const Sample> source;
  std::vector<std::vector<std::size_t>> slot;     // m x B
  std::vector<std::vector<bool>> repetition_mask;  // B x m; column 0 always false

  int num_subnetworks() const noexcept { return static_cast<int>(slot.size()); }
  std::size_t batch_size() const noexcept { return slot.empty() ? 0 : slot.front().size(); }
  const RasterTensor& input(int i, std::size_t b) const { return source[slot[i][b]].input; }
  const RasterTensor& target(int i, std::size_t b) const { return source[slot[i][b]].target; }
  const Sample& sample(int i, std::size_t b) const { return source[slot[i][b]]; }
};

// Subnetwork 1 takes a fresh permutation of the batch; every other subnetwork
// takes its own permutation, except that each slot independently copies
// subnetwork 1's sample with probability rho.
MimoBatch make_train_batch(std::span<const Sample> samples, int m, const RepetitionPolicy& policy,
                           Rng& rng);

// The evaluation input repeated m times.
std::vector<const RasterTensor*> make_eval_batch(const RasterTensor& x, int m);

}  // namespace mimo
