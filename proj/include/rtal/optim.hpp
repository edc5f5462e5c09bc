#pragma once

#include <cstdint>
#include <vector>

#include "rtal/checkpoint.hpp"
#include "rtal/nn.hpp"

namespace rtal {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Per-parameter first/second moment buffers aligned with a ParamList.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static AdamState create(const ParamList& params, const AdamConfig& config = {});

  /// Moments as a checkpoint with names "m.<param>" / "v.<param>"; step is the
  /// optimizer step.
  Checkpoint save(const ParamList& params) const;
  void load(const ParamList& params, const Checkpoint& saved);
};

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient. Throws NumericalError naming the parameter when
/// a gradient is not finite. Returns the largest absolute update applied.
double adam_step(AdamState& state, const ParamList& params, double lr);

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_schedule(std::uint64_t step, std::size_t d_model, std::size_t warmup);

}  // namespace rtal
