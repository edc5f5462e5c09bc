#pragma once

#include <string>
#include <vector>

#include "rtal/model.hpp"

namespace rtal {

struct GradientCheckResult {
  std::string name;
  double error = 0;
  double tolerance = 0;
  bool pass = false;
};

/// Two-layer double-precision RTAL model and sentence pairs used for the
/// end-to-end loss check.
ModelConfig gradient_model_config();
std::vector<Batch::Pair> gradient_model_pairs();

/// Finite-difference checks, in double precision with step 1e-5, through the
/// attention, normalization, feed-forward and aggregation blocks and one
/// complete encoder-decoder loss.
std::vector<GradientCheckResult> run_gradient_suite(double tolerance = 1e-5);

}  // namespace rtal
