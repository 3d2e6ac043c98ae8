// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "dgc/tensor.hpp"

namespace dgc {

/// Three-stage gradual pruning: no pruning during the first twelfth of
/// training, a linear ramp to the target rate, and the target rate over the
/// final quarter.
struct PruneSchedule {
  std::size_t total_epochs = 1;
  double target = 0.0;

  double warmup_end() const { return static_cast<double>(total_epochs) / 12.0; }
  double finetune_start() const { return 3.0 * static_cast<double>(total_epochs) / 4.0; }

  void validate() const {
    require(total_epochs >= 1, "schedule needs at least one epoch");
    require(target >= 0.0 && target < 1.0, "target pruning rate must lie in [0, 1)");
  }
};

inline double prune_rate_at(std::size_t epoch, const PruneSchedule& s) {
  const double e = static_cast<double>(epoch);
  const double w = s.warmup_end();
  const double f = s.finetune_start();
  if (e < w) return 0.0;
  if (e >= f) return s.target;
  return s.target * (e - w) / (f - w);
}

}  // namespace dgc
