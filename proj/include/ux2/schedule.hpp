// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace ux2 {

/// Linear warmup to base_lr, then cosine decay to floor_lr.
struct Schedule {
  double base_lr = 1e-4;
  double floor_lr = 1e-6;
  int64_t warmup_steps = 250;
  int64_t total_steps = 5000;

  void validate() const;
};

/// lr at a step: step/warmup * base during warmup (0 at step 0), then
/// floor + (base-floor)/2 * (1 + cos(pi * progress)). Steps past
/// total_steps clamp to floor_lr.
double lr_at(int64_t step, const Schedule& s);

}  // namespace ux2
