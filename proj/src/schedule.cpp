// SPDX-License-Identifier: Apache-2.0
#include "ux2/schedule.hpp"

#include <cmath>

#include "ux2/error.hpp"

namespace ux2 {

void Schedule::validate() const {
  if (warmup_steps < 0 || total_steps <= 0) throw ConfigError("schedule steps must be positive");
  if (warmup_steps >= total_steps)
    throw ConfigError("warmup_steps must be smaller than total_steps");
  if (floor_lr >= base_lr) throw ConfigError("floor_lr must be smaller than base_lr");
  if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
}

double lr_at(int64_t step, const Schedule& s) {
  s.validate();
  if (step < 0) throw ConfigError("negative schedule step");
  if (step > s.total_steps) return s.floor_lr;
  if (step <= s.warmup_steps)
    return s.warmup_steps == 0 ? s.base_lr
                               : s.base_lr * static_cast<double>(step) /
                                     static_cast<double>(s.warmup_steps);
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(s.total_steps - s.warmup_steps);
  return s.floor_lr +
         0.5 * (s.base_lr - s.floor_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace ux2
