// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>

#include "ux2/error.hpp"

namespace ux2 {

/// The eight pre-training objectives.
enum class TaskKind : int {
  CMCL = 0,  // cross-modal contrastive (text vs image)
  CLCL,      // cross-lingual contrastive (language i vs j)
  ITM,       // image-text matching
  MLM,       // masked language modeling
  PLM,       // prefix LM, text only
  VPLM,      // prefix LM with visual condition
  MT,        // machine translation
  MMMT,      // masked multimodal machine translation
};

constexpr int kNumTasks = 8;

constexpr std::array<TaskKind, kNumTasks> all_tasks() {
  return {TaskKind::CMCL, TaskKind::CLCL, TaskKind::ITM, TaskKind::MLM,
          TaskKind::PLM,  TaskKind::VPLM, TaskKind::MT,  TaskKind::MMMT};
}

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::CMCL: return "cmcl";
    case TaskKind::CLCL: return "clcl";
    case TaskKind::ITM: return "itm";
    case TaskKind::MLM: return "mlm";
    case TaskKind::PLM: return "plm";
    case TaskKind::VPLM: return "vplm";
    case TaskKind::MT: return "mt";
    case TaskKind::MMMT: return "mmmt";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& s) {
  for (TaskKind k : all_tasks())
    if (s == task_name(k)) return k;
  throw ConfigError("unknown task name: " + s);
}

}  // namespace ux2
