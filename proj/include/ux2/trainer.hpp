// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ux2/config.hpp"
#include "ux2/data.hpp"
#include "ux2/model.hpp"
#include "ux2/optim.hpp"
#include "ux2/tasks.hpp"

namespace ux2 {

/// k i.i.d. uniform draws from the active task set; a pure function of
/// (step, seed), so schedules replay exactly.
std::vector<TaskKind> sample_tasks(int64_t step, uint64_t seed,
                                   const std::vector<TaskKind>& active, int k);

/// Stream feeding each task: true = image-text D[VL], false = text-only
/// D[L]. MLM follows the configured stream.
bool uses_vl_stream(TaskKind k, bool mlm_on_vl);

struct TraceRow {
  int64_t step = 0;
  TaskKind task = TaskKind::CMCL;
  double loss = 0.0;
  double lr = 0.0;

  std::string csv() const;
};

/// Everything needed to continue a run bit-exactly: parameters, optimizer
/// moments, the step counter and the run seed (all randomness is derived
/// from (seed, step, ...), so no generator state is carried).
struct Checkpoint {
  ParamMap<float> params;
  OptimState<float> opt;
  int64_t step = 0;
  uint64_t seed = 0;
  std::string config_hash;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
  ParamMap<float> params;
  std::vector<TraceRow> trace;
  std::map<std::string, double> final_task_loss;  // mean over each task's last <=100 rows
  std::string final_checkpoint;
  int64_t steps_run = 0;
};

/// Joint multi-task training driven by a RunConfig. Per update: sample
/// merge_width tasks, compute each loss on its own tape (optionally on
/// worker threads; results are merged in a fixed order so threading never
/// changes the outcome), merge gradients, clip, apply one AdamW step.
/// Writes loss_trace.csv and periodic checkpoints under io.checkpoint_dir.
/// `resume_checkpoint` continues a saved run bit-exactly.
TrainResult train_run(const RunConfig& cfg, const std::string& resume_checkpoint = "");

}  // namespace ux2
