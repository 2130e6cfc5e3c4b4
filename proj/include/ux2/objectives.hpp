// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "ux2/tape.hpp"
#include "ux2/tasks.hpp"

namespace ux2 {

/// One task's scalar loss plus the number of contributing elements
/// (pairs, masked tokens or supervised target tokens) for logging.
template <typename T>
struct TaskLoss {
  TaskKind kind;
  Var<T> loss;
  int64_t count = 0;
};

/// Validates finiteness and count >= 1.
template <typename T>
TaskLoss<T> make_task_loss(TaskKind kind, Var<T> loss, int64_t count);

/// Symmetric in-batch InfoNCE over the NxN similarity matrix of two sets of
/// unit-norm embeddings, diagonal as positives, logits scaled by 1/tau with
/// tau = exp(log_tau). Used for both the cross-modal and the cross-lingual
/// variant. Rows more than 1e-3 away from unit norm are rejected.
template <typename T>
Var<T> contrastive_loss(Var<T> left, Var<T> right, Var<T> log_tau);

/// Mean binary cross-entropy over match scores in (0,1). Scores are clamped
/// a hair inside (0,1) so a saturated head cannot produce an infinite loss.
template <typename T>
Var<T> itm_loss(Var<T> scores, const std::vector<int32_t>& labels);

/// Masked-token reconstruction: sum of -log p at the masked positions,
/// averaged over the batch. `masked_logits` holds one row per masked
/// position, already gathered from the fused states.
template <typename T>
Var<T> mlm_loss(Var<T> masked_logits, const std::vector<int32_t>& targets, int batch_size);

/// Flattened [n x s] teacher-forcing targets; nonzero `ignore` skips a
/// position (padding).
struct SeqTargets {
  int n = 0;
  int s = 0;
  std::vector<int32_t> targets;
  std::vector<uint8_t> ignore;

  int64_t supervised_count() const;
};

/// Suffix NLL for prefix language modeling. `prefix_len[i]`/`total_len[i]`
/// are the per-example T_p and T; every example requires 0 <= T_p < T.
/// T_p = 0 supervises the whole text (captioning when an image is present).
template <typename T>
Var<T> prefix_lm_loss(Var<T> suffix_logits, const SeqTargets& targets,
                      const std::vector<int>& prefix_len, const std::vector<int>& total_len,
                      bool image_present);

/// Target NLL for translation without images or source masking.
template <typename T>
Var<T> mt_loss(Var<T> dec_logits, const SeqTargets& targets);

/// Translation NLL plus lambda * (MLM loss over the masked source
/// positions). Pass empty mlm logits when nothing was masked; with no mask
/// and lambda = 0 the computation is the same as mt_loss.
template <typename T>
Var<T> mmmt_loss(Var<T> dec_logits, const SeqTargets& targets, Var<T> masked_src_logits,
                 const std::vector<int32_t>& masked_src_targets, double lambda_mlm,
                 int batch_size);

}  // namespace ux2
