// SPDX-License-Identifier: Apache-2.0
#include "ux2/objectives.hpp"

#include <cmath>

#include "ux2/error.hpp"

namespace ux2 {

namespace {

// Per-example NLL sum over supervised positions, averaged over the batch.
template <typename T>
Var<T> sequence_nll(Var<T> logits, const SeqTargets& t) {
  const TensorT<T>& lv = logits.value();
  if (lv.rank() != 3 || lv.dim(0) != t.n || lv.dim(1) != t.s)
    throw ShapeError("sequence targets [" + std::to_string(t.n) + "x" + std::to_string(t.s) +
                     "] do not match logits " + shape_str(lv.shape()));
  if (t.n < 1) throw ValueError("empty target batch");
  if (static_cast<int64_t>(t.targets.size()) != int64_t(t.n) * t.s ||
      (!t.ignore.empty() && t.ignore.size() != t.targets.size()))
    throw ShapeError("sequence target buffer size mismatch");
  for (int i = 0; i < t.n; ++i) {
    bool any = false;
    for (int j = 0; j < t.s && !any; ++j)
      any = t.ignore.empty() || !t.ignore[static_cast<size_t>(i) * t.s + j];
    if (!any) throw ValueError("empty target for example " + std::to_string(i));
  }
  Var<T> flat = reshape(logits, {int64_t(t.n) * t.s, lv.dim(2)});
  return scale(cross_entropy(flat, t.targets, t.ignore), T(1) / T(t.n));
}

}  // namespace

int64_t SeqTargets::supervised_count() const {
  if (ignore.empty()) return static_cast<int64_t>(targets.size());
  int64_t c = 0;
  for (uint8_t v : ignore)
    if (!v) ++c;
  return c;
}

template <typename T>
TaskLoss<T> make_task_loss(TaskKind kind, Var<T> loss, int64_t count) {
  if (count < 1) throw ValueError("task loss with empty contribution");
  double v = static_cast<double>(loss.value().item());
  if (!std::isfinite(v))
    throw NumericError(std::string("non-finite loss for task ") + task_name(kind));
  return TaskLoss<T>{kind, loss, count};
}

template <typename T>
Var<T> contrastive_loss(Var<T> left, Var<T> right, Var<T> log_tau) {
  const TensorT<T>& lv = left.value();
  const TensorT<T>& rv = right.value();
  if (lv.rank() != 2 || rv.rank() != 2 || !lv.same_shape(rv))
    throw ShapeError("contrastive_loss expects matching [Nxd] embeddings, got " +
                     shape_str(lv.shape()) + " and " + shape_str(rv.shape()));
  int64_t n = lv.dim(0), d = lv.dim(1);
  if (n < 1) throw ValueError("contrastive_loss on an empty batch");
  if (log_tau.value().size() != 1) throw ShapeError("log_tau must be a scalar");
  for (const TensorT<T>* m : {&lv, &rv}) {
    for (int64_t r = 0; r < n; ++r) {
      T s = T(0);
      for (int64_t j = 0; j < d; ++j) s += (*m)[r * d + j] * (*m)[r * d + j];
      if (std::abs(std::sqrt(static_cast<double>(s)) - 1.0) > 1e-3)
        throw ValueError("contrastive_loss: row " + std::to_string(r) +
                         " is not unit-normalized");
    }
  }
  Var<T> inv_tau = vexp(neg(log_tau));
  Var<T> logits = mul(matmul(left, transpose_last(right)), inv_tau);
  std::vector<int32_t> diag(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = static_cast<int32_t>(i);
  Var<T> ce_rows = cross_entropy(logits, diag);
  Var<T> ce_cols = cross_entropy(transpose_last(logits), diag);
  return scale(add(ce_rows, ce_cols), T(1) / T(n));
}

template <typename T>
Var<T> itm_loss(Var<T> scores, const std::vector<int32_t>& labels) {
  const TensorT<T>& sv = scores.value();
  if (sv.rank() != 1 || sv.dim(0) != static_cast<int64_t>(labels.size()))
    throw ShapeError("itm_loss expects [N] scores with N labels, got " + shape_str(sv.shape()) +
                     " and " + std::to_string(labels.size()));
  int64_t n = sv.dim(0);
  if (n < 1) throw ValueError("itm_loss on an empty batch");
  TensorT<T> y({n}), y_inv({n});
  for (int64_t i = 0; i < n; ++i) {
    int32_t l = labels[static_cast<size_t>(i)];
    if (l != 0 && l != 1)
      throw ValueError("itm label " + std::to_string(l) + " outside {0,1}");
    y[i] = T(l);
    y_inv[i] = T(1 - l);
  }
  constexpr T eps = sizeof(T) == 4 ? T(1e-7) : T(1e-12);
  Var<T> s = clamp(scores, eps, T(1) - eps);
  Tape<T>& tape = *scores.tape;
  Var<T> pos = mul(vlog(s), tape.leaf(std::move(y)));
  Var<T> neg_term = mul(vlog(affine(s, T(-1), T(1))), tape.leaf(std::move(y_inv)));
  return scale(sum_all(add(pos, neg_term)), T(-1) / T(n));
}

template <typename T>
Var<T> mlm_loss(Var<T> masked_logits, const std::vector<int32_t>& targets, int batch_size) {
  if (batch_size < 1) throw ValueError("mlm_loss with empty batch");
  const TensorT<T>& lv = masked_logits.value();
  if (lv.rank() != 2 || lv.dim(0) != static_cast<int64_t>(targets.size()))
    throw ShapeError("mlm_loss logits " + shape_str(lv.shape()) + " do not match " +
                     std::to_string(targets.size()) + " targets");
  if (targets.empty()) throw ValueError("mlm_loss: empty masked set (empty reduction)");
  return scale(cross_entropy(masked_logits, targets), T(1) / T(batch_size));
}

template <typename T>
Var<T> prefix_lm_loss(Var<T> suffix_logits, const SeqTargets& targets,
                      const std::vector<int>& prefix_len, const std::vector<int>& total_len,
                      bool image_present) {
  (void)image_present;  // the visual condition changes the pipeline, not the loss form
  if (prefix_len.size() != static_cast<size_t>(targets.n) || total_len.size() != prefix_len.size())
    throw ShapeError("prefix_lm_loss: per-example length vectors must match the batch");
  for (size_t i = 0; i < prefix_len.size(); ++i) {
    if (prefix_len[i] < 0 || prefix_len[i] >= total_len[i])
      throw ValueError("prefix split T_p=" + std::to_string(prefix_len[i]) + " leaves no suffix of T=" +
                       std::to_string(total_len[i]) + " (example " + std::to_string(i) + ")");
  }
  return sequence_nll(suffix_logits, targets);
}

template <typename T>
Var<T> mt_loss(Var<T> dec_logits, const SeqTargets& targets) {
  return sequence_nll(dec_logits, targets);
}

template <typename T>
Var<T> mmmt_loss(Var<T> dec_logits, const SeqTargets& targets, Var<T> masked_src_logits,
                 const std::vector<int32_t>& masked_src_targets, double lambda_mlm,
                 int batch_size) {
  Var<T> nll = sequence_nll(dec_logits, targets);
  if (masked_src_targets.empty() || lambda_mlm == 0.0) return nll;
  if (!masked_src_logits.valid())
    throw ShapeError("mmmt_loss: masked source targets without logits");
  Var<T> aux = mlm_loss(masked_src_logits, masked_src_targets, batch_size);
  return add(nll, scale(aux, T(lambda_mlm)));
}

#define UX2_INSTANTIATE_OBJECTIVES(T)                                                        \
  template TaskLoss<T> make_task_loss(TaskKind, Var<T>, int64_t);                            \
  template Var<T> contrastive_loss(Var<T>, Var<T>, Var<T>);                                  \
  template Var<T> itm_loss(Var<T>, const std::vector<int32_t>&);                             \
  template Var<T> mlm_loss(Var<T>, const std::vector<int32_t>&, int);                        \
  template Var<T> prefix_lm_loss(Var<T>, const SeqTargets&, const std::vector<int>&,         \
                                 const std::vector<int>&, bool);                             \
  template Var<T> mt_loss(Var<T>, const SeqTargets&);                                        \
  template Var<T> mmmt_loss(Var<T>, const SeqTargets&, Var<T>, const std::vector<int32_t>&,  \
                            double, int);

UX2_INSTANTIATE_OBJECTIVES(float)
UX2_INSTANTIATE_OBJECTIVES(double)

}  // namespace ux2
