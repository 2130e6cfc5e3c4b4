// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "ux2/model.hpp"
#include "ux2/tensor.hpp"

namespace ux2 {

template <typename T>
using GradMap = std::map<std::string, TensorT<T>>;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <typename T>
struct OptimState {
  GradMap<T> m;  // first moments
  GradMap<T> v;  // second moments
  int64_t t = 0;
};

template <typename T>
OptimState<T> init_optim(const ParamMap<T>& params);

/// Elementwise mean across the maps; a parameter absent from one map
/// contributes zeros there (the divisor stays k). Maps are summed in the
/// order given, so callers fix the order (the trainer sorts by task id).
template <typename T>
GradMap<T> merge_gradients(const std::vector<GradMap<T>>& maps);

template <typename T>
double global_grad_norm(const GradMap<T>& grads);

/// Scale gradients so the global L2 norm is at most max_norm.
template <typename T>
void clip_grad_norm(GradMap<T>& grads, double max_norm);

/// Bias-corrected Adam update plus decoupled weight decay
/// (w -= lr * (m_hat/(sqrt(v_hat)+eps) + wd * w), both terms off the
/// pre-update w). Parameters without a gradient entry are left untouched.
/// Non-finite gradients abort before any parameter is written.
template <typename T>
void adamw_step(ParamMap<T>& params, const GradMap<T>& grads, OptimState<T>& state, double lr,
                const AdamWConfig& cfg = {});

}  // namespace ux2
