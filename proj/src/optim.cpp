// SPDX-License-Identifier: Apache-2.0
#include "ux2/optim.hpp"

#include <cmath>

#include "ux2/error.hpp"

namespace ux2 {

template <typename T>
OptimState<T> init_optim(const ParamMap<T>& params) {
  OptimState<T> s;
  for (const auto& [name, p] : params) {
    s.m.emplace(name, TensorT<T>::zeros(p.shape()));
    s.v.emplace(name, TensorT<T>::zeros(p.shape()));
  }
  s.t = 0;
  return s;
}

template <typename T>
GradMap<T> merge_gradients(const std::vector<GradMap<T>>& maps) {
  if (maps.empty()) throw ValueError("merge_gradients over zero maps");
  GradMap<T> out;
  for (const auto& m : maps) {
    for (const auto& [name, g] : m) {
      auto it = out.find(name);
      if (it == out.end()) {
        out.emplace(name, TensorT<T>::zeros(g.shape()));
      } else if (!(it->second.same_shape(g))) {
        throw ValueError("merge_gradients: shape mismatch for " + name + ": " +
                         shape_str(it->second.shape()) + " vs " + shape_str(g.shape()));
      }
    }
  }
  for (const auto& m : maps) {
    for (const auto& [name, g] : m) {
      TensorT<T>& acc = out.at(name);
      const T* gp = g.data();
      T* ap = acc.data();
      for (int64_t i = 0; i < acc.size(); ++i) ap[i] += gp[i];
    }
  }
  T inv_k = T(1) / T(maps.size());
  for (auto& [name, g] : out)
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= inv_k;
  return out;
}

template <typename T>
double global_grad_norm(const GradMap<T>& grads) {
  double total = 0.0;
  for (const auto& [name, g] : grads) {
    const T* gp = g.data();
    for (int64_t i = 0; i < g.size(); ++i)
      total += static_cast<double>(gp[i]) * static_cast<double>(gp[i]);
  }
  return std::sqrt(total);
}

template <typename T>
void clip_grad_norm(GradMap<T>& grads, double max_norm) {
  double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  T s = T(max_norm / norm);
  for (auto& [name, g] : grads)
    for (int64_t i = 0; i < g.size(); ++i) g[i] *= s;
}

template <typename T>
void adamw_step(ParamMap<T>& params, const GradMap<T>& grads, OptimState<T>& state, double lr,
                const AdamWConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("adamw_step: gradient for unknown parameter " + name);
    if (!it->second.same_shape(g))
      throw ShapeError("adamw_step: gradient shape " + shape_str(g.shape()) +
                       " != parameter shape " + shape_str(it->second.shape()) + " for " + name);
    const T* gp = g.data();
    for (int64_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(gp[i])))
        throw NumericError("non-finite gradient for parameter " + name + " at element " +
                           std::to_string(i));
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& [name, g] : grads) {
    TensorT<T>& p = params.at(name);
    TensorT<T>& m = state.m.at(name);
    TensorT<T>& v = state.v.at(name);
    const T* gp = g.data();
    T* pp = p.data();
    T* mp = m.data();
    T* vp = v.data();
    for (int64_t i = 0; i < p.size(); ++i) {
      double gi = static_cast<double>(gp[i]);
      double mi = cfg.beta1 * static_cast<double>(mp[i]) + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * static_cast<double>(vp[i]) + (1.0 - cfg.beta2) * gi * gi;
      mp[i] = T(mi);
      vp[i] = T(vi);
      double m_hat = mi / bc1;
      double v_hat = vi / bc2;
      double upd = lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                         cfg.weight_decay * static_cast<double>(pp[i]));
      pp[i] = T(static_cast<double>(pp[i]) - upd);
    }
  }
}

#define UX2_INSTANTIATE_OPTIM(T)                                                   \
  template OptimState<T> init_optim(const ParamMap<T>&);                           \
  template GradMap<T> merge_gradients(const std::vector<GradMap<T>>&);             \
  template double global_grad_norm(const GradMap<T>&);                             \
  template void clip_grad_norm(GradMap<T>&, double);                               \
  template void adamw_step(ParamMap<T>&, const GradMap<T>&, OptimState<T>&, double, \
                           const AdamWConfig&);

UX2_INSTANTIATE_OPTIM(float)
UX2_INSTANTIATE_OPTIM(double)

}  // namespace ux2
