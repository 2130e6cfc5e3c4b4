// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "ux2/tensor.hpp"

namespace ux2 {

template <typename T>
class Tape;

/// Handle to a tensor living on a tape. A Var belongs to exactly one tape;
/// combining Vars from different tapes is rejected.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const TensorT<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of forward operations. Records are topologically
/// ordered by construction; backward() visits them exactly once in reverse.
/// A tape is single-threaded; independent tapes may run concurrently.
template <typename T>
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Insert an input node (parameter or data). Gradients accumulate here.
  Var<T> leaf(TensorT<T> v);

  /// Run reverse-mode sweep from a scalar loss. Gradients of every node
  /// reachable from the loss are populated; unreachable nodes read as zero
  /// through grad(). Deterministic: identical tape, identical gradients.
  void backward(Var<T> loss);

  /// Gradient of a node after backward(); zeros if the loss never reached it.
  TensorT<T> grad(Var<T> v) const;

  /// Gradient map keyed by node id, as populated by the last backward().
  std::unordered_map<int, TensorT<T>> grad_map() const;

  const TensorT<T>& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // --- op-builder machinery ---
  // A backward closure receives the tape and its own node id; it reads its
  // gradient with node_grad() and accumulates into parents via grad_buffer().
  using BackFn = std::function<void(Tape&, int)>;

  Var<T> emplace(TensorT<T> value, std::vector<int> parents, BackFn backfn);
  TensorT<T>& grad_buffer(int id);  // allocates zeros on first touch
  const TensorT<T>& node_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;  // empty until first contribution
    std::vector<int> parents;
    BackFn backfn;  // empty for leaves
  };
  std::vector<Node> nodes_;
};

template <typename T>
inline const TensorT<T>& Var<T>::value() const {
  return tape->value_of(id);
}

// ---- op builders ----
// All ops validate shapes eagerly and record a backward closure. Broadcast
// is restricted to trailing-dimension cases: the right operand is either a
// scalar or its shape equals a trailing suffix of the left operand's shape.

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> affine(Var<T> a, T alpha, T beta);  // alpha*a + beta

template <typename T> Var<T> neg(Var<T> a) { return affine(a, T(-1), T(0)); }
template <typename T> Var<T> scale(Var<T> a, T c) { return affine(a, c, T(0)); }

template <typename T> Var<T> vexp(Var<T> a);
template <typename T> Var<T> vlog(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

/// Matrix product over the last two axes. Accepts [m,k]x[k,n], batched
/// [..,m,k]x[..,k,n] with equal leading dims, or a rank-2 right operand
/// shared across the batch. Backward: dA = g.B^T, dB = A^T.g.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);

template <typename T> Var<T> permute(Var<T> a, const std::vector<int>& axes);
template <typename T> Var<T> transpose_last(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice(Var<T> a, int axis, int64_t start, int64_t len);

/// out[i] = keep[i] != 0 ? a[i] : fill. keep has a's shape exactly.
template <typename T> Var<T> masked_fill(Var<T> a, const TensorT<T>& keep, T fill);

/// Row gather from an embedding table: table [V,d], ids flat -> [len(ids),d].
template <typename T> Var<T> embedding(Var<T> table, const std::vector<int32_t>& ids);

/// Gather rows of a 2-D tensor.
template <typename T> Var<T> gather_rows(Var<T> a, const std::vector<int64_t>& rows);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

/// Numerically stable softmax along `axis` (max-subtraction).
template <typename T> Var<T> softmax(Var<T> x, int axis);

/// Normalize each row (last axis) to unit L2 norm. Zero rows are rejected.
template <typename T> Var<T> l2_normalize(Var<T> x);

/// Sum over rows of -log softmax(logits)[target]. logits [R,V]; `ignore`
/// is empty (nothing ignored) or R bytes, nonzero = skip the row. Returns
/// the sum; the caller owns any division.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int32_t>& targets,
                     const std::vector<uint8_t>& ignore = {});

template <typename T> Var<T> sum_all(Var<T> a);
template <typename T> Var<T> mean_all(Var<T> a);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace ux2
