// SPDX-License-Identifier: Apache-2.0
#include "ux2/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

namespace ux2 {

namespace {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using MapC = Eigen::Map<const EMat<T>>;

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ValueError("operands belong to different tapes");
}

// Right-operand broadcast: scalar, or shape equal to a trailing suffix.
template <typename T>
bool trailing_broadcast(const TensorT<T>& a, const TensorT<T>& b) {
  if (b.size() == 1) return true;
  if (b.rank() > a.rank()) return false;
  int64_t off = a.rank() - b.rank();
  for (int64_t i = 0; i < b.rank(); ++i)
    if (a.shape()[static_cast<size_t>(off + i)] != b.shape()[static_cast<size_t>(i)]) return false;
  return true;
}

template <typename T>
void add_into(Tape<T>& t, int id, const TensorT<T>& src) {
  TensorT<T>& dst = t.grad_buffer(id);
  T* d = dst.data();
  const T* s = src.data();
  int64_t n = dst.size();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

// Sum `src` over its leading replication into the (smaller) grad of `id`.
template <typename T>
void add_into_reduced(Tape<T>& t, int id, const TensorT<T>& src, T sign = T(1)) {
  TensorT<T>& dst = t.grad_buffer(id);
  int64_t bn = dst.size();
  int64_t reps = src.size() / bn;
  T* d = dst.data();
  const T* s = src.data();
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < bn; ++i) d[i] += sign * s[r * bn + i];
}

struct MatDims {
  int64_t batch, m, k, n;
  bool shared_rhs;
};

template <typename T>
MatDims matmul_dims(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  bool shared = b.rank() == 2 && a.rank() > 2;
  if (!shared && a.rank() != b.rank())
    throw ShapeError("matmul rank mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int64_t batch = 1;
  for (int64_t i = 0; i + 2 < a.rank(); ++i) {
    batch *= a.shape()[static_cast<size_t>(i)];
    if (!shared && a.shape()[static_cast<size_t>(i)] != b.shape()[static_cast<size_t>(i)])
      throw ShapeError("matmul batch mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
  if (a.dim(-1) != b.dim(-2))
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return {batch, a.dim(-2), a.dim(-1), b.dim(-1), shared};
}

// [outer, n, inner] view of a tensor around `axis`.
template <typename T>
void axis_view(const TensorT<T>& t, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  if (axis < 0) axis += static_cast<int>(t.rank());
  if (axis < 0 || axis >= t.rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(t.shape()));
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= t.shape()[static_cast<size_t>(i)];
  n = t.shape()[static_cast<size_t>(axis)];
  for (int64_t i = axis + 1; i < t.rank(); ++i) inner *= t.shape()[static_cast<size_t>(i)];
}

template <typename T>
int64_t last_dim_checked(const TensorT<T>& t) {
  if (t.rank() < 1) throw ShapeError("operation requires rank >= 1, got scalar");
  return t.dim(-1);
}

template <typename T>
TensorT<T> permute_copy(const TensorT<T>& a, const std::vector<int>& axes) {
  int64_t r = a.rank();
  if (static_cast<int64_t>(axes.size()) != r)
    throw ShapeError("permute axes size " + std::to_string(axes.size()) + " != rank " +
                     std::to_string(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    int ax = axes[static_cast<size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<size_t>(ax)])
      throw ShapeError("invalid permutation for " + shape_str(a.shape()));
    seen[static_cast<size_t>(ax)] = true;
    out_shape[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(ax)];
  }
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * a.shape()[static_cast<size_t>(i + 1)];
  std::vector<int64_t> strides(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i)
    strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  TensorT<T> out(out_shape);
  const T* src = a.data();
  T* dst = out.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t n = out.size();
  int64_t src_off = 0;
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = src[src_off];
    for (int64_t d = r - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      src_off += strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src_off -= strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return out;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

// ---- Tape core ----

template <typename T>
Var<T> Tape<T>::leaf(TensorT<T> v) {
  return emplace(std::move(v), {}, nullptr);
}

template <typename T>
Var<T> Tape<T>::emplace(TensorT<T> value, std::vector<int> parents, BackFn backfn) {
  nodes_.push_back(Node{std::move(value), TensorT<T>(), std::move(parents), std::move(backfn)});
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
TensorT<T>& Tape<T>::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() == 0) n.grad = TensorT<T>::zeros(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ValueError("loss is not attached to this tape");
  if (loss.value().size() != 1)
    throw ValueError("backward requires a scalar loss, got shape " +
                     shape_str(loss.value().shape()));
  for (auto& n : nodes_) n.grad = TensorT<T>();
  grad_buffer(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() == 0 || !n.backfn) continue;
    n.backfn(*this, i);
  }
}

template <typename T>
TensorT<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.size() == 0) return TensorT<T>::zeros(n.value.shape());
  return n.grad;
}

template <typename T>
std::unordered_map<int, TensorT<T>> Tape<T>::grad_map() const {
  std::unordered_map<int, TensorT<T>> out;
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].grad.size() > 0) out.emplace(static_cast<int>(i), nodes_[i].grad);
  return out;
}

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const TensorT<T>& av = a.value();
  const TensorT<T>& bv = b.value();
  if (!trailing_broadcast(av, bv))
    throw ShapeError("add shape mismatch: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  const T* bp = bv.data();
  T* op = out.data();
  int64_t bn = bv.size();
  int64_t reps = av.size() / bn;
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < bn; ++i) op[r * bn + i] = ap[r * bn + i] + bp[i];
  int aid = a.id, bid = b.id;
  return a.tape->emplace(std::move(out), {aid, bid}, [aid, bid](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    add_into(t, aid, g);
    add_into_reduced(t, bid, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const TensorT<T>& av = a.value();
  const TensorT<T>& bv = b.value();
  if (!trailing_broadcast(av, bv))
    throw ShapeError("sub shape mismatch: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  const T* bp = bv.data();
  T* op = out.data();
  int64_t bn = bv.size();
  int64_t reps = av.size() / bn;
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < bn; ++i) op[r * bn + i] = ap[r * bn + i] - bp[i];
  int aid = a.id, bid = b.id;
  return a.tape->emplace(std::move(out), {aid, bid}, [aid, bid](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    add_into(t, aid, g);
    add_into_reduced(t, bid, g, T(-1));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const TensorT<T>& av = a.value();
  const TensorT<T>& bv = b.value();
  if (!trailing_broadcast(av, bv))
    throw ShapeError("mul shape mismatch: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  const T* bp = bv.data();
  T* op = out.data();
  int64_t bn = bv.size();
  int64_t reps = av.size() / bn;
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < bn; ++i) op[r * bn + i] = ap[r * bn + i] * bp[i];
  int aid = a.id, bid = b.id;
  return a.tape->emplace(std::move(out), {aid, bid}, [aid, bid](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    const TensorT<T>& avv = t.value_of(aid);
    const TensorT<T>& bvv = t.value_of(bid);
    int64_t bn2 = bvv.size();
    int64_t reps2 = avv.size() / bn2;
    {
      TensorT<T>& da = t.grad_buffer(aid);
      T* d = da.data();
      const T* gp = g.data();
      const T* bp2 = bvv.data();
      for (int64_t r = 0; r < reps2; ++r)
        for (int64_t i = 0; i < bn2; ++i) d[r * bn2 + i] += gp[r * bn2 + i] * bp2[i];
    }
    {
      TensorT<T>& db = t.grad_buffer(bid);
      T* d = db.data();
      const T* gp = g.data();
      const T* ap2 = avv.data();
      for (int64_t r = 0; r < reps2; ++r)
        for (int64_t i = 0; i < bn2; ++i) d[i] += gp[r * bn2 + i] * ap2[r * bn2 + i];
    }
  });
}

template <typename T>
Var<T> affine(Var<T> a, T alpha, T beta) {
  const TensorT<T>& av = a.value();
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  T* op = out.data();
  int64_t n = av.size();
  for (int64_t i = 0; i < n; ++i) op[i] = alpha * ap[i] + beta;
  int aid = a.id;
  return a.tape->emplace(std::move(out), {aid}, [aid, alpha](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    const T* gp = g.data();
    int64_t n2 = da.size();
    for (int64_t i = 0; i < n2; ++i) d[i] += alpha * gp[i];
  });
}

namespace {

template <typename T, typename FwdFn, typename BwdFn>
Var<T> unary_op(Var<T> a, FwdFn fwd, BwdFn dfdx_from_xy) {
  const TensorT<T>& av = a.value();
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  T* op = out.data();
  int64_t n = av.size();
  for (int64_t i = 0; i < n; ++i) op[i] = fwd(ap[i]);
  int aid = a.id;
  return a.tape->emplace(std::move(out), {aid}, [aid, dfdx_from_xy](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    const TensorT<T>& x = t.value_of(aid);
    const TensorT<T>& y = t.value_of(self);
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    const T* gp = g.data();
    const T* xp = x.data();
    const T* yp = y.data();
    int64_t n2 = da.size();
    for (int64_t i = 0; i < n2; ++i) d[i] += gp[i] * dfdx_from_xy(xp[i], yp[i]);
  });
}

}  // namespace

template <typename T>
Var<T> vexp(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> vlog(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  return unary_op(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2))); },
      [](T x, T) {
        T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
        T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary_op(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---- matmul ----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  const TensorT<T>& av = a.value();
  const TensorT<T>& bv = b.value();
  MatDims d = matmul_dims(av, bv);
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  out_shape.push_back(d.n);
  TensorT<T> out(out_shape);
  if (d.shared_rhs || av.rank() == 2) {
    MapC<T> A(av.data(), d.batch * d.m, d.k);
    MapC<T> B(bv.data(), d.k, d.n);
    MapM<T> C(out.data(), d.batch * d.m, d.n);
    C.noalias() = A * B;
  } else {
    for (int64_t i = 0; i < d.batch; ++i) {
      MapC<T> A(av.data() + i * d.m * d.k, d.m, d.k);
      MapC<T> B(bv.data() + i * d.k * d.n, d.k, d.n);
      MapM<T> C(out.data() + i * d.m * d.n, d.m, d.n);
      C.noalias() = A * B;
    }
  }
  int aid = a.id, bid = b.id;
  return a.tape->emplace(std::move(out), {aid, bid}, [aid, bid, d](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    const TensorT<T>& avv = t.value_of(aid);
    const TensorT<T>& bvv = t.value_of(bid);
    TensorT<T>& da = t.grad_buffer(aid);
    TensorT<T>& db = t.grad_buffer(bid);
    if (d.shared_rhs || avv.rank() == 2) {
      MapC<T> G(g.data(), d.batch * d.m, d.n);
      MapC<T> A(avv.data(), d.batch * d.m, d.k);
      MapC<T> B(bvv.data(), d.k, d.n);
      MapM<T> DA(da.data(), d.batch * d.m, d.k);
      MapM<T> DB(db.data(), d.k, d.n);
      DA.noalias() += G * B.transpose();
      DB.noalias() += A.transpose() * G;
    } else {
      for (int64_t i = 0; i < d.batch; ++i) {
        MapC<T> G(g.data() + i * d.m * d.n, d.m, d.n);
        MapC<T> A(avv.data() + i * d.m * d.k, d.m, d.k);
        MapC<T> B(bvv.data() + i * d.k * d.n, d.k, d.n);
        MapM<T> DA(da.data() + i * d.m * d.k, d.m, d.k);
        MapM<T> DB(db.data() + i * d.k * d.n, d.k, d.n);
        DA.noalias() += G * B.transpose();
        DB.noalias() += A.transpose() * G;
      }
    }
  });
}

// ---- layout ----

template <typename T>
Var<T> permute(Var<T> a, const std::vector<int>& axes) {
  TensorT<T> out = permute_copy(a.value(), axes);
  std::vector<int> inverse(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inverse[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  int aid = a.id;
  return a.tape->emplace(std::move(out), {aid}, [aid, inverse](Tape<T>& t, int self) {
    TensorT<T> gp = permute_copy(t.node_grad(self), inverse);
    add_into(t, aid, gp);
  });
}

template <typename T>
Var<T> transpose_last(Var<T> a) {
  int64_t r = a.value().rank();
  if (r < 2) throw ShapeError("transpose requires rank >= 2, got " + shape_str(a.value().shape()));
  std::vector<int> axes(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) axes[static_cast<size_t>(i)] = static_cast<int>(i);
  std::swap(axes[static_cast<size_t>(r - 2)], axes[static_cast<size_t>(r - 1)]);
  return permute(a, axes);
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  const TensorT<T>& av = a.value();
  if (shape_numel(shape) != av.size())
    throw ShapeError("reshape from " + shape_str(av.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  TensorT<T> out(shape, av.vec());
  int aid = a.id;
  return a.tape->emplace(std::move(out), {aid}, [aid](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    const T* gp = g.data();
    int64_t n = da.size();
    for (int64_t i = 0; i < n; ++i) d[i] += gp[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat of zero tensors");
  for (size_t i = 1; i < parts.size(); ++i) check_same_tape(parts[0], parts[i]);
  int64_t outer, n0, inner;
  axis_view(parts[0].value(), axis, outer, n0, inner);
  if (axis < 0) axis += static_cast<int>(parts[0].value().rank());
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.value().shape();
    if (p.value().rank() != parts[0].value().rank())
      throw ShapeError("concat rank mismatch: " + shape_str(s) + " vs " +
                       shape_str(parts[0].value().shape()));
    for (int64_t i = 0; i < p.value().rank(); ++i)
      if (i != axis && s[static_cast<size_t>(i)] != parts[0].value().shape()[static_cast<size_t>(i)])
        throw ShapeError("concat shape mismatch: " + shape_str(s) + " vs " +
                         shape_str(parts[0].value().shape()));
    total += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = parts[0].value().shape();
  out_shape[static_cast<size_t>(axis)] = total;
  TensorT<T> out(out_shape);
  T* op = out.data();
  std::vector<int> ids;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    sizes.push_back(p.value().shape()[static_cast<size_t>(axis)]);
  }
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const T* src = parts[pi].value().data();
      int64_t blk = sizes[pi] * inner;
      std::memcpy(op + (o * total + off) * inner, src + o * blk, static_cast<size_t>(blk) * sizeof(T));
      off += sizes[pi];
    }
  }
  return parts[0].tape->emplace(
      std::move(out), ids, [ids, sizes, outer, inner, total](Tape<T>& t, int self) {
        const TensorT<T>& g = t.node_grad(self);
        const T* gp = g.data();
        for (int64_t o = 0; o < outer; ++o) {
          int64_t off = 0;
          for (size_t pi = 0; pi < ids.size(); ++pi) {
            TensorT<T>& dp = t.grad_buffer(ids[pi]);
            T* d = dp.data();
            int64_t blk = sizes[pi] * inner;
            const T* src = gp + (o * total + off) * inner;
            for (int64_t i = 0; i < blk; ++i) d[o * blk + i] += src[i];
            off += sizes[pi];
          }
        }
      });
}

template <typename T>
Var<T> slice(Var<T> a, int axis, int64_t start, int64_t len) {
  const TensorT<T>& av = a.value();
  int64_t outer, n, inner;
  axis_view(av, axis, outer, n, inner);
  if (axis < 0) axis += static_cast<int>(av.rank());
  if (start < 0 || len < 0 || start + len > n)
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(av.shape()));
  Shape out_shape = av.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  TensorT<T> out(out_shape);
  const T* ap = av.data();
  T* op = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(op + o * len * inner, ap + (o * n + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  int aid = a.id;
  return a.tape->emplace(std::move(out), {aid},
                         [aid, outer, n, inner, start, len](Tape<T>& t, int self) {
                           const TensorT<T>& g = t.node_grad(self);
                           TensorT<T>& da = t.grad_buffer(aid);
                           T* d = da.data();
                           const T* gp = g.data();
                           for (int64_t o = 0; o < outer; ++o) {
                             T* drow = d + (o * n + start) * inner;
                             const T* grow = gp + o * len * inner;
                             for (int64_t i = 0; i < len * inner; ++i) drow[i] += grow[i];
                           }
                         });
}

template <typename T>
Var<T> masked_fill(Var<T> a, const TensorT<T>& keep, T fill) {
  const TensorT<T>& av = a.value();
  if (!av.same_shape(keep))
    throw ShapeError("masked_fill mask shape " + shape_str(keep.shape()) + " != value shape " +
                     shape_str(av.shape()));
  TensorT<T> out(av.shape());
  const T* ap = av.data();
  const T* kp = keep.data();
  T* op = out.data();
  int64_t n = av.size();
  for (int64_t i = 0; i < n; ++i) op[i] = kp[i] != T(0) ? ap[i] : fill;
  int aid = a.id;
  auto keep_copy = keep;
  return a.tape->emplace(std::move(out), {aid}, [aid, keep_copy](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    const T* gp = g.data();
    const T* kp2 = keep_copy.data();
    int64_t n2 = da.size();
    for (int64_t i = 0; i < n2; ++i)
      if (kp2[i] != T(0)) d[i] += gp[i];
  });
}

// ---- gathers ----

template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int32_t>& ids) {
  const TensorT<T>& tv = table.value();
  if (tv.rank() != 2)
    throw ShapeError("embedding table must be rank 2, got " + shape_str(tv.shape()));
  int64_t v = tv.dim(0), dm = tv.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw ValueError("token id " + std::to_string(id) + " out of vocabulary range [0," +
                       std::to_string(v) + ")");
  TensorT<T> out({static_cast<int64_t>(ids.size()), dm});
  const T* tp = tv.data();
  T* op = out.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(op + static_cast<int64_t>(i) * dm, tp + static_cast<int64_t>(ids[i]) * dm,
                static_cast<size_t>(dm) * sizeof(T));
  int tid = table.id;
  auto ids_copy = ids;
  return table.tape->emplace(std::move(out), {tid}, [tid, ids_copy, dm](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    TensorT<T>& dt = t.grad_buffer(tid);
    T* d = dt.data();
    const T* gp = g.data();
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      T* drow = d + static_cast<int64_t>(ids_copy[i]) * dm;
      const T* grow = gp + static_cast<int64_t>(i) * dm;
      for (int64_t j = 0; j < dm; ++j) drow[j] += grow[j];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, const std::vector<int64_t>& rows) {
  const TensorT<T>& av = a.value();
  if (av.rank() != 2) throw ShapeError("gather_rows requires rank 2, got " + shape_str(av.shape()));
  int64_t r = av.dim(0), c = av.dim(1);
  for (int64_t row : rows)
    if (row < 0 || row >= r)
      throw ShapeError("row " + std::to_string(row) + " out of range [0," + std::to_string(r) +
                       ")");
  TensorT<T> out({static_cast<int64_t>(rows.size()), c});
  const T* ap = av.data();
  T* op = out.data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(op + static_cast<int64_t>(i) * c, ap + rows[i] * c,
                static_cast<size_t>(c) * sizeof(T));
  int aid = a.id;
  auto rows_copy = rows;
  return a.tape->emplace(std::move(out), {aid}, [aid, rows_copy, c](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    const T* gp = g.data();
    for (size_t i = 0; i < rows_copy.size(); ++i) {
      T* drow = d + rows_copy[i] * c;
      const T* grow = gp + static_cast<int64_t>(i) * c;
      for (int64_t j = 0; j < c; ++j) drow[j] += grow[j];
    }
  });
}

// ---- normalization ----

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const TensorT<T>& xv = x.value();
  int64_t dm = last_dim_checked(xv);
  if (gamma.value().size() != dm || beta.value().size() != dm)
    throw ShapeError("layer_norm scale/shift must have " + std::to_string(dm) + " elements");
  int64_t rows = xv.size() / dm;
  TensorT<T> out(xv.shape());
  TensorT<T> xhat(xv.shape());
  TensorT<T> inv_std({rows});
  const T* xp = xv.data();
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  T* op = out.data();
  T* hp = xhat.data();
  T* sp = inv_std.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * dm;
    T mean = T(0);
    for (int64_t j = 0; j < dm; ++j) mean += row[j];
    mean /= T(dm);
    T var = T(0);
    for (int64_t j = 0; j < dm; ++j) {
      T dlt = row[j] - mean;
      var += dlt * dlt;
    }
    var /= T(dm);
    T istd = T(1) / std::sqrt(var + eps);
    sp[r] = istd;
    for (int64_t j = 0; j < dm; ++j) {
      T h = (row[j] - mean) * istd;
      hp[r * dm + j] = h;
      op[r * dm + j] = h * gp[j] + bp[j];
    }
  }
  int xid = x.id, gid = gamma.id, bid = beta.id;
  auto xhat_s = std::make_shared<TensorT<T>>(std::move(xhat));
  auto istd_s = std::make_shared<TensorT<T>>(std::move(inv_std));
  return x.tape->emplace(
      std::move(out), {xid, gid, bid}, [xid, gid, bid, xhat_s, istd_s, dm](Tape<T>& t, int self) {
        const TensorT<T>& g = t.node_grad(self);
        const T* gp2 = g.data();
        const T* hp2 = xhat_s->data();
        const T* sp2 = istd_s->data();
        const T* gam = t.value_of(gid).data();
        int64_t rows2 = g.size() / dm;
        TensorT<T>& dg = t.grad_buffer(gid);
        TensorT<T>& db = t.grad_buffer(bid);
        TensorT<T>& dx = t.grad_buffer(xid);
        for (int64_t r = 0; r < rows2; ++r) {
          const T* grow = gp2 + r * dm;
          const T* hrow = hp2 + r * dm;
          T* dxrow = dx.data() + r * dm;
          T sum_dh = T(0), sum_dh_h = T(0);
          for (int64_t j = 0; j < dm; ++j) {
            dg[j] += grow[j] * hrow[j];
            db[j] += grow[j];
            T dh = grow[j] * gam[j];
            sum_dh += dh;
            sum_dh_h += dh * hrow[j];
          }
          T inv_n = T(1) / T(dm);
          for (int64_t j = 0; j < dm; ++j) {
            T dh = grow[j] * gam[j];
            dxrow[j] += sp2[r] * (dh - inv_n * sum_dh - hrow[j] * inv_n * sum_dh_h);
          }
        }
      });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const TensorT<T>& xv = x.value();
  int64_t outer, n, inner;
  axis_view(xv, axis, outer, n, inner);
  TensorT<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* lane = xp + o * n * inner + in;
      T* olane = op + o * n * inner + in;
      T mx = lane[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, lane[i * inner]);
      if (!std::isfinite(static_cast<double>(mx)))
        throw NumericError("softmax over non-finite input");
      T sum = T(0);
      for (int64_t i = 0; i < n; ++i) {
        T e = std::exp(lane[i * inner] - mx);
        olane[i * inner] = e;
        sum += e;
      }
      if (!(sum > T(0)) || !std::isfinite(static_cast<double>(sum)))
        throw NumericError("softmax over non-finite input");
      T inv = T(1) / sum;
      for (int64_t i = 0; i < n; ++i) olane[i * inner] *= inv;
    }
  }
  int xid = x.id;
  return x.tape->emplace(std::move(out), {xid}, [xid, outer, n, inner](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    const TensorT<T>& y = t.value_of(self);
    TensorT<T>& dx = t.grad_buffer(xid);
    const T* gp = g.data();
    const T* yp = y.data();
    T* d = dx.data();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * n * inner + in;
        T dot = T(0);
        for (int64_t i = 0; i < n; ++i) dot += gp[base + i * inner] * yp[base + i * inner];
        for (int64_t i = 0; i < n; ++i)
          d[base + i * inner] += yp[base + i * inner] * (gp[base + i * inner] - dot);
      }
    }
  });
}

template <typename T>
Var<T> l2_normalize(Var<T> x) {
  const TensorT<T>& xv = x.value();
  int64_t dm = last_dim_checked(xv);
  int64_t rows = xv.size() / dm;
  TensorT<T> out(xv.shape());
  TensorT<T> inv_norm({rows});
  const T* xp = xv.data();
  T* op = out.data();
  T* np = inv_norm.data();
  for (int64_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (int64_t j = 0; j < dm; ++j) s += xp[r * dm + j] * xp[r * dm + j];
    T nrm = std::sqrt(s);
    if (nrm < std::numeric_limits<T>::min())
      throw ValueError("l2_normalize: degenerate zero-norm row " + std::to_string(r));
    np[r] = T(1) / nrm;
    for (int64_t j = 0; j < dm; ++j) op[r * dm + j] = xp[r * dm + j] * np[r];
  }
  int xid = x.id;
  auto inv_s = std::make_shared<TensorT<T>>(std::move(inv_norm));
  return x.tape->emplace(std::move(out), {xid}, [xid, inv_s, dm](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node_grad(self);
    const TensorT<T>& y = t.value_of(self);
    TensorT<T>& dx = t.grad_buffer(xid);
    const T* gp = g.data();
    const T* yp = y.data();
    const T* np2 = inv_s->data();
    T* d = dx.data();
    int64_t rows2 = g.size() / dm;
    for (int64_t r = 0; r < rows2; ++r) {
      T dot = T(0);
      for (int64_t j = 0; j < dm; ++j) dot += gp[r * dm + j] * yp[r * dm + j];
      for (int64_t j = 0; j < dm; ++j)
        d[r * dm + j] += np2[r] * (gp[r * dm + j] - yp[r * dm + j] * dot);
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int32_t>& targets,
                     const std::vector<uint8_t>& ignore) {
  const TensorT<T>& lv = logits.value();
  if (lv.rank() != 2)
    throw ShapeError("cross_entropy expects [rows x vocab] logits, got " + shape_str(lv.shape()));
  int64_t rows = lv.dim(0), v = lv.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  if (!ignore.empty() && static_cast<int64_t>(ignore.size()) != rows)
    throw ShapeError("cross_entropy: ignore mask size mismatch");
  int64_t active = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!ignore.empty() && ignore[static_cast<size_t>(r)]) continue;
    ++active;
    int32_t tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= v)
      throw ValueError("target id " + std::to_string(tgt) + " out of vocabulary range [0," +
                       std::to_string(v) + ")");
  }
  if (active == 0) throw ValueError("cross_entropy: all positions ignored (empty reduction)");
  const T* lp = lv.data();
  T total = T(0);
  for (int64_t r = 0; r < rows; ++r) {
    if (!ignore.empty() && ignore[static_cast<size_t>(r)]) continue;
    const T* row = lp + r * v;
    T mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[targets[static_cast<size_t>(r)]];
  }
  int lid = logits.id;
  auto tg = targets;
  auto ig = ignore;
  return logits.tape->emplace(
      TensorT<T>::scalar(total), {lid}, [lid, tg, ig, rows, v](Tape<T>& t, int self) {
        T gscale = t.node_grad(self)[0];
        const TensorT<T>& lvv = t.value_of(lid);
        TensorT<T>& dl = t.grad_buffer(lid);
        const T* lp2 = lvv.data();
        T* d = dl.data();
        for (int64_t r = 0; r < rows; ++r) {
          if (!ig.empty() && ig[static_cast<size_t>(r)]) continue;
          const T* row = lp2 + r * v;
          T* drow = d + r * v;
          T mx = row[0];
          for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
          T sum = T(0);
          for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
          T inv = T(1) / sum;
          for (int64_t j = 0; j < v; ++j) drow[j] += gscale * std::exp(row[j] - mx) * inv;
          drow[tg[static_cast<size_t>(r)]] -= gscale;
        }
      });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  const TensorT<T>& av = a.value();
  T s = T(0);
  const T* ap = av.data();
  int64_t n = av.size();
  for (int64_t i = 0; i < n; ++i) s += ap[i];
  int aid = a.id;
  return a.tape->emplace(TensorT<T>::scalar(s), {aid}, [aid](Tape<T>& t, int self) {
    T g = t.node_grad(self)[0];
    TensorT<T>& da = t.grad_buffer(aid);
    T* d = da.data();
    int64_t n2 = da.size();
    for (int64_t i = 0; i < n2; ++i) d[i] += g;
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  int64_t n = a.value().size();
  return scale(sum_all(a), T(1) / T(n));
}

// ---- explicit instantiations ----

template class Tape<float>;
template class Tape<double>;

#define UX2_INSTANTIATE_OPS(T)                                                               \
  template Var<T> add(Var<T>, Var<T>);                                                      \
  template Var<T> sub(Var<T>, Var<T>);                                                      \
  template Var<T> mul(Var<T>, Var<T>);                                                      \
  template Var<T> affine(Var<T>, T, T);                                                     \
  template Var<T> vexp(Var<T>);                                                             \
  template Var<T> vlog(Var<T>);                                                             \
  template Var<T> gelu(Var<T>);                                                             \
  template Var<T> sigmoid(Var<T>);                                                          \
  template Var<T> clamp(Var<T>, T, T);                                                      \
  template Var<T> matmul(Var<T>, Var<T>);                                                   \
  template Var<T> permute(Var<T>, const std::vector<int>&);                                 \
  template Var<T> transpose_last(Var<T>);                                                   \
  template Var<T> reshape(Var<T>, Shape);                                                   \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                  \
  template Var<T> slice(Var<T>, int, int64_t, int64_t);                                     \
  template Var<T> masked_fill(Var<T>, const TensorT<T>&, T);                                \
  template Var<T> embedding(Var<T>, const std::vector<int32_t>&);                           \
  template Var<T> gather_rows(Var<T>, const std::vector<int64_t>&);                         \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                    \
  template Var<T> softmax(Var<T>, int);                                                     \
  template Var<T> l2_normalize(Var<T>);                                                     \
  template Var<T> cross_entropy(Var<T>, const std::vector<int32_t>&,                        \
                                const std::vector<uint8_t>&);                               \
  template Var<T> sum_all(Var<T>);                                                          \
  template Var<T> mean_all(Var<T>);

UX2_INSTANTIATE_OPS(float)
UX2_INSTANTIATE_OPS(double)

}  // namespace ux2
