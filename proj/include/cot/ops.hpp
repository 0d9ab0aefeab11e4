#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "cot/parallel.hpp"
#include "cot/tensor.hpp"

namespace cot {

/// Guard added inside logs and norm denominators.
inline constexpr double kEps = 1e-8;

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Splits a shape around `axis` into [outer, len, inner].
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

// Last-axis row view used by the row-wise ops.
inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  if (s.empty()) return {1, 1};
  std::size_t cols = s.back();
  return {numel(s) / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// [n,k] x [k,m] -> [n,m]. Inner products accumulate in double.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul: inner extents " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(n * m);
  {
    const T* A = a.data().data();
    const T* B = b.data().data();
    parallel_for(0, n, 64, [&](std::size_t i) {
      std::vector<double> acc(m, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        if (av == 0.0) continue;
        const T* brow = B + p * m;
        for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
      }
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] = static_cast<T>(acc[j]);
    });
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::finish<T>(OpKind::kMatmul, BasicTensor<T>({n, m}, std::move(out)), {&a, &b},
                           [ai, bi, n, k, m](std::span<const T> g) {
                             if (ai->requires_grad) {
                               auto& ga = detail::grad_buffer(*ai);
                               const T* B = bi->data.data();
                               parallel_for(0, n, 64, [&](std::size_t i) {
                                 const T* grow = g.data() + i * m;
                                 for (std::size_t p = 0; p < k; ++p) {
                                   const T* brow = B + p * m;
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(grow[j]) * brow[j];
                                   ga[i * k + p] += static_cast<T>(s);
                                 }
                               });
                             }
                             if (bi->requires_grad) {
                               auto& gb = detail::grad_buffer(*bi);
                               const T* A = ai->data.data();
                               parallel_for(0, k, 8, [&](std::size_t p) {
                                 std::vector<double> acc(m, 0.0);
                                 for (std::size_t i = 0; i < n; ++i) {
                                   const double av = A[i * k + p];
                                   if (av == 0.0) continue;
                                   const T* grow = g.data() + i * m;
                                   for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<double>(grow[j]);
                                 }
                                 for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += static_cast<T>(acc[j]);
                               });
                             }
                           });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kTranspose, BasicTensor<T>({c, r}, std::move(out)), {&x},
                           [xi, r, c](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                           });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kReshape, BasicTensor<T>(std::move(shape), xi->data), {&x},
                           [xi](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

/// out.flat[i] = x.flat[index[i]]; index -1 yields 0 (zero padding). The
/// index table is shared with the pullback rather than copied.
template <class T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape shape) {
  const auto& idx = *index;
  if (numel(shape) != idx.size()) throw DimensionError("gather: index count does not match " + shape_str(shape));
  auto xd = x.data();
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t src = idx[i];
    if (src >= static_cast<std::int64_t>(xd.size())) throw DimensionError("gather: index out of range");
    out[i] = src < 0 ? T(0) : xd[static_cast<std::size_t>(src)];
  }
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kGather, BasicTensor<T>(std::move(shape), std::move(out)), {&x},
                           [xi, index](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             const auto& ix = *index;
                             for (std::size_t i = 0; i < ix.size(); ++i)
                               if (ix[i] >= 0) gx[static_cast<std::size_t>(ix[i])] += g[i];
                           });
}

template <class T>
BasicTensor<T> gather(const BasicTensor<T>& x, std::span<const std::int64_t> index, Shape shape) {
  return gather(x, std::make_shared<const std::vector<std::int64_t>>(index.begin(), index.end()), std::move(shape));
}

/// x[i, cols[i]] for a rank-2 x.
template <class T>
BasicTensor<T> pick(const BasicTensor<T>& x, std::span<const std::size_t> cols) {
  detail::require_rank(x.shape(), 2, "pick");
  if (cols.size() != x.dim(0)) throw DimensionError("pick: one column per row required");
  std::vector<std::int64_t> idx(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= x.dim(1)) throw DimensionError("pick: column out of range");
    idx[i] = static_cast<std::int64_t>(i * x.dim(1) + cols[i]);
  }
  return gather(x, std::span<const std::int64_t>(idx), Shape{cols.size()});
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Same-shape add, or a rank-1 `b` broadcast along the last axis of `a`.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool bias = b.rank() == 1 && a.rank() >= 1 && a.shape() != b.shape() && a.shape().back() == b.dim(0);
  if (!bias) detail::require_same(a.shape(), b.shape(), "add");
  const std::size_t width = bias ? b.size() : a.size();
  auto ad = a.data(), bd = b.data();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i % width];
  auto ai = a.impl(), bi = b.impl();
  return detail::finish<T>(OpKind::kAdd, BasicTensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [ai, bi, width](std::span<const T> g) {
                             if (ai->requires_grad) {
                               auto& ga = detail::grad_buffer(*ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             }
                             if (bi->requires_grad) {
                               std::vector<double> acc(width, 0.0);
                               for (std::size_t i = 0; i < g.size(); ++i) acc[i % width] += g[i];
                               auto& gb = detail::grad_buffer(*bi);
                               for (std::size_t j = 0; j < width; ++j) gb[j] += static_cast<T>(acc[j]);
                             }
                           });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  auto ad = a.data(), bd = b.data();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::finish<T>(OpKind::kSub, BasicTensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [ai, bi](std::span<const T> g) {
                             if (ai->requires_grad) {
                               auto& ga = detail::grad_buffer(*ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             }
                             if (bi->requires_grad) {
                               auto& gb = detail::grad_buffer(*bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                             }
                           });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  auto ad = a.data(), bd = b.data();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::finish<T>(OpKind::kMul, BasicTensor<T>(a.shape(), std::move(out)), {&a, &b},
                           [ai, bi](std::span<const T> g) {
                             if (ai->requires_grad) {
                               auto& ga = detail::grad_buffer(*ai);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
                             }
                             if (bi->requires_grad) {
                               auto& gb = detail::grad_buffer(*bi);
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
                             }
                           });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, double c) {
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(xd[i] * c);
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kScale, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi, c](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<T>(g[i] * c);
                           });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, double c) {
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(xd[i] + c);
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kAddScalar, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kRelu, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (xi->data[i] > T(0)) gx[i] += g[i];
                           });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::exp(static_cast<double>(xd[i])));
  auto xi = x.impl();
  BasicTensor<T> result(x.shape(), std::move(out));
  auto yi = result.impl();
  return detail::finish<T>(OpKind::kExp, std::move(result), {&x}, [xi, yi](std::span<const T> g) {
    auto& gx = detail::grad_buffer(*xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yi->data[i];
  });
}

/// log(max(x, 0) + eps).
template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(std::log(std::max(0.0, static_cast<double>(xd[i])) + kEps));
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kLog, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double v = xi->data[i];
                               if (v >= 0.0) gx[i] += static_cast<T>(g[i] / (v + kEps));
                             }
                           });
}

/// Multiplies by a constant mask (0 for dropped units, 1/(1-p) for kept ones).
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, std::span<const T> mask) {
  if (mask.size() != x.size()) throw DimensionError("dropout: mask size mismatch");
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  auto xi = x.impl();
  std::vector<T> m(mask.begin(), mask.end());
  return detail::finish<T>(OpKind::kDropout, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi, m = std::move(m)](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * m[i];
                           });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kSum, BasicTensor<T>::scalar(static_cast<T>(acc)), {&x},
                           [xi](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (auto& v : gx) v += g[0];
                           });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const double n = static_cast<double>(x.size());
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kMean, BasicTensor<T>::scalar(static_cast<T>(acc / n)), {&x},
                           [xi, n](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             const T share = static_cast<T>(g[0] / n);
                             for (auto& v : gx) v += share;
                           });
}

template <class T>
BasicTensor<T> sum_over_axis(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  auto xd = x.data();
  std::vector<T> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += xd[(o * s.len + l) * s.inner + in];
      out[o * s.inner + in] = static_cast<T>(acc);
    }
  Shape shape = detail::drop_axis(x.shape(), axis);
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kSumAxis, BasicTensor<T>(std::move(shape), std::move(out)), {&x},
                           [xi, s](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t o = 0; o < s.outer; ++o)
                               for (std::size_t l = 0; l < s.len; ++l)
                                 for (std::size_t in = 0; in < s.inner; ++in)
                                   gx[(o * s.len + l) * s.inner + in] += g[o * s.inner + in];
                           });
}

template <class T>
BasicTensor<T> mean_over_axis(const BasicTensor<T>& x, std::size_t axis) {
  const double len = static_cast<double>(detail::split_at(x.shape(), axis).len);
  auto summed = sum_over_axis(x, axis);
  return scale(summed, 1.0 / len);
}

/// Max along `axis`; the gradient goes to the first (lowest-index) maximizer.
template <class T>
BasicTensor<T> max_over_axis(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  auto xd = x.data();
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.len * s.inner + in;
      for (std::size_t l = 1; l < s.len; ++l) {
        const std::size_t idx = (o * s.len + l) * s.inner + in;
        if (xd[idx] > xd[best]) best = idx;
      }
      out[o * s.inner + in] = xd[best];
      arg[o * s.inner + in] = best;
    }
  Shape shape = detail::drop_axis(x.shape(), axis);
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kMaxAxis, BasicTensor<T>(std::move(shape), std::move(out)), {&x},
                           [xi, arg = std::move(arg)](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
                           });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.dim(d) != first[d]) throw DimensionError("concat: extent mismatch off the concat axis");
    out_shape[axis] += p.dim(axis);
  }
  const auto so = detail::split_at(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto sp = detail::split_at(p.shape(), axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t in = 0; in < sp.inner; ++in)
          out[(o * so.len + off + l) * so.inner + in] = pd[(o * sp.len + l) * sp.inner + in];
    off += sp.len;
  }
  Tape* tape = Tape::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  BasicTensor<T> result(out_shape, std::move(out));
  if (tape == nullptr || !any) return result;
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  auto o_impl = result.impl();
  o_impl->requires_grad = true;
  o_impl->tape_id = tape->record(OpKind::kConcat, [o_impl, impls, offsets, axis, so]() {
    if (o_impl->grad.empty()) return;
    const auto& g = o_impl->grad;
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (!impls[k]->requires_grad) continue;
      const auto sp = detail::split_at(impls[k]->shape, axis);
      auto& gp = detail::grad_buffer(*impls[k]);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
          for (std::size_t in = 0; in < sp.inner; ++in)
            gp[(o * sp.len + l) * sp.inner + in] += g[(o * so.len + offsets[k] + l) * so.inner + in];
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Row-wise (last axis) ops
// ---------------------------------------------------------------------------

/// Euclidean norm of each row; shape drops the last axis.
template <class T>
BasicTensor<T> l2_norm(const BasicTensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x.shape());
  auto xd = x.data();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(xd[r * cols + c]) * xd[r * cols + c];
    out[r] = static_cast<T>(std::sqrt(acc));
  }
  Shape shape(x.shape().begin(), x.shape().end() - (x.rank() ? 1 : 0));
  auto xi = x.impl();
  BasicTensor<T> result(shape, std::move(out));
  auto yi = result.impl();
  return detail::finish<T>(OpKind::kL2Norm, std::move(result), {&x}, [xi, yi, rows, cols](std::span<const T> g) {
    auto& gx = detail::grad_buffer(*xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double denom = static_cast<double>(yi->data[r]) + kEps;
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += static_cast<T>(g[r] * xi->data[r * cols + c] / denom);
    }
  });
}

/// x / (||x|| + eps) per row.
template <class T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x.shape());
  auto xd = x.data();
  std::vector<T> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(xd[r * cols + c]) * xd[r * cols + c];
    norms[r] = std::sqrt(acc);
    const double s = norms[r] + kEps;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<T>(xd[r * cols + c] / s);
  }
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kL2Normalize, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi, rows, cols, norms = std::move(norms)](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t r = 0; r < rows; ++r) {
                               const double n = norms[r], s = n + kEps;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < cols; ++c)
                                 dot += static_cast<double>(g[r * cols + c]) * xi->data[r * cols + c];
                               const double coef = n > 0.0 ? dot / (n * s * s) : 0.0;
                               for (std::size_t c = 0; c < cols; ++c) {
                                 const double xv = xi->data[r * cols + c];
                                 gx[r * cols + c] += static_cast<T>(g[r * cols + c] / s - xv * coef);
                               }
                             }
                           });
}

/// Cosine similarity between every row of a [n,d] and every row of b [m,d].
/// Rank-1 inputs are treated as single rows.
template <class T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto as_rows = [](const BasicTensor<T>& t) { return t.rank() == 1 ? reshape(t, Shape{1, t.dim(0)}) : t; };
  auto ra = as_rows(a), rb = as_rows(b);
  detail::require_rank(ra.shape(), 2, "cosine_similarity");
  detail::require_rank(rb.shape(), 2, "cosine_similarity");
  if (ra.dim(1) != rb.dim(1)) throw DimensionError("cosine_similarity: feature widths differ");
  return matmul(l2_normalize(ra), transpose(l2_normalize(rb)));
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x.shape());
  auto xd = x.data();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(xd[r * cols + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xd[r * cols + c] - mx);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<T>(std::exp(xd[r * cols + c] - mx) / z);
  }
  auto xi = x.impl();
  BasicTensor<T> result(x.shape(), std::move(out));
  auto yi = result.impl();
  return detail::finish<T>(OpKind::kSoftmax, std::move(result), {&x}, [xi, yi, rows, cols](std::span<const T> g) {
    auto& gx = detail::grad_buffer(*xi);
    const auto& y = yi->data;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += static_cast<T>(y[r * cols + c] * (g[r * cols + c] - dot));
    }
  });
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x.shape());
  auto xd = x.data();
  std::vector<T> out(x.size());
  std::vector<double> probs(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(xd[r * cols + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xd[r * cols + c] - mx);
    const double lz = std::log(z);
    for (std::size_t c = 0; c < cols; ++c) {
      const double shifted = static_cast<double>(xd[r * cols + c]) - mx;
      out[r * cols + c] = static_cast<T>(shifted - lz);
      probs[r * cols + c] = std::exp(shifted) / z;
    }
  }
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kLogSoftmax, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi, rows, cols, probs = std::move(probs)](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             for (std::size_t r = 0; r < rows; ++r) {
                               double gs = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                               for (std::size_t c = 0; c < cols; ++c)
                                 gx[r * cols + c] += static_cast<T>(g[r * cols + c] - probs[r * cols + c] * gs);
                             }
                           });
}

/// Per-row standardization (x - mean) / sqrt(var + eps). Uses only the row
/// itself, so training and evaluation compute the same function.
template <class T>
BasicTensor<T> feature_standardize(const BasicTensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x.shape());
  auto xd = x.data();
  std::vector<T> out(x.size());
  std::vector<double> xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xd[r * cols + c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = xd[r * cols + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (xd[r * cols + c] - mu) * inv_std[r];
      out[r * cols + c] = static_cast<T>(xhat[r * cols + c]);
    }
  }
  auto xi = x.impl();
  return detail::finish<T>(OpKind::kFeatureStandardize, BasicTensor<T>(x.shape(), std::move(out)), {&x},
                           [xi, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const T> g) {
                             auto& gx = detail::grad_buffer(*xi);
                             const double n = static_cast<double>(cols);
                             for (std::size_t r = 0; r < rows; ++r) {
                               double gm = 0.0, gxm = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) {
                                 gm += g[r * cols + c];
                                 gxm += g[r * cols + c] * xhat[r * cols + c];
                               }
                               gm /= n;
                               gxm /= n;
                               for (std::size_t c = 0; c < cols; ++c)
                                 gx[r * cols + c] += static_cast<T>(
                                     inv_std[r] * (g[r * cols + c] - gm - xhat[r * cols + c] * gxm));
                             }
                           });
}

/// Squared Euclidean distance between every row of a [n,d] and b [m,d].
template <class T>
BasicTensor<T> sq_dist(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 2, "sq_dist");
  detail::require_rank(b.shape(), 2, "sq_dist");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw DimensionError("sq_dist: feature widths differ");
  auto ad = a.data(), bd = b.data();
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(ad[i * d + c]) - bd[j * d + c];
        acc += diff * diff;
      }
      out[i * m + j] = static_cast<T>(acc);
    }
  auto ai = a.impl(), bi = b.impl();
  return detail::finish<T>(OpKind::kSqDist, BasicTensor<T>({n, m}, std::move(out)), {&a, &b},
                           [ai, bi, n, m, d](std::span<const T> g) {
                             std::vector<double> ga(ai->requires_grad ? n * d : 0, 0.0);
                             std::vector<double> gb(bi->requires_grad ? m * d : 0, 0.0);
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < m; ++j) {
                                 const double w = 2.0 * g[i * m + j];
                                 if (w == 0.0) continue;
                                 for (std::size_t c = 0; c < d; ++c) {
                                   const double diff = static_cast<double>(ai->data[i * d + c]) - bi->data[j * d + c];
                                   if (!ga.empty()) ga[i * d + c] += w * diff;
                                   if (!gb.empty()) gb[j * d + c] -= w * diff;
                                 }
                               }
                             if (!ga.empty()) {
                               auto& gx = detail::grad_buffer(*ai);
                               for (std::size_t i = 0; i < ga.size(); ++i) gx[i] += static_cast<T>(ga[i]);
                             }
                             if (!gb.empty()) {
                               auto& gx = detail::grad_buffer(*bi);
                               for (std::size_t i = 0; i < gb.size(); ++i) gx[i] += static_cast<T>(gb[i]);
                             }
                           });
}

}  // namespace cot
