#pragma once

// Differentiable primitives recorded on a Tape. Layouts: images and feature
// maps are [B x C x H x W]; token matrices are [rows x features].

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fdm/core/gemm.hpp"
#include "fdm/core/tape.hpp"
#include "fdm/core/tensor.hpp"

namespace fdm {

namespace detail {

template <class T>
bool any_needs_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (tape.needs_grad(v)) return true;
  return false;
}

struct ConvGeom {
  std::size_t batch, channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return batch * out_h * out_w; }
};

inline ConvGeom conv_geometry(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                              std::size_t stride, std::size_t pad) {
  if (k != 1 && k != 3 && k != 4) throw ConfigError("conv2d: kernel size " + std::to_string(k) + " not in {1,3,4}");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const auto span_h = static_cast<long>(h + 2 * pad) - static_cast<long>(k);
  const auto span_w = static_cast<long>(w + 2 * pad) - static_cast<long>(k);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 || span_w % static_cast<long>(stride) != 0)
    throw ConfigError("conv2d: output extent not integral for input " + std::to_string(h) + "x" + std::to_string(w) +
                      ", k=" + std::to_string(k) + ", stride=" + std::to_string(stride) + ", pad=" +
                      std::to_string(pad));
  return {b, c, h, w, k, stride, pad, static_cast<std::size_t>(span_h) / stride + 1,
          static_cast<std::size_t>(span_w) / stride + 1};
}

// x [B x C x H x W] -> cols [(C*k*k) x (B*Ho*Wo)]
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t ncols = g.col_cols();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* xp = x + (b * g.channels + c) * g.height * g.width;
          T* rp = row + b * plane;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            T* dst = rp + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<long>(g.height)) {
              std::fill(dst, dst + g.out_w, T{0});
              continue;
            }
            const T* src = xp + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T{0} : src[ix];
            }
          }
        }
      }
}

// Adjoint of im2col: scatter-adds cols into x.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t ncols = g.col_cols();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* xp = x + (b * g.channels + c) * g.height * g.width;
          const T* rp = row + b * plane;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            T* dst = xp + static_cast<std::size_t>(iy) * g.width;
            const T* src = rp + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
            }
          }
        }
      }
}

// [B x C x P] <-> [C x (B*P)]
template <class T>
void batch_to_channel_major(const T* x, std::size_t b, std::size_t c, std::size_t p, T* out) {
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(x + (bi * c + ci) * p, p, out + ci * b * p + bi * p);
}
template <class T>
void channel_major_to_batch(const T* x, std::size_t b, std::size_t c, std::size_t p, T* out) {
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(x + ci * b * p + bi * p, p, out + (bi * c + ci) * p);
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense algebra

template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::gemm<T>(false, false, m, n, k, A.ptr(), B.ptr(), out.ptr(), false);
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b, m, n, k](Tape<T>& t, Var self) {
    const T* g = t.grad(self).data();
    if (t.needs_grad(a)) detail::gemm<T>(false, true, m, k, n, g, t.value(b).ptr(), t.grad(a).data(), true);
    if (t.needs_grad(b)) detail::gemm<T>(true, false, k, n, m, t.value(a).ptr(), g, t.grad(b).data(), true);
  });
}

// x [M x K] * w [K x N] + bias [N]
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var bias) {
  const auto& B = tape.value(bias);
  const auto& W = tape.value(w);
  if (W.rank() != 2 || B.size() != W.dim(1))
    throw ShapeError("linear: bias " + shape_str(B.shape()) + " does not match weight " + shape_str(W.shape()));
  Var y = matmul(tape, x, w);
  const std::size_t n = W.dim(1);
  Tensor<T> out = tape.value(y).detached();
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += B[j];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {y, bias}), [y, bias, rows, n](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    if (t.needs_grad(y)) detail::accumulate<T>(t.grad(y), g);
    if (t.needs_grad(bias)) {
      auto gb = t.grad(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.shape(a), tape.shape(b), "add");
  Tensor<T> out = tape.value(a).detached();
  const auto& B = tape.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) detail::accumulate<T>(t.grad(a), g);
    if (t.needs_grad(b)) detail::accumulate<T>(t.grad(b), g);
  });
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.shape(a), tape.shape(b), "sub");
  Tensor<T> out = tape.value(a).detached();
  const auto& B = tape.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) detail::accumulate<T>(t.grad(a), g);
    if (t.needs_grad(b)) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.shape(a), tape.shape(b), "mul");
  Tensor<T> out = tape.value(a).detached();
  const auto& B = tape.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const auto& A = t.value(a);
    const auto& Bv = t.value(b);
    if (t.needs_grad(a)) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> out = tape.value(a).detached();
  for (auto& v : out.data()) v *= factor;
  return tape.record(std::move(out), tape.needs_grad(a), [a, factor](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

namespace detail {
template <class T, class F, class DF>
Var unary(Tape<T>& tape, Var a, F f, DF df) {
  Tensor<T> out = tape.value(a).detached();
  for (auto& v : out.data()) v = f(v);
  return tape.record(std::move(out), tape.needs_grad(a), [a, df](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const auto& x = t.value(a);
    const auto& y = t.value(self);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}
}  // namespace detail

template <class T>
Var relu(Tape<T>& tape, Var a) {
  return detail::unary(
      tape, a, [](T v) { return v > T{0} ? v : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <class T>
Var leaky_relu(Tape<T>& tape, Var a, T slope) {
  return detail::unary(
      tape, a, [slope](T v) { return v > T{0} ? v : slope * v; },
      [slope](T x, T) { return x > T{0} ? T{1} : slope; });
}

// log(1 + exp(x)), stable for large |x|.
template <class T>
Var softplus(Tape<T>& tape, Var a) {
  return detail::unary(
      tape, a, [](T v) { return std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v))); },
      [](T x, T) { return T{1} / (T{1} + std::exp(-x)); });
}

template <class T>
Var sum(Tape<T>& tape, Var a) {
  const auto& A = tape.value(a);
  T s{0};
  for (T v : A.data()) s += v;
  return tape.record(Tensor<T>::scalar(s), tape.needs_grad(a), [a](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(a)) v += g;
  });
}

template <class T>
Var mean(Tape<T>& tape, Var a) {
  const auto n = static_cast<T>(tape.value(a).size());
  return scale(tape, sum(tape, a), T{1} / n);
}

// sum(weight * |a - b|) / denom. An empty weight tensor means all ones;
// denom <= 0 means the element count.
template <class T>
Var mean_abs_diff(Tape<T>& tape, Var a, Var b, const Tensor<T>& weight = {}, T denom = T{0}) {
  require_shape(tape.shape(a), tape.shape(b), "mean_abs_diff");
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  if (!weight.empty()) require_shape(weight.shape(), A.shape(), "mean_abs_diff weight");
  const T d = denom > T{0} ? denom : static_cast<T>(A.size());
  T s{0};
  for (std::size_t i = 0; i < A.size(); ++i) s += (weight.empty() ? T{1} : weight[i]) * std::abs(A[i] - B[i]);
  return tape.record(Tensor<T>::scalar(s / d), detail::any_needs_grad(tape, {a, b}),
                     [a, b, weight, d](Tape<T>& t, Var self) {
                       const T g = t.grad(self)[0] / d;
                       const auto& A = t.value(a);
                       const auto& B = t.value(b);
                       const bool ga_on = t.needs_grad(a), gb_on = t.needs_grad(b);
                       auto ga = ga_on ? t.grad(a) : std::span<T>{};
                       auto gb = gb_on ? t.grad(b) : std::span<T>{};
                       for (std::size_t i = 0; i < A.size(); ++i) {
                         const T diff = A[i] - B[i];
                         const T sgn = diff > T{0} ? T{1} : (diff < T{0} ? T{-1} : T{0});
                         const T v = g * sgn * (weight.empty() ? T{1} : weight[i]);
                         if (ga_on) ga[i] += v;
                         if (gb_on) gb[i] -= v;
                       }
                     });
}

// mean((a - b)^2)
template <class T>
Var mean_sq_diff(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.shape(a), tape.shape(b), "mean_sq_diff");
  const auto& A = tape.value(a);
  const auto& B = tape.value(b);
  const auto n = static_cast<T>(A.size());
  T s{0};
  for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  return tape.record(Tensor<T>::scalar(s / n), detail::any_needs_grad(tape, {a, b}), [a, b, n](Tape<T>& t, Var self) {
    const T g = T{2} * t.grad(self)[0] / n;
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.needs_grad(a)) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < A.size(); ++i) ga[i] += g * (A[i] - B[i]);
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < A.size(); ++i) gb[i] -= g * (A[i] - B[i]);
    }
  });
}

// Detached copy.
template <class T>
Var stop_gradient(Tape<T>& tape, Var a) {
  return tape.constant(tape.value(a).detached());
}

// Forward value is `replacement`; backward routes the gradient to `a` unchanged.
template <class T>
Var straight_through(Tape<T>& tape, Var a, Tensor<T> replacement) {
  require_shape(tape.shape(a), replacement.shape(), "straight_through");
  return tape.record(std::move(replacement), tape.needs_grad(a),
                     [a](Tape<T>& t, Var self) { detail::accumulate<T>(t.grad(a), t.grad(self)); });
}

// Rows of `table` [N x C] selected by `indices` -> [M x C].
template <class T>
Var gather_rows(Tape<T>& tape, Var table, const std::vector<int>& indices) {
  const auto& E = tape.value(table);
  if (E.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(E.shape()));
  const std::size_t n = E.dim(0), c = E.dim(1);
  Tensor<T> out(Shape{indices.size(), c});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || static_cast<std::size_t>(indices[r]) >= n)
      throw ContractError("gather_rows: index " + std::to_string(indices[r]) + " out of range");
    std::copy_n(E.ptr() + static_cast<std::size_t>(indices[r]) * c, c, out.ptr() + r * c);
  }
  return tape.record(std::move(out), tape.needs_grad(table), [table, indices, c](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto ge = t.grad(table);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) ge[static_cast<std::size_t>(indices[r]) * c + j] += g[r * c + j];
  });
}

// ---------------------------------------------------------------------------
// Masking and layout

// a * (1 - m) + b * m, with m [B x 1 x H x W] broadcast over channels.
template <class T>
Var blend(Tape<T>& tape, Var a, Var b, const Tensor<T>& mask) {
  require_shape(tape.shape(a), tape.shape(b), "blend");
  const auto& A = tape.value(a);
  const auto& Bv = tape.value(b);
  if (A.rank() != 4 || mask.rank() != 4 || mask.dim(0) != A.dim(0) || mask.dim(1) != 1 || mask.dim(2) != A.dim(2) ||
      mask.dim(3) != A.dim(3))
    throw ShapeError("blend: mask " + shape_str(mask.shape()) + " incompatible with " + shape_str(A.shape()));
  const std::size_t nb = A.dim(0), c = A.dim(1), p = A.dim(2) * A.dim(3);
  Tensor<T> out(A.shape());
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t idx = (bi * c + ci) * p + i;
        const T m = mask[bi * p + i];
        out[idx] = A[idx] * (T{1} - m) + Bv[idx] * m;
      }
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b, mask, nb, c, p](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const bool ga_on = t.needs_grad(a), gb_on = t.needs_grad(b);
    auto ga = ga_on ? t.grad(a) : std::span<T>{};
    auto gb = gb_on ? t.grad(b) : std::span<T>{};
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < p; ++i) {
          const std::size_t idx = (bi * c + ci) * p + i;
          const T m = mask[bi * p + i];
          if (ga_on) ga[idx] += g[idx] * (T{1} - m);
          if (gb_on) gb[idx] += g[idx] * m;
        }
  });
}

// a * m, with m [B x 1 x H x W] broadcast over channels.
template <class T>
Var mask_mul(Tape<T>& tape, Var a, const Tensor<T>& mask) {
  const auto& A = tape.value(a);
  if (A.rank() != 4 || mask.rank() != 4 || mask.dim(0) != A.dim(0) || mask.dim(1) != 1 || mask.dim(2) != A.dim(2) ||
      mask.dim(3) != A.dim(3))
    throw ShapeError("mask_mul: mask " + shape_str(mask.shape()) + " incompatible with " + shape_str(A.shape()));
  const std::size_t nb = A.dim(0), c = A.dim(1), p = A.dim(2) * A.dim(3);
  Tensor<T> out(A.shape());
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < p; ++i) out[(bi * c + ci) * p + i] = A[(bi * c + ci) * p + i] * mask[bi * p + i];
  return tape.record(std::move(out), tape.needs_grad(a), [a, mask, nb, c, p](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < p; ++i) ga[(bi * c + ci) * p + i] += g[(bi * c + ci) * p + i] * mask[bi * p + i];
  });
}

// [B x C1 x H x W] ++ [B x C2 x H x W] -> [B x (C1+C2) x H x W]
template <class T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const auto& A = tape.value(a);
  const auto& Bv = tape.value(b);
  if (A.rank() != 4 || Bv.rank() != 4 || A.dim(0) != Bv.dim(0) || A.dim(2) != Bv.dim(2) || A.dim(3) != Bv.dim(3))
    throw ShapeError("concat_channels: " + shape_str(A.shape()) + " vs " + shape_str(Bv.shape()));
  const std::size_t nb = A.dim(0), ca = A.dim(1), cb = Bv.dim(1), p = A.dim(2) * A.dim(3);
  Tensor<T> out(Shape{nb, ca + cb, A.dim(2), A.dim(3)});
  for (std::size_t bi = 0; bi < nb; ++bi) {
    std::copy_n(A.ptr() + bi * ca * p, ca * p, out.ptr() + bi * (ca + cb) * p);
    std::copy_n(Bv.ptr() + bi * cb * p, cb * p, out.ptr() + bi * (ca + cb) * p + ca * p);
  }
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, b}), [a, b, nb, ca, cb, p](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      if (t.needs_grad(a)) {
        auto ga = t.grad(a);
        for (std::size_t i = 0; i < ca * p; ++i) ga[bi * ca * p + i] += g[bi * (ca + cb) * p + i];
      }
      if (t.needs_grad(b)) {
        auto gb = t.grad(b);
        for (std::size_t i = 0; i < cb * p; ++i) gb[bi * cb * p + i] += g[bi * (ca + cb) * p + ca * p + i];
      }
    }
  });
}

// rows [(B*H*W) x C] -> [B x C x H x W]
template <class T>
Var rows_to_nchw(Tape<T>& tape, Var rows, std::size_t batch, std::size_t h, std::size_t w) {
  const auto& R = tape.value(rows);
  if (R.rank() != 2 || R.dim(0) != batch * h * w)
    throw ShapeError("rows_to_nchw: " + shape_str(R.shape()) + " does not hold " + std::to_string(batch * h * w) +
                     " rows");
  const std::size_t c = R.dim(1), p = h * w;
  Tensor<T> out(Shape{batch, c, h, w});
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t ci = 0; ci < c; ++ci) out[(bi * c + ci) * p + i] = R[(bi * p + i) * c + ci];
  return tape.record(std::move(out), tape.needs_grad(rows), [rows, batch, c, p](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto gr = t.grad(rows);
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t ci = 0; ci < c; ++ci) gr[(bi * p + i) * c + ci] += g[(bi * c + ci) * p + i];
  });
}

// [B x C x H x W] -> rows [(B*H*W) x C]
template <class T>
Var nchw_to_rows(Tape<T>& tape, Var x) {
  const auto& X = tape.value(x);
  if (X.rank() != 4) throw ShapeError("nchw_to_rows: expected rank 4, got " + shape_str(X.shape()));
  const std::size_t batch = X.dim(0), c = X.dim(1), p = X.dim(2) * X.dim(3);
  Tensor<T> out(Shape{batch * p, c});
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < p; ++i) out[(bi * p + i) * c + ci] = X[(bi * c + ci) * p + i];
  return tape.record(std::move(out), tape.needs_grad(x), [x, batch, c, p](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto gx = t.grad(x);
    for (std::size_t bi = 0; bi < batch; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < p; ++i) gx[(bi * c + ci) * p + i] += g[(bi * p + i) * c + ci];
  });
}

// Row i is a[i] when keep[i] != 0, otherwise the shared row `fill` [D].
template <class T>
Var select_rows(Tape<T>& tape, Var a, Var fill, const std::vector<std::uint8_t>& keep) {
  const auto& A = tape.value(a);
  const auto& F = tape.value(fill);
  if (A.rank() != 2 || F.size() != A.dim(1) || keep.size() != A.dim(0))
    throw ShapeError("select_rows: " + shape_str(A.shape()) + " with fill " + shape_str(F.shape()));
  const std::size_t rows = A.dim(0), d = A.dim(1);
  Tensor<T> out(A.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = keep[r] ? A[r * d + j] : F[j];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {a, fill}), [a, fill, keep, rows, d](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const bool ga_on = t.needs_grad(a), gf_on = t.needs_grad(fill);
    auto ga = ga_on ? t.grad(a) : std::span<T>{};
    auto gf = gf_on ? t.grad(fill) : std::span<T>{};
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        if (keep[r] && ga_on) ga[r * d + j] += g[r * d + j];
        if (!keep[r] && gf_on) gf[j] += g[r * d + j];
      }
  });
}

// x [(B*T) x D] + p [T x D] broadcast over the batch.
template <class T>
Var add_rows_broadcast(Tape<T>& tape, Var x, Var p) {
  const auto& X = tape.value(x);
  const auto& P = tape.value(p);
  if (X.rank() != 2 || P.rank() != 2 || X.dim(1) != P.dim(1) || X.dim(0) % P.dim(0) != 0)
    throw ShapeError("add_rows_broadcast: " + shape_str(X.shape()) + " + " + shape_str(P.shape()));
  const std::size_t block = P.size();
  Tensor<T> out = X.detached();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += P[i % block];
  return tape.record(std::move(out), detail::any_needs_grad(tape, {x, p}), [x, p, block](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    if (t.needs_grad(x)) detail::accumulate<T>(t.grad(x), g);
    if (t.needs_grad(p)) {
      auto gp = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i % block] += g[i];
    }
  });
}

// Forward differences along height (axis 0) or width (axis 1).
template <class T>
Var spatial_diff(Tape<T>& tape, Var x, int axis) {
  const auto& X = tape.value(x);
  if (X.rank() != 4) throw ShapeError("spatial_diff: expected rank 4, got " + shape_str(X.shape()));
  const std::size_t planes = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t oh = axis == 0 ? h - 1 : h, ow = axis == 0 ? w : w - 1;
  const std::size_t step = axis == 0 ? w : 1;
  Tensor<T> out(Shape{X.dim(0), X.dim(1), oh, ow});
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t src = pl * h * w + i * w + j;
        out[(pl * oh + i) * ow + j] = X[src + step] - X[src];
      }
  return tape.record(std::move(out), tape.needs_grad(x), [x, planes, h, w, oh, ow, step](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto gx = t.grad(x);
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t src = pl * h * w + i * w + j;
          const T v = g[(pl * oh + i) * ow + j];
          gx[src + step] += v;
          gx[src] -= v;
        }
  });
}

// Channel Gram matrix per sample, normalized by channels * positions: [B x C x C].
template <class T>
Var gram(Tape<T>& tape, Var x) {
  const auto& X = tape.value(x);
  if (X.rank() != 4) throw ShapeError("gram: expected rank 4, got " + shape_str(X.shape()));
  const std::size_t nb = X.dim(0), c = X.dim(1), p = X.dim(2) * X.dim(3);
  const T norm = T{1} / static_cast<T>(c * p);
  Tensor<T> out(Shape{nb, c, c});
  for (std::size_t bi = 0; bi < nb; ++bi) {
    const T* f = X.ptr() + bi * c * p;
    T* g = out.ptr() + bi * c * c;
    detail::gemm<T>(false, true, c, c, p, f, f, g, false);
    for (std::size_t i = 0; i < c * c; ++i) g[i] *= norm;
  }
  return tape.record(std::move(out), tape.needs_grad(x), [x, nb, c, p, norm](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    auto gx = t.grad(x);
    const auto& X = t.value(x);
    std::vector<T> sym(c * c);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const T* gb = g.data() + bi * c * c;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = (gb[i * c + j] + gb[j * c + i]) * norm;
      detail::gemm<T>(false, false, c, p, c, sym.data(), X.ptr() + bi * c * p, gx.data() + bi * c * p, true);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

// Cross-correlation with zero padding. x [B x Ci x H x W] (or [Ci x H x W]),
// w [Co x Ci x k x k], optional bias [Co].
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
  const auto& X = tape.value(x);
  const auto& W = tape.value(w);
  const bool unbatched = X.rank() == 3;
  if ((X.rank() != 4 && !unbatched) || W.rank() != 4 || W.dim(2) != W.dim(3))
    throw ShapeError("conv2d: bad input " + shape_str(X.shape()) + " or weight " + shape_str(W.shape()));
  const std::size_t nb = unbatched ? 1 : X.dim(0);
  const std::size_t ci = X.dim(unbatched ? 0 : 1), h = X.dim(unbatched ? 1 : 2), wd = X.dim(unbatched ? 2 : 3);
  if (W.dim(1) != ci)
    throw ShapeError("conv2d: weight " + shape_str(W.shape()) + " expects " + std::to_string(W.dim(1)) +
                     " input channels, input " + shape_str(X.shape()) + " has " + std::to_string(ci));
  const std::size_t co = W.dim(0);
  if (bias && tape.value(*bias).size() != co) throw ShapeError("conv2d: bias length does not match output channels");
  const auto g = detail::conv_geometry(nb, ci, h, wd, W.dim(2), stride, pad);
  const std::size_t plane = g.out_h * g.out_w;

  std::vector<T> cols(g.col_rows() * g.col_cols());
  detail::im2col(X.ptr(), g, cols.data());
  std::vector<T> res(co * g.col_cols());
  detail::gemm<T>(false, false, co, g.col_cols(), g.col_rows(), W.ptr(), cols.data(), res.data(), false);
  Tensor<T> out(unbatched ? Shape{co, g.out_h, g.out_w} : Shape{nb, co, g.out_h, g.out_w});
  detail::channel_major_to_batch(res.data(), nb, co, plane, out.ptr());
  if (bias) {
    const auto& Bv = tape.value(*bias);
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < plane; ++i) out[(bi * co + o) * plane + i] += Bv[o];
  }
  const bool needs = tape.needs_grad(x) || tape.needs_grad(w) || (bias && tape.needs_grad(*bias));
  return tape.record(std::move(out), needs, [x, w, bias, g, co, plane](Tape<T>& t, Var self) {
    auto gout = t.grad(self);
    std::vector<T> dres(co * g.col_cols());
    detail::batch_to_channel_major(gout.data(), g.batch, co, plane, dres.data());
    if (bias && t.needs_grad(*bias)) {
      auto gb = t.grad(*bias);
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < g.col_cols(); ++i) gb[o] += dres[o * g.col_cols() + i];
    }
    if (t.needs_grad(w)) {
      std::vector<T> cols(g.col_rows() * g.col_cols());
      detail::im2col(t.value(x).ptr(), g, cols.data());
      detail::gemm<T>(false, true, co, g.col_rows(), g.col_cols(), dres.data(), cols.data(), t.grad(w).data(), true);
    }
    if (t.needs_grad(x)) {
      std::vector<T> dcols(g.col_rows() * g.col_cols());
      detail::gemm<T>(true, false, g.col_rows(), g.col_cols(), co, t.value(w).ptr(), dres.data(), dcols.data(), false);
      detail::col2im(dcols.data(), g, t.grad(x).data());
    }
  });
}

// Transposed convolution that exactly doubles spatial extents: kernel 4,
// stride 2, pad 1. x [B x Ci x H x W], w [Ci x Co x 4 x 4], optional bias [Co].
template <class T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var w, std::optional<Var> bias, std::size_t stride = 2,
                     std::size_t pad = 1) {
  const auto& X = tape.value(x);
  const auto& W = tape.value(w);
  if (W.rank() != 4 || W.dim(2) != W.dim(3)) throw ShapeError("conv_transpose2d: bad weight " + shape_str(W.shape()));
  if (W.dim(2) != 4 || stride != 2 || pad != 1)
    throw ConfigError("conv_transpose2d: unsupported (k=" + std::to_string(W.dim(2)) + ", stride=" +
                      std::to_string(stride) + ", pad=" + std::to_string(pad) + "); only (4, 2, 1) is supported");
  const bool unbatched = X.rank() == 3;
  if (X.rank() != 4 && !unbatched) throw ShapeError("conv_transpose2d: bad input " + shape_str(X.shape()));
  const std::size_t nb = unbatched ? 1 : X.dim(0);
  const std::size_t ci = X.dim(unbatched ? 0 : 1), h = X.dim(unbatched ? 1 : 2), wd = X.dim(unbatched ? 2 : 3);
  if (W.dim(0) != ci)
    throw ShapeError("conv_transpose2d: weight " + shape_str(W.shape()) + " does not match input " +
                     shape_str(X.shape()));
  const std::size_t co = W.dim(1);
  if (bias && tape.value(*bias).size() != co) throw ShapeError("conv_transpose2d: bias length mismatch");
  // Geometry of the adjoint convolution: output image -> input grid.
  const auto g = detail::conv_geometry(nb, co, 2 * h, 2 * wd, 4, stride, pad);
  const std::size_t in_plane = h * wd, out_plane = 4 * h * wd;

  std::vector<T> xmat(ci * nb * in_plane);
  detail::batch_to_channel_major(X.ptr(), nb, ci, in_plane, xmat.data());
  std::vector<T> cols(g.col_rows() * g.col_cols());
  detail::gemm<T>(true, false, g.col_rows(), g.col_cols(), ci, W.ptr(), xmat.data(), cols.data(), false);
  Tensor<T> out(unbatched ? Shape{co, 2 * h, 2 * wd} : Shape{nb, co, 2 * h, 2 * wd});
  detail::col2im(cols.data(), g, out.ptr());
  if (bias) {
    const auto& Bv = tape.value(*bias);
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < out_plane; ++i) out[(bi * co + o) * out_plane + i] += Bv[o];
  }
  const bool needs = tape.needs_grad(x) || tape.needs_grad(w) || (bias && tape.needs_grad(*bias));
  return tape.record(std::move(out), needs, [x, w, bias, g, ci, co, in_plane, out_plane](Tape<T>& t, Var self) {
    auto gout = t.grad(self);
    if (bias && t.needs_grad(*bias)) {
      auto gb = t.grad(*bias);
      for (std::size_t bi = 0; bi < g.batch; ++bi)
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < out_plane; ++i) gb[o] += gout[(bi * co + o) * out_plane + i];
    }
    if (!t.needs_grad(x) && !t.needs_grad(w)) return;
    std::vector<T> dcols(g.col_rows() * g.col_cols());
    detail::im2col(gout.data(), g, dcols.data());
    if (t.needs_grad(w)) {
      std::vector<T> xmat(ci * g.col_cols());
      detail::batch_to_channel_major(t.value(x).ptr(), g.batch, ci, in_plane, xmat.data());
      detail::gemm<T>(false, true, ci, g.col_rows(), g.col_cols(), xmat.data(), dcols.data(), t.grad(w).data(), true);
    }
    if (t.needs_grad(x)) {
      std::vector<T> dx(ci * g.col_cols());
      detail::gemm<T>(false, false, ci, g.col_cols(), g.col_rows(), t.value(w).ptr(), dcols.data(), dx.data(), false);
      std::vector<T> dxb(dx.size());
      detail::channel_major_to_batch(dx.data(), g.batch, ci, in_plane, dxb.data());
      detail::accumulate<T>(t.grad(x), std::span<const T>(dxb));
    }
  });
}

// ---------------------------------------------------------------------------
// Transformer pieces

// Per-row normalization over the last dimension with affine gain/shift.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var shift, T eps = T(1e-5)) {
  const auto& X = tape.value(x);
  const std::size_t d = X.rank() == 2 ? X.dim(1) : 0;
  if (d == 0 || tape.value(gain).size() != d || tape.value(shift).size() != d)
    throw ShapeError("layer_norm: " + shape_str(X.shape()) + " with gain " + shape_str(tape.shape(gain)));
  const std::size_t rows = X.dim(0);
  const auto& G = tape.value(gain);
  const auto& S = tape.value(shift);
  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = X.ptr() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * G[j] + S[j];
    }
  }
  const bool needs = detail::any_needs_grad(tape, {x, gain, shift});
  return tape.record(std::move(out), needs, [x, gain, shift, xhat, inv_std, rows, d](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const auto& G = t.value(gain);
    if (t.needs_grad(gain)) {
      auto gg = t.grad(gain);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
    }
    if (t.needs_grad(shift)) {
      auto gs = t.grad(shift);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gs[j] += g[r * d + j];
    }
    if (t.needs_grad(x)) {
      auto gx = t.grad(x);
      std::vector<T> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        T m1{0}, m2{0};
        for (std::size_t j = 0; j < d; ++j) {
          dxhat[j] = g[r * d + j] * G[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xhat[r * d + j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
      }
    }
  });
}

// Multi-head scaled dot-product attention without masking.
// q, k, v: [(batch*tokens) x D]; D divisible by heads.
template <class T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const auto& Q = tape.value(q);
  require_shape(Q.shape(), tape.shape(k), "attention q/k");
  require_shape(Q.shape(), tape.shape(v), "attention q/v");
  if (Q.rank() != 2 || Q.dim(0) != batch * tokens || heads == 0 || Q.dim(1) % heads != 0)
    throw ShapeError("attention: " + shape_str(Q.shape()) + " with batch " + std::to_string(batch) + ", tokens " +
                     std::to_string(tokens) + ", heads " + std::to_string(heads));
  const std::size_t d = Q.dim(1), dh = d / heads, tt = tokens;
  const T sc = T{1} / std::sqrt(static_cast<T>(dh));
  const auto& K = tape.value(k);
  const auto& V = tape.value(v);
  auto probs = std::make_shared<std::vector<T>>(batch * heads * tt * tt);
  Tensor<T> out(Q.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs->data() + (b * heads + h) * tt * tt;
      for (std::size_t i = 0; i < tt; ++i) {
        const T* qi = Q.ptr() + (b * tt + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tt; ++j) {
          const T* kj = K.ptr() + (b * tt + j) * d + h * dh;
          T s{0};
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          p[i * tt + j] = s * sc;
          mx = std::max(mx, p[i * tt + j]);
        }
        T z{0};
        for (std::size_t j = 0; j < tt; ++j) z += (p[i * tt + j] = std::exp(p[i * tt + j] - mx));
        for (std::size_t j = 0; j < tt; ++j) p[i * tt + j] /= z;
        T* oi = out.ptr() + (b * tt + i) * d + h * dh;
        for (std::size_t j = 0; j < tt; ++j) {
          const T pij = p[i * tt + j];
          const T* vj = V.ptr() + (b * tt + j) * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += pij * vj[e];
        }
      }
    }
  const bool needs = detail::any_needs_grad(tape, {q, k, v});
  return tape.record(std::move(out), needs, [q, k, v, probs, batch, heads, tt, d, dh, sc](Tape<T>& t, Var self) {
    auto g = t.grad(self);
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    auto gq = t.grad(q);
    auto gk = t.grad(k);
    auto gv = t.grad(v);
    std::vector<T> dp(tt * tt);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* p = probs->data() + (b * heads + h) * tt * tt;
        for (std::size_t i = 0; i < tt; ++i) {
          const T* gi = g.data() + (b * tt + i) * d + h * dh;
          T rowdot{0};
          for (std::size_t j = 0; j < tt; ++j) {
            const T* vj = V.ptr() + (b * tt + j) * d + h * dh;
            T* gvj = gv.data() + (b * tt + j) * d + h * dh;
            T s{0};
            for (std::size_t e = 0; e < dh; ++e) {
              s += gi[e] * vj[e];
              gvj[e] += p[i * tt + j] * gi[e];
            }
            dp[i * tt + j] = s;
            rowdot += s * p[i * tt + j];
          }
          for (std::size_t j = 0; j < tt; ++j) dp[i * tt + j] = p[i * tt + j] * (dp[i * tt + j] - rowdot) * sc;
        }
        for (std::size_t i = 0; i < tt; ++i) {
          T* gqi = gq.data() + (b * tt + i) * d + h * dh;
          const T* qi = Q.ptr() + (b * tt + i) * d + h * dh;
          for (std::size_t j = 0; j < tt; ++j) {
            const T ds = dp[i * tt + j];
            const T* kj = K.ptr() + (b * tt + j) * d + h * dh;
            T* gkj = gk.data() + (b * tt + j) * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) {
              gqi[e] += ds * kj[e];
              gkj[e] += ds * qi[e];
            }
          }
        }
      }
  });
}

// Mean cross-entropy over rows with weight != 0. logits [M x N]. Returns 0
// when no row is selected.
template <class T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, const std::vector<int>& targets, const std::vector<T>& weights) {
  const auto& L = tape.value(logits);
  if (L.rank() != 2 || targets.size() != L.dim(0) || weights.size() != L.dim(0))
    throw ShapeError("masked_cross_entropy: logits " + shape_str(L.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  const std::size_t m = L.dim(0), n = L.dim(1);
  T count{0};
  for (std::size_t r = 0; r < m; ++r) {
    if (weights[r] == T{0}) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n)
      throw ContractError("masked_cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                          std::to_string(n) + ")");
    count += weights[r];
  }
  auto soft = std::make_shared<std::vector<T>>(m * n, T{0});
  T loss{0};
  for (std::size_t r = 0; r < m; ++r) {
    if (weights[r] == T{0}) continue;
    const T* row = L.ptr() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) z += ((*soft)[r * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) (*soft)[r * n + j] /= z;
    loss += weights[r] * (std::log(z) + mx - row[targets[r]]);
  }
  if (count > T{0}) loss /= count;
  return tape.record(Tensor<T>::scalar(loss), tape.needs_grad(logits),
                     [logits, targets, weights, soft, count, m, n](Tape<T>& t, Var self) {
                       if (count == T{0}) return;
                       const T g = t.grad(self)[0] / count;
                       auto gl = t.grad(logits);
                       for (std::size_t r = 0; r < m; ++r) {
                         if (weights[r] == T{0}) continue;
                         for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += g * weights[r] * (*soft)[r * n + j];
                         gl[r * n + targets[r]] -= g * weights[r];
                       }
                     });
}

}  // namespace fdm
