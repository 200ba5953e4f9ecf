#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "eqnet/parallel.hpp"
#include "eqnet/tensor.hpp"

namespace eqnet {

// ---------------------------------------------------------------------------
// view / layout ops
// ---------------------------------------------------------------------------

/// Same payload under a new shape (row-major reinterpretation, no copy).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    fail<DimensionError>("reshape ", shape_str(x.shape()), " -> ", shape_str(shape));
  return detail::make_op_result<T>(
      std::move(shape), x.storage(), {&x},
      [](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (size_t i = 0; i < g.size(); ++i) px[0][i] += g[i];
      });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  auto storage = std::make_shared<const std::vector<T>>(std::move(out));
  return detail::make_op_result<T>(
      x.shape(), storage, {&x},
      [storage](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        const std::vector<T>& y = *storage;
        for (size_t i = 0; i < g.size(); ++i)
          if (y[i] > T(0)) px[0][i] += g[i];
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const T v = in[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  auto storage = std::make_shared<const std::vector<T>>(std::move(out));
  return detail::make_op_result<T>(
      x.shape(), storage, {&x},
      [storage](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        const std::vector<T>& y = *storage;
        for (size_t i = 0; i < g.size(); ++i) px[0][i] += g[i] * y[i] * (T(1) - y[i]);
      });
}

namespace detail {
template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    fail<DimensionError>(op, ": shapes differ ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape()));
}
}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [](std::span<const T> g, std::span<std::span<T>> px) {
        for (int k = 0; k < 2; ++k)
          if (!px[k].empty())
            for (size_t i = 0; i < g.size(); ++i) px[k][i] += g[i];
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [](std::span<const T> g, std::span<std::span<T>> px) {
        if (!px[0].empty())
          for (size_t i = 0; i < g.size(); ++i) px[0][i] += g[i];
        if (!px[1].empty())
          for (size_t i = 0; i < g.size(); ++i) px[1][i] -= g[i];
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_op_result<T>(
      a.shape(), std::move(out), {&a, &b},
      [a, b](std::span<const T> g, std::span<std::span<T>> px) {
        if (!px[0].empty())
          for (size_t i = 0; i < g.size(); ++i) px[0][i] += g[i] * b.data()[i];
        if (!px[1].empty())
          for (size_t i = 0; i < g.size(); ++i) px[1][i] += g[i] * a.data()[i];
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return detail::make_op_result<T>(
      x.shape(), std::move(out), {&x},
      [c](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (size_t i = 0; i < g.size(); ++i) px[0][i] += g[i] * c;
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_op_result<T>(
      Shape{1}, std::vector<T>{acc}, {&x},
      [](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (T& v : px[0]) v += g[0];
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return detail::make_op_result<T>(
      Shape{1}, std::vector<T>{acc * inv}, {&x},
      [inv](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (T& v : px[0]) v += g[0] * inv;
      });
}

/// Mean over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail<DimensionError>("mean_axis: axis ", axis, " for rank ", r);
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t n = s[static_cast<size_t>(axis)];
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  auto in = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j) {
      const T* src = in.data() + (o * n + j) * inner;
      T* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  const T inv = T(1) / static_cast<T>(n);
  for (T& v : out) v *= inv;
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {&x},
      [outer, inner, n, inv](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < n; ++j) {
            T* dst = px[0].data() + (o * n + j) * inner;
            const T* src = g.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
          }
      });
}

// ---------------------------------------------------------------------------
// convolution (valid cross-correlation) and pooling
// ---------------------------------------------------------------------------

namespace detail {

/// col[(c*KH+u)*KW+v, oy*OW+ox] = x[c, oy+u, ox+v]
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW, int64_t OH,
            int64_t OW, T* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t u = 0; u < KH; ++u)
      for (int64_t v = 0; v < KW; ++v) {
        T* dst = col + ((c * KH + u) * KW + v) * (OH * OW);
        const T* src = x + c * H * W + u * W + v;
        for (int64_t oy = 0; oy < OH; ++oy)
          std::copy(src + oy * W, src + oy * W + OW, dst + oy * OW);
      }
}

template <class T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW, int64_t OH,
                int64_t OW, T* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t u = 0; u < KH; ++u)
      for (int64_t v = 0; v < KW; ++v) {
        const T* src = col + ((c * KH + u) * KW + v) * (OH * OW);
        T* dst = x + c * H * W + u * W + v;
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox) dst[oy * W + ox] += src[oy * OW + ox];
      }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Samples per work chunk. Fixed so that the dW reduction order (and thus
// the result bits) do not depend on the thread count.
inline constexpr int64_t kConvGrain = 8;

}  // namespace detail

/// Valid 2-D cross-correlation:
///   out[n,o,x,y] = sum_c sum_{u,v} input[n,c,x+u,y+v] * kernel[o,c,u,v]
/// Lowered to a patch-matrix (im2col) product per sample.
template <class T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const Tensor<T>& kernel) {
  if (input.rank() != 4) fail<DimensionError>("conv2d_valid: input rank ", input.rank(), " != 4");
  if (kernel.rank() != 4)
    fail<DimensionError>("conv2d_valid: kernel rank ", kernel.rank(), " != 4");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t O = kernel.dim(0), KC = kernel.dim(1), KH = kernel.dim(2), KW = kernel.dim(3);
  if (KC != C)
    fail<DimensionError>("conv2d_valid: channel mismatch input ", C, " vs kernel ", KC);
  if (KH > H || KW > W)
    fail<DimensionError>("conv2d_valid: kernel ", KH, "x", KW, " larger than input ", H, "x", W);
  const int64_t OH = H - KH + 1, OW = W - KW + 1;
  const int64_t CKK = C * KH * KW, OHW = OH * OW;

  std::vector<T> out(static_cast<size_t>(N * O * OHW));
  {
    const T* xp = input.data().data();
    const T* wp = kernel.data().data();
    T* yp = out.data();
    parallel_chunks(N, detail::kConvGrain, [&](int64_t, int64_t lo, int64_t hi) {
      std::vector<T> col(static_cast<size_t>(CKK * OHW));
      Eigen::Map<const detail::RowMat<T>> w_m(wp, O, CKK);
      for (int64_t n = lo; n < hi; ++n) {
        detail::im2col(xp + n * C * H * W, C, H, W, KH, KW, OH, OW, col.data());
        Eigen::Map<const detail::RowMat<T>> col_m(col.data(), CKK, OHW);
        Eigen::Map<detail::RowMat<T>> y_m(yp + n * O * OHW, O, OHW);
        y_m.noalias() = w_m * col_m;
      }
    });
  }

  return detail::make_op_result<T>(
      Shape{N, O, OH, OW}, std::move(out), {&input, &kernel},
      [input, kernel, N, C, H, W, O, KH, KW, OH, OW, CKK,
       OHW](std::span<const T> g, std::span<std::span<T>> px) {
        const T* xp = input.data().data();
        const T* wp = kernel.data().data();
        const bool want_dx = !px[0].empty();
        const bool want_dw = !px[1].empty();
        const int64_t n_chunks = (N + detail::kConvGrain - 1) / detail::kConvGrain;
        std::vector<std::vector<T>> dw_partial;
        if (want_dw) dw_partial.assign(static_cast<size_t>(n_chunks), {});

        parallel_chunks(N, detail::kConvGrain, [&](int64_t chunk, int64_t lo, int64_t hi) {
          std::vector<T> col(static_cast<size_t>(CKK * OHW));
          std::vector<T>* dw = nullptr;
          if (want_dw) {
            dw_partial[static_cast<size_t>(chunk)].assign(static_cast<size_t>(O * CKK), T(0));
            dw = &dw_partial[static_cast<size_t>(chunk)];
          }
          for (int64_t n = lo; n < hi; ++n) {
            Eigen::Map<const detail::RowMat<T>> gy(g.data() + n * O * OHW, O, OHW);
            if (want_dw) {
              detail::im2col(xp + n * C * H * W, C, H, W, KH, KW, OH, OW, col.data());
              Eigen::Map<const detail::RowMat<T>> col_m(col.data(), CKK, OHW);
              Eigen::Map<detail::RowMat<T>> dw_m(dw->data(), O, CKK);
              dw_m.noalias() += gy * col_m.transpose();
            }
            if (want_dx) {
              Eigen::Map<const detail::RowMat<T>> w_m(wp, O, CKK);
              Eigen::Map<detail::RowMat<T>> col_m(col.data(), CKK, OHW);
              col_m.noalias() = w_m.transpose() * gy;
              detail::col2im_add(col.data(), C, H, W, KH, KW, OH, OW,
                                 px[0].data() + n * C * H * W);
            }
          }
        });
        if (want_dw) {
          for (int64_t c = 0; c < n_chunks; ++c) {
            const auto& part = dw_partial[static_cast<size_t>(c)];
            for (size_t i = 0; i < part.size(); ++i) px[1][i] += part[i];
          }
        }
      });
}

/// 2x2 stride-2 average pooling on the last two axes of an NCHW tensor.
/// Odd trailing rows/columns are dropped.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.rank() != 4) fail<DimensionError>("avg_pool2: input rank ", x.rank(), " != 4");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) fail<DimensionError>("avg_pool2: spatial dims ", H, "x", W, " below 2x2");
  const int64_t OH = H / 2, OW = W / 2;
  std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
  auto in = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = in.data() + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (int64_t i = 0; i < OH; ++i)
      for (int64_t j = 0; j < OW; ++j) {
        const T* p = src + 2 * i * W + 2 * j;
        dst[i * OW + j] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
      }
  }
  return detail::make_op_result<T>(
      Shape{N, C, OH, OW}, std::move(out), {&x},
      [N, C, H, W, OH, OW](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T* src = g.data() + nc * OH * OW;
          T* dst = px[0].data() + nc * H * W;
          for (int64_t i = 0; i < OH; ++i)
            for (int64_t j = 0; j < OW; ++j) {
              const T q = src[i * OW + j] * T(0.25);
              T* p = dst + 2 * i * W + 2 * j;
              p[0] += q;
              p[1] += q;
              p[W] += q;
              p[W + 1] += q;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// concat / narrow / crop
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) fail<ContractError>("concat: no operands");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail<DimensionError>("concat: axis ", axis, " for rank ", r);
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) fail<DimensionError>("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i == axis) continue;
      if (p.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
        fail<DimensionError>("concat: shapes differ off-axis: ", shape_str(p.shape()), " vs ",
                             shape_str(out_shape));
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  std::vector<int64_t> part_axis(parts.size());
  {
    int64_t off = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
      const int64_t ax = parts[k].dim(axis);
      part_axis[k] = ax;
      const T* src = parts[k].data().data();
      for (int64_t o = 0; o < outer; ++o)
        std::copy(src + o * ax * inner, src + (o + 1) * ax * inner,
                  out.data() + (o * axis_total + off) * inner);
      off += ax;
    }
  }

  std::vector<const Tensor<T>*> ins;
  for (const auto& p : parts) ins.push_back(&p);
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (p.tape() != nullptr) {
      if (tape != nullptr && tape != p.tape())
        fail<ContractError>("operands come from different tapes");
      tape = p.tape();
    }
  }
  auto storage = std::make_shared<const std::vector<T>>(std::move(out));
  if (tape == nullptr) return Tensor<T>(std::move(out_shape), std::move(storage));
  return tape->record(
      std::move(out_shape), std::move(storage),
      std::span<const Tensor<T>* const>(ins.data(), ins.size()),
      [outer, inner, axis_total, part_axis](std::span<const T> g,
                                            std::span<std::span<T>> px) {
        int64_t off = 0;
        for (size_t k = 0; k < part_axis.size(); ++k) {
          const int64_t ax = part_axis[k];
          if (!px[k].empty()) {
            for (int64_t o = 0; o < outer; ++o) {
              const T* src = g.data() + (o * axis_total + off) * inner;
              T* dst = px[k].data() + o * ax * inner;
              for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
            }
          }
          off += ax;
        }
      });
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int axis) {
  std::vector<Tensor<T>> v(parts);
  return concat(std::span<const Tensor<T>>(v.data(), v.size()), axis);
}

/// Slice of length `len` starting at `start` along one axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail<DimensionError>("narrow: axis ", axis, " for rank ", r);
  const int64_t n = x.dim(axis);
  if (start < 0 || len < 1 || start + len > n)
    fail<DimensionError>("narrow: [", start, ",", start + len, ") outside axis of ", n);
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<size_t>(i)];

  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const T* src = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * n + start) * inner, src + (o * n + start + len) * inner,
              out.data() + o * len * inner);
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {&x},
      [outer, inner, n, start, len](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * len * inner;
          T* dst = px[0].data() + (o * n + start) * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

/// Center crop of the last two axes by `margin` pixels per side.
template <class T>
Tensor<T> crop_spatial(const Tensor<T>& x, int64_t margin) {
  if (x.rank() < 2) fail<DimensionError>("crop_spatial: rank ", x.rank(), " < 2");
  const int64_t H = x.dim(-2), W = x.dim(-1);
  if (2 * margin >= H || 2 * margin >= W)
    fail<DimensionError>("crop_spatial: margin ", margin, " too large for ", H, "x", W);
  Tensor<T> t = narrow(x, x.rank() - 2, margin, H - 2 * margin);
  return narrow(t, x.rank() - 1, margin, W - 2 * margin);
}

// ---------------------------------------------------------------------------
// gather (differentiable as scatter-add)
// ---------------------------------------------------------------------------

/// out.flat[i] = x.flat[idx[i]]. Gradients scatter-add back through idx.
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<int64_t>> idx,
                 Shape out_shape) {
  if (static_cast<int64_t>(idx->size()) != numel(out_shape))
    fail<DimensionError>("gather: ", idx->size(), " indices vs out shape ",
                         shape_str(out_shape));
  const int64_t n = x.numel();
  std::vector<T> out(idx->size());
  auto in = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const int64_t j = (*idx)[i];
    if (j < 0 || j >= n) fail<DimensionError>("gather: index ", j, " out of range ", n);
    out[i] = in[static_cast<size_t>(j)];
  }
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {&x},
      [idx](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        for (size_t i = 0; i < g.size(); ++i) px[0][static_cast<size_t>((*idx)[i])] += g[i];
      });
}

// ---------------------------------------------------------------------------
// plane transforms (exact index permutations on the last two axes)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void fliplr_plane(const std::vector<T>& in, int64_t outer, int64_t H, int64_t W,
                  std::vector<T>& out) {
  out.resize(in.size());
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = in.data() + o * H * W;
    T* dst = out.data() + o * H * W;
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) dst[i * W + j] = src[i * W + (W - 1 - j)];
  }
}

// One counter-clockwise quarter turn: out[i,j] = in[j, W-1-i]; out is W x H.
template <class T>
void rot90_plane(const std::vector<T>& in, int64_t outer, int64_t H, int64_t W,
                 std::vector<T>& out) {
  out.resize(in.size());
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = in.data() + o * H * W;
    T* dst = out.data() + o * H * W;
    for (int64_t i = 0; i < W; ++i)
      for (int64_t j = 0; j < H; ++j) dst[i * H + j] = src[j * W + (W - 1 - i)];
  }
}

/// Raw plane transform of the last two axes: mirror (horizontal flip)
/// first, then `rot` quarter turns counter-clockwise.
template <class T>
void transform_plane_data(std::vector<T>& data, Shape& shape, int rot, bool mirror) {
  const size_t r = shape.size();
  int64_t outer = 1;
  for (size_t i = 0; i + 2 < r; ++i) outer *= shape[i];
  int64_t H = shape[r - 2], W = shape[r - 1];
  std::vector<T> tmp;
  if (mirror) {
    fliplr_plane(data, outer, H, W, tmp);
    data.swap(tmp);
  }
  for (int k = 0; k < (rot % 4 + 4) % 4; ++k) {
    rot90_plane(data, outer, H, W, tmp);
    data.swap(tmp);
    std::swap(H, W);
  }
  shape[r - 2] = H;
  shape[r - 1] = W;
}

}  // namespace detail

/// Rotate/reflect the last two axes: `mirror` flips horizontally (negates x)
/// first, then `rot_quarter` 90-degree counter-clockwise turns. A pure index
/// permutation; composing transforms matches composing group elements.
template <class T>
Tensor<T> transform_plane(const Tensor<T>& x, int rot_quarter, bool mirror) {
  if (x.rank() < 2) fail<DimensionError>("transform_plane: rank ", x.rank(), " < 2");
  const int rot = (rot_quarter % 4 + 4) % 4;
  std::vector<T> out(x.data().begin(), x.data().end());
  Shape shape = x.shape();
  detail::transform_plane_data(out, shape, rot, mirror);
  // inverse element: pure rotations invert to 4-rot; mirrored elements are
  // involutions in this parameterization
  const int inv_rot = mirror ? rot : (4 - rot) % 4;
  Shape grad_shape = shape;  // grad arrives with the output's layout
  return detail::make_op_result<T>(
      std::move(shape), std::move(out), {&x},
      [inv_rot, mirror, grad_shape](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        std::vector<T> gv(g.begin(), g.end());
        Shape gs = grad_shape;
        detail::transform_plane_data(gv, gs, inv_rot, mirror);
        for (size_t i = 0; i < gv.size(); ++i) px[0][i] += gv[i];
      });
}

// ---------------------------------------------------------------------------
// batch normalization (channel axis 1, moments over all other axes)
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormOut {
  Tensor<T> y;
  Tensor<T> batch_mean;  // [C], untracked
  Tensor<T> batch_var;   // [C], biased, untracked
};

/// Train-mode batch norm: per-channel moments over every non-channel axis
/// (batch, orientation, space), then y = gamma * (x-mu)/sqrt(var+eps) + beta.
template <class T>
BatchNormOut<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& beta, T eps) {
  if (x.rank() < 2) fail<DimensionError>("batch_norm: input rank ", x.rank(), " < 2");
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t M = x.numel() / (N * C);
  if (gamma.numel() != C || beta.numel() != C)
    fail<DimensionError>("batch_norm: gamma/beta length ", gamma.numel(), "/", beta.numel(),
                         " vs ", C, " channels");
  const int64_t m = N * M;
  auto in = x.data();
  std::vector<T> mu(static_cast<size_t>(C), T(0)), var(static_cast<size_t>(C), T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = in.data() + (n * C + c) * M;
      T acc = T(0);
      for (int64_t i = 0; i < M; ++i) acc += p[i];
      mu[static_cast<size_t>(c)] += acc;
    }
  for (T& v : mu) v /= static_cast<T>(m);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = in.data() + (n * C + c) * M;
      const T mc = mu[static_cast<size_t>(c)];
      T acc = T(0);
      for (int64_t i = 0; i < M; ++i) {
        const T d = p[i] - mc;
        acc += d * d;
      }
      var[static_cast<size_t>(c)] += acc;
    }
  for (T& v : var) v /= static_cast<T>(m);

  std::vector<T> istd(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c)
    istd[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);

  std::vector<T> out(in.size());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = in.data() + (n * C + c) * M;
      T* q = out.data() + (n * C + c) * M;
      const T mc = mu[static_cast<size_t>(c)];
      const T sc = istd[static_cast<size_t>(c)] * gamma.data()[static_cast<size_t>(c)];
      const T bc = beta.data()[static_cast<size_t>(c)];
      for (int64_t i = 0; i < M; ++i) q[i] = (p[i] - mc) * sc + bc;
    }

  auto mu_copy = mu;
  auto var_copy = var;
  Tensor<T> y = detail::make_op_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, N, C, M, m, mu, istd](std::span<const T> g, std::span<std::span<T>> px) {
        auto in = x.data();
        // per channel: dbeta = sum g; dgamma = sum g*xhat;
        // dx = gamma*istd/m * (m*g - dbeta - xhat*dgamma)
        std::vector<T> dbeta(static_cast<size_t>(C), T(0)), dgamma(static_cast<size_t>(C), T(0));
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const T* gp = g.data() + (n * C + c) * M;
            const T* xp = in.data() + (n * C + c) * M;
            const T mc = mu[static_cast<size_t>(c)];
            const T ic = istd[static_cast<size_t>(c)];
            T db = T(0), dg = T(0);
            for (int64_t i = 0; i < M; ++i) {
              db += gp[i];
              dg += gp[i] * (xp[i] - mc) * ic;
            }
            dbeta[static_cast<size_t>(c)] += db;
            dgamma[static_cast<size_t>(c)] += dg;
          }
        if (!px[2].empty())
          for (int64_t c = 0; c < C; ++c) px[2][static_cast<size_t>(c)] += dbeta[static_cast<size_t>(c)];
        if (!px[1].empty())
          for (int64_t c = 0; c < C; ++c) px[1][static_cast<size_t>(c)] += dgamma[static_cast<size_t>(c)];
        if (!px[0].empty()) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
              const T* gp = g.data() + (n * C + c) * M;
              const T* xp = in.data() + (n * C + c) * M;
              T* dp = px[0].data() + (n * C + c) * M;
              const T mc = mu[static_cast<size_t>(c)];
              const T ic = istd[static_cast<size_t>(c)];
              const T gc = gamma.data()[static_cast<size_t>(c)];
              const T db = dbeta[static_cast<size_t>(c)];
              const T dg = dgamma[static_cast<size_t>(c)];
              const T k = gc * ic * inv_m;
              for (int64_t i = 0; i < M; ++i) {
                const T xh = (xp[i] - mc) * ic;
                dp[i] += k * (static_cast<T>(m) * gp[i] - db - xh * dg);
              }
            }
        }
      });
  return {std::move(y), Tensor<T>(Shape{C}, std::move(mu_copy)),
          Tensor<T>(Shape{C}, std::move(var_copy))};
}

/// y[n,c,...] = x[n,c,...] * scl[c] + sft[c]; eval-mode batch norm reduces
/// to this with scl = gamma/sqrt(running_var+eps).
template <class T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scl, const Tensor<T>& sft) {
  if (x.rank() < 2) fail<DimensionError>("channel_affine: rank ", x.rank(), " < 2");
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t M = x.numel() / (N * C);
  if (scl.numel() != C || sft.numel() != C)
    fail<DimensionError>("channel_affine: scale/shift length vs ", C, " channels");
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* p = in.data() + (n * C + c) * M;
      T* q = out.data() + (n * C + c) * M;
      const T s = scl.data()[static_cast<size_t>(c)];
      const T b = sft.data()[static_cast<size_t>(c)];
      for (int64_t i = 0; i < M; ++i) q[i] = p[i] * s + b;
    }
  return detail::make_op_result<T>(
      x.shape(), std::move(out), {&x, &scl, &sft},
      [x, scl, N, C, M](std::span<const T> g, std::span<std::span<T>> px) {
        auto in = x.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const T* gp = g.data() + (n * C + c) * M;
            const T* xp = in.data() + (n * C + c) * M;
            if (!px[0].empty()) {
              T* dp = px[0].data() + (n * C + c) * M;
              const T s = scl.data()[static_cast<size_t>(c)];
              for (int64_t i = 0; i < M; ++i) dp[i] += gp[i] * s;
            }
            if (!px[1].empty()) {
              T acc = T(0);
              for (int64_t i = 0; i < M; ++i) acc += gp[i] * xp[i];
              px[1][static_cast<size_t>(c)] += acc;
            }
            if (!px[2].empty()) {
              T acc = T(0);
              for (int64_t i = 0; i < M; ++i) acc += gp[i];
              px[2][static_cast<size_t>(c)] += acc;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

// ---------------------------------------------------------------------------
// comparison helpers
// ---------------------------------------------------------------------------

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail<DimensionError>("max_abs_diff: shape mismatch");
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(double(a.data()[static_cast<size_t>(i)]) -
                                     double(b.data()[static_cast<size_t>(i)])));
  return worst;
}

/// Max absolute difference normalized by the reference's magnitude (never
/// inflated below unit scale).
template <class T>
double normalized_deviation(const Tensor<T>& a, const Tensor<T>& ref) {
  double scale = 1.0;
  for (T v : ref.data()) scale = std::max(scale, std::abs(double(v)));
  return max_abs_diff(a, ref) / scale;
}

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross-entropy, probabilities clamped to [eps, 1-eps] to keep
/// the logs finite. Differentiable w.r.t. `prob`; labels must be exactly 0/1.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& prob, const Tensor<T>& label) {
  detail::check_same_shape(prob, label, "bce_loss");
  const T eps = static_cast<T>(kBceEps);
  auto p = prob.data();
  auto y = label.data();
  for (size_t i = 0; i < y.size(); ++i) {
    if (y[i] != T(0) && y[i] != T(1))
      fail<ValidationError>("bce_loss: label ", y[i], " not in {0,1}");
  }
  const int64_t M = prob.numel();
  T acc = T(0);
  for (size_t i = 0; i < p.size(); ++i) {
    const T pc = std::clamp(p[i], eps, T(1) - eps);
    acc += y[i] == T(1) ? -std::log(pc) : -std::log(T(1) - pc);
  }
  acc /= static_cast<T>(M);
  return detail::make_op_result<T>(
      Shape{1}, std::vector<T>{acc}, {&prob, &label},
      [prob, label, eps, M](std::span<const T> g, std::span<std::span<T>> px) {
        if (px[0].empty()) return;
        auto p = prob.data();
        auto y = label.data();
        const T inv_m = g[0] / static_cast<T>(M);
        for (size_t i = 0; i < p.size(); ++i) {
          if (p[i] < eps || p[i] > T(1) - eps) continue;  // clamped: flat
          px[0][i] += inv_m * (p[i] - y[i]) / (p[i] * (T(1) - p[i]));
        }
      });
}

}  // namespace eqnet
