#pragma once

// Differentiable kernels. Each forward has a matching *_backward that returns
// the vector-Jacobian product for a given output gradient. All kernels are
// pure functions of their arguments except batch_norm in train mode, which
// updates the running statistics it is handed.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "csrnet/tensor.hpp"

namespace csrnet::ops {

enum class Mode { train, eval };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
  if (!(a == b)) {
    throw DimensionError(csrnet::detail::concat(op, ": shape mismatch ", a.str(), " vs ", b.str()));
  }
}

inline void require_channel_vec(const Shape4& s, std::size_t n, std::size_t c, const char* op,
                                const char* what) {
  if (s.h != 1 || s.w != 1 || s.c != c || (s.n != n && s.n != 1)) {
    throw DimensionError(csrnet::detail::concat(op, ": ", what, " has shape ", s.str(),
                                                ", expected (", n, ",", c, ",1,1)"));
  }
}

struct ConvDims {
  std::size_t k = 1, stride = 1, pad = 0, oh = 1, ow = 1;
};

template <typename T>
ConvDims conv_dims(const Shape4& x, const Shape4& w, std::size_t stride, std::size_t pad) {
  if (w.c != x.c) {
    throw DimensionError(csrnet::detail::concat("conv2d: input ", x.str(), " has ", x.c,
                                                " channels but kernel ", w.str(), " expects ", w.c));
  }
  if (w.h != w.w || w.h % 2 == 0) {
    throw DimensionError(csrnet::detail::concat("conv2d: kernel ", w.str(), " must be square with odd size"));
  }
  if (stride == 0) throw GeometryError("conv2d: stride must be positive");
  ConvDims d;
  d.k = w.h;
  d.stride = stride;
  d.pad = pad;
  if (x.h + 2 * pad < d.k || x.w + 2 * pad < d.k) {
    throw GeometryError(csrnet::detail::concat("conv2d: input ", x.str(), " with pad ", pad,
                                               " is smaller than kernel ", d.k, "; zero-sized output"));
  }
  d.oh = (x.h + 2 * pad - d.k) / stride + 1;
  d.ow = (x.w + 2 * pad - d.k) / stride + 1;
  return d;
}

inline bool conv_is_pointwise(const ConvDims& d) { return d.k == 1 && d.stride == 1 && d.pad == 0; }

// col has (c * k * k) rows and (oh * ow) columns.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, const ConvDims& d, T* col) {
  const std::size_t cols = d.oh * d.ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* xp = x + ch * h * w;
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = col + ((ch * d.k + ky) * d.k + kx) * cols;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          T* out = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + d.ow, T{0});
            continue;
          }
          const T* src = xp + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, const ConvDims& d, T* x) {
  const std::size_t cols = d.oh * d.ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* xp = x + ch * h * w;
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = col + ((ch * d.k + ky) * d.k + kx) * cols;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = xp + static_cast<std::size_t>(iy) * w;
          const T* in = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

/// Zero-padded cross-correlation. `weight` is (c_out, c_in, k, k); `bias`, if
/// given, is (1, c_out, 1, 1).
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>* bias,
                  std::size_t stride, std::size_t pad) {
  const auto d = detail::conv_dims<T>(x.shape(), weight.shape(), stride, pad);
  const std::size_t c_out = weight.n();
  if (bias) detail::require_channel_vec(bias->shape(), 1, c_out, "conv2d", "bias");
  const std::size_t kdim = x.c() * d.k * d.k;
  const std::size_t cols = d.oh * d.ow;
  Tensor4<T> y(Shape4{x.n(), c_out, d.oh, d.ow});
  std::vector<T> col;
  if (!detail::conv_is_pointwise(d)) col.resize(kdim * cols);
  detail::ConstMatMap<T> wm(weight.data(), c_out, kdim);
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (!col.empty()) {
      detail::im2col(src, x.c(), x.h(), x.w(), d, col.data());
      src = col.data();
    }
    detail::MatMap<T> ym(y.sample(n), c_out, cols);
    ym.noalias() = wm * detail::ConstMatMap<T>(src, kdim, cols);
    if (bias) {
      for (std::size_t co = 0; co < c_out; ++co) ym.row(co).array() += (*bias)[co];
    }
  }
  CSRNET_CHECK_FINITE(y, "conv2d");
  return y;
}

template <typename T>
struct Conv2dGrads {
  Tensor4<T> dx;
  Tensor4<T> dweight;
  Tensor4<T> dbias;  // empty when the forward had no bias
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& dy,
                               std::size_t stride, std::size_t pad, bool with_bias,
                               bool need_dx = true) {
  const auto d = detail::conv_dims<T>(x.shape(), weight.shape(), stride, pad);
  const std::size_t c_out = weight.n();
  detail::require_same_shape(dy.shape(), Shape4{x.n(), c_out, d.oh, d.ow}, "conv2d_backward");
  const std::size_t kdim = x.c() * d.k * d.k;
  const std::size_t cols = d.oh * d.ow;
  Conv2dGrads<T> g;
  g.dweight = Tensor4<T>(weight.shape());
  if (with_bias) g.dbias = Tensor4<T>::vec(1, c_out);
  if (need_dx) g.dx = Tensor4<T>(x.shape());
  const bool pointwise = detail::conv_is_pointwise(d);
  std::vector<T> col(pointwise ? 0 : kdim * cols);
  std::vector<T> dcol(pointwise ? 0 : kdim * cols);
  detail::ConstMatMap<T> wm(weight.data(), c_out, kdim);
  detail::MatMap<T> dwm(g.dweight.data(), c_out, kdim);
  for (std::size_t n = 0; n < x.n(); ++n) {
    detail::ConstMatMap<T> dym(dy.sample(n), c_out, cols);
    const T* src = x.sample(n);
    if (!pointwise) {
      detail::im2col(src, x.c(), x.h(), x.w(), d, col.data());
      src = col.data();
    }
    dwm.noalias() += dym * detail::ConstMatMap<T>(src, kdim, cols).transpose();
    if (with_bias) {
      for (std::size_t co = 0; co < c_out; ++co) {
        const T* row = dy.sample(n) + co * cols;
        T s{0};
        for (std::size_t i = 0; i < cols; ++i) s += row[i];
        g.dbias[co] += s;
      }
    }
    if (!need_dx) continue;
    if (pointwise) {
      detail::MatMap<T>(g.dx.sample(n), kdim, cols).noalias() = wm.transpose() * dym;
    } else {
      detail::MatMap<T>(dcol.data(), kdim, cols).noalias() = wm.transpose() * dym;
      detail::col2im(dcol.data(), x.c(), x.h(), x.w(), d, g.dx.sample(n));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// batch_norm

/// References to the running statistics a batch-norm call reads or updates.
/// `tracked` is a (1,1,1,1) counter of train-mode updates.
template <typename T>
struct RunningStats {
  Tensor4<T>& mean;
  Tensor4<T>& var;
  Tensor4<T>& tracked;
};

template <typename T>
struct BatchNormCache {
  Tensor4<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::train;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over (n,h,w). Train mode uses batch statistics and
/// updates the running ones by exponential moving average (unbiased variance);
/// eval mode uses the running statistics.
template <typename T>
Tensor4<T> batch_norm(const Tensor4<T>& x, const Tensor4<T>& gamma, const Tensor4<T>& beta,
                      RunningStats<T> stats, Mode mode, T eps = T(kBatchNormEps),
                      T momentum = T(kBatchNormMomentum), BatchNormCache<T>* cache = nullptr) {
  const std::size_t C = x.c();
  detail::require_channel_vec(gamma.shape(), 1, C, "batch_norm", "gamma");
  detail::require_channel_vec(beta.shape(), 1, C, "batch_norm", "beta");
  detail::require_channel_vec(stats.mean.shape(), 1, C, "batch_norm", "running mean");
  detail::require_channel_vec(stats.var.shape(), 1, C, "batch_norm", "running var");
  const std::size_t P = x.h() * x.w();
  const std::size_t M = x.n() * P;
  Tensor4<T> y(x.shape());
  Tensor4<T> xhat(x.shape());
  std::vector<T> inv_std(C);
  if (mode == Mode::eval && stats.tracked[0] <= T{0}) {
    throw UninitializedStatsError("batch_norm: eval mode requested before any running statistics were recorded");
  }
  for (std::size_t ch = 0; ch < C; ++ch) {
    T mean{0}, var{0};
    if (mode == Mode::train) {
      for (std::size_t n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, ch);
        for (std::size_t i = 0; i < P; ++i) mean += p[i];
      }
      mean /= static_cast<T>(M);
      for (std::size_t n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, ch);
        for (std::size_t i = 0; i < P; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      var /= static_cast<T>(M);
      const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
      stats.mean[ch] = (T{1} - momentum) * stats.mean[ch] + momentum * mean;
      stats.var[ch] = (T{1} - momentum) * stats.var[ch] + momentum * unbiased;
    } else {
      mean = stats.mean[ch];
      var = stats.var[ch];
    }
    const T istd = T{1} / std::sqrt(var + eps);
    inv_std[ch] = istd;
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* p = x.plane(n, ch);
      T* xh = xhat.plane(n, ch);
      T* out = y.plane(n, ch);
      for (std::size_t i = 0; i < P; ++i) {
        xh[i] = (p[i] - mean) * istd;
        out[i] = gamma[ch] * xh[i] + beta[ch];
      }
    }
  }
  if (mode == Mode::train) stats.tracked[0] += T{1};
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  CSRNET_CHECK_FINITE(y, "batch_norm");
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor4<T> dx;
  Tensor4<T> dgamma;
  Tensor4<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor4<T>& gamma,
                                      const Tensor4<T>& dy) {
  detail::require_same_shape(dy.shape(), cache.xhat.shape(), "batch_norm_backward");
  const std::size_t C = dy.c();
  const std::size_t P = dy.h() * dy.w();
  const T M = static_cast<T>(dy.n() * P);
  BatchNormGrads<T> g{Tensor4<T>(dy.shape()), Tensor4<T>::vec(1, C), Tensor4<T>::vec(1, C)};
  for (std::size_t ch = 0; ch < C; ++ch) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t n = 0; n < dy.n(); ++n) {
      const T* d = dy.plane(n, ch);
      const T* xh = cache.xhat.plane(n, ch);
      for (std::size_t i = 0; i < P; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * xh[i];
      }
    }
    g.dgamma[ch] = sum_dy_xhat;
    g.dbeta[ch] = sum_dy;
    const T scale = gamma[ch] * cache.inv_std[ch];
    for (std::size_t n = 0; n < dy.n(); ++n) {
      const T* d = dy.plane(n, ch);
      const T* xh = cache.xhat.plane(n, ch);
      T* dx = g.dx.plane(n, ch);
      if (cache.mode == Mode::train) {
        for (std::size_t i = 0; i < P; ++i) {
          dx[i] = scale * (d[i] - sum_dy / M - xh[i] * sum_dy_xhat / M);
        }
      } else {
        for (std::size_t i = 0; i < P; ++i) dx[i] = scale * d[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x) {
  Tensor4<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < T{0} ? T{0} : x[i];  // NaN passes through
  return y;
}

/// `y` is the forward output; y > 0 exactly where x > 0 so either may be passed.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy) {
  detail::require_same_shape(y.shape(), dy.shape(), "relu_backward");
  Tensor4<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
  return dx;
}

// ---------------------------------------------------------------------------
// linear on channel vectors

/// x is (n, c_in, 1, 1); weight is (c_out, c_in, 1, 1); bias (1, c_out, 1, 1).
/// Each output row is computed independently of the batch size.
template <typename T>
Tensor4<T> linear(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>* bias) {
  if (x.h() != 1 || x.w() != 1 || weight.h() != 1 || weight.w() != 1 || x.c() != weight.c()) {
    throw DimensionError(csrnet::detail::concat("linear: input ", x.shape().str(), " incompatible with weight ",
                                                weight.shape().str()));
  }
  const std::size_t c_in = x.c(), c_out = weight.n();
  if (bias) detail::require_channel_vec(bias->shape(), 1, c_out, "linear", "bias");
  Tensor4<T> y = Tensor4<T>::vec(x.n(), c_out);
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* xr = x.sample(n);
    for (std::size_t co = 0; co < c_out; ++co) {
      const T* wr = weight.sample(co);
      T acc = bias ? (*bias)[co] : T{0};
      for (std::size_t ci = 0; ci < c_in; ++ci) acc += wr[ci] * xr[ci];
      y(n, co, 0, 0) = acc;
    }
  }
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor4<T> dx;
  Tensor4<T> dweight;
  Tensor4<T> dbias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& dy,
                               bool with_bias) {
  const std::size_t c_in = x.c(), c_out = weight.n();
  detail::require_same_shape(dy.shape(), Shape4{x.n(), c_out, 1, 1}, "linear_backward");
  LinearGrads<T> g{Tensor4<T>(x.shape()), Tensor4<T>(weight.shape()), {}};
  if (with_bias) g.dbias = Tensor4<T>::vec(1, c_out);
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* xr = x.sample(n);
    T* dxr = g.dx.sample(n);
    for (std::size_t co = 0; co < c_out; ++co) {
      const T d = dy(n, co, 0, 0);
      const T* wr = weight.sample(co);
      T* dwr = g.dweight.sample(co);
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        dxr[ci] += d * wr[ci];
        dwr[ci] += d * xr[ci];
      }
      if (with_bias) g.dbias[co] += d;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// bilinear resize (half-pixel centres, clamped at the border)

namespace detail {

template <typename T>
struct LerpTable {
  std::vector<std::size_t> lo, hi;
  std::vector<T> frac;
};

// Source coordinate for destination index d is (d + 0.5) * in / out - 0.5,
// clamped to [0, in - 1].
template <typename T>
LerpTable<T> lerp_table(std::size_t in, std::size_t out) {
  LerpTable<T> t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    t.lo[d] = i0;
    t.hi[d] = std::min(i0 + 1, in - 1);
    t.frac[d] = static_cast<T>(src - static_cast<double>(i0));
  }
  return t;
}

}  // namespace detail

template <typename T>
Tensor4<T> resize_bilinear(const Tensor4<T>& x, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw GeometryError("resize_bilinear: zero-sized output");
  const auto ty = detail::lerp_table<T>(x.h(), out_h);
  const auto tx = detail::lerp_table<T>(x.w(), out_w);
  Tensor4<T> y(Shape4{x.n(), x.c(), out_h, out_w});
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T* src = x.plane(n, ch);
      T* dst = y.plane(n, ch);
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T fy = ty.frac[oy];
        const T* r0 = src + ty.lo[oy] * x.w();
        const T* r1 = src + ty.hi[oy] * x.w();
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const T fx = tx.frac[ox];
          const T top = r0[tx.lo[ox]] * (T{1} - fx) + r0[tx.hi[ox]] * fx;
          const T bot = r1[tx.lo[ox]] * (T{1} - fx) + r1[tx.hi[ox]] * fx;
          dst[oy * out_w + ox] = top * (T{1} - fy) + bot * fy;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor4<T> resize_bilinear_backward(const Shape4& in_shape, const Tensor4<T>& dy) {
  if (dy.n() != in_shape.n || dy.c() != in_shape.c) {
    throw DimensionError(csrnet::detail::concat("resize_bilinear_backward: gradient ", dy.shape().str(),
                                                " does not match input ", in_shape.str()));
  }
  const auto ty = detail::lerp_table<T>(in_shape.h, dy.h());
  const auto tx = detail::lerp_table<T>(in_shape.w, dy.w());
  Tensor4<T> dx(in_shape);
  for (std::size_t n = 0; n < dy.n(); ++n) {
    for (std::size_t ch = 0; ch < dy.c(); ++ch) {
      const T* g = dy.plane(n, ch);
      T* dst = dx.plane(n, ch);
      for (std::size_t oy = 0; oy < dy.h(); ++oy) {
        const T fy = ty.frac[oy];
        T* r0 = dst + ty.lo[oy] * in_shape.w;
        T* r1 = dst + ty.hi[oy] * in_shape.w;
        for (std::size_t ox = 0; ox < dy.w(); ++ox) {
          const T fx = tx.frac[ox];
          const T v = g[oy * dy.w() + ox];
          r0[tx.lo[ox]] += v * (T{1} - fy) * (T{1} - fx);
          r0[tx.hi[ox]] += v * (T{1} - fy) * fx;
          r1[tx.lo[ox]] += v * fy * (T{1} - fx);
          r1[tx.hi[ox]] += v * fy * fx;
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor4<T> bilinear_upsample(const Tensor4<T>& x, std::size_t factor) {
  if (factor == 0) throw GeometryError("bilinear_upsample: factor must be >= 1");
  return resize_bilinear(x, x.h() * factor, x.w() * factor);
}

template <typename T>
Tensor4<T> bilinear_upsample_backward(const Shape4& in_shape, const Tensor4<T>& dy) {
  return resize_bilinear_backward(in_shape, dy);
}

// ---------------------------------------------------------------------------
// pooling

/// Bin i of k over an extent of size `extent`: [floor(i*extent/k), ceil((i+1)*extent/k)).
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t extent, std::size_t k) {
  const std::size_t begin = (i * extent) / k;
  const std::size_t end = ((i + 1) * extent + k - 1) / k;
  return {begin, end};
}

template <typename T>
Tensor4<T> adaptive_avg_pool(const Tensor4<T>& x, std::size_t k) {
  if (k == 0) throw GeometryError("adaptive_avg_pool: grid must be >= 1");
  Tensor4<T> y(Shape4{x.n(), x.c(), k, k});
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T* src = x.plane(n, ch);
      for (std::size_t by = 0; by < k; ++by) {
        const auto [y0, y1] = adaptive_bin(by, x.h(), k);
        for (std::size_t bx = 0; bx < k; ++bx) {
          const auto [x0, x1] = adaptive_bin(bx, x.w(), k);
          T sum{0};
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) sum += src[yy * x.w() + xx];
          y(n, ch, by, bx) = sum / static_cast<T>((y1 - y0) * (x1 - x0));
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor4<T> adaptive_avg_pool_backward(const Shape4& in_shape, const Tensor4<T>& dy) {
  const std::size_t k = dy.h();
  if (dy.w() != k || dy.n() != in_shape.n || dy.c() != in_shape.c) {
    throw DimensionError(csrnet::detail::concat("adaptive_avg_pool_backward: gradient ", dy.shape().str(),
                                                " does not match input ", in_shape.str()));
  }
  Tensor4<T> dx(in_shape);
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    for (std::size_t ch = 0; ch < in_shape.c; ++ch) {
      T* dst = dx.plane(n, ch);
      for (std::size_t by = 0; by < k; ++by) {
        const auto [y0, y1] = adaptive_bin(by, in_shape.h, k);
        for (std::size_t bx = 0; bx < k; ++bx) {
          const auto [x0, x1] = adaptive_bin(bx, in_shape.w, k);
          const T g = dy(n, ch, by, bx) / static_cast<T>((y1 - y0) * (x1 - x0));
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) dst[yy * in_shape.w + xx] += g;
        }
      }
    }
  }
  return dx;
}

/// Per-channel spatial mean; returns (n, c, 1, 1).
template <typename T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
  Tensor4<T> y = Tensor4<T>::vec(x.n(), x.c());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T* p = x.plane(n, ch);
      T sum{0};
      for (std::size_t i = 0; i < P; ++i) sum += p[i];
      y(n, ch, 0, 0) = sum / static_cast<T>(P);
    }
  }
  return y;
}

template <typename T>
Tensor4<T> global_avg_pool_backward(const Shape4& in_shape, const Tensor4<T>& dy) {
  detail::require_channel_vec(dy.shape(), in_shape.n, in_shape.c, "global_avg_pool_backward", "gradient");
  Tensor4<T> dx(in_shape);
  const std::size_t P = in_shape.h * in_shape.w;
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    for (std::size_t ch = 0; ch < in_shape.c; ++ch) {
      const T g = dy(n, ch, 0, 0) / static_cast<T>(P);
      std::fill(dx.plane(n, ch), dx.plane(n, ch) + P, g);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// two-way softmax across a stacked pair of channel vectors

template <typename T>
struct Pair {
  Tensor4<T> first;
  Tensor4<T> second;
};

template <typename T>
Pair<T> softmax_pair(const Tensor4<T>& a, const Tensor4<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "softmax_pair");
  Pair<T> out{Tensor4<T>(a.shape()), Tensor4<T>(a.shape())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T m = std::max(a[i], b[i]);
    const T ea = std::exp(a[i] - m);
    const T eb = std::exp(b[i] - m);
    const T z = ea + eb;
    out.first[i] = ea / z;
    out.second[i] = eb / z;
  }
  return out;
}

/// Given the forward outputs (p, q) and their gradients, returns (da, db).
template <typename T>
Pair<T> softmax_pair_backward(const Pair<T>& out, const Tensor4<T>& dp, const Tensor4<T>& dq) {
  detail::require_same_shape(dp.shape(), out.first.shape(), "softmax_pair_backward");
  detail::require_same_shape(dq.shape(), out.first.shape(), "softmax_pair_backward");
  Pair<T> g{Tensor4<T>(dp.shape()), Tensor4<T>(dp.shape())};
  for (std::size_t i = 0; i < dp.size(); ++i) {
    const T p = out.first[i];
    const T q = out.second[i];
    const T dot = p * dp[i] + q * dq[i];
    g.first[i] = p * (dp[i] - dot);
    g.second[i] = q * (dq[i] - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// structural ops

template <typename T>
Tensor4<T> concat_channels(const std::vector<Tensor4<T>>& inputs) {
  if (inputs.empty()) throw DimensionError("concat_channels: no inputs");
  std::size_t total = 0;
  for (const auto& t : inputs) {
    if (t.n() != inputs[0].n() || t.h() != inputs[0].h() || t.w() != inputs[0].w()) {
      throw DimensionError(csrnet::detail::concat("concat_channels: shape mismatch ", inputs[0].shape().str(),
                                                  " vs ", t.shape().str()));
    }
    total += t.c();
  }
  const Shape4 s0 = inputs[0].shape();
  Tensor4<T> y(Shape4{s0.n, total, s0.h, s0.w});
  const std::size_t P = s0.plane();
  for (std::size_t n = 0; n < s0.n; ++n) {
    T* dst = y.sample(n);
    for (const auto& t : inputs) {
      std::copy(t.sample(n), t.sample(n) + t.c() * P, dst);
      dst += t.c() * P;
    }
  }
  return y;
}

/// Inverse of concat_channels: splits `dy` into pieces of the given widths.
template <typename T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& dy, const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (auto w : widths) total += w;
  if (total != dy.c()) {
    throw DimensionError(csrnet::detail::concat("split_channels: widths sum to ", total, " but tensor has ",
                                                dy.c(), " channels"));
  }
  std::vector<Tensor4<T>> parts;
  parts.reserve(widths.size());
  for (auto w : widths) parts.emplace_back(Shape4{dy.n(), w, dy.h(), dy.w()});
  const std::size_t P = dy.h() * dy.w();
  for (std::size_t n = 0; n < dy.n(); ++n) {
    const T* src = dy.sample(n);
    for (auto& p : parts) {
      std::copy(src, src + p.c() * P, p.sample(n));
      src += p.c() * P;
    }
  }
  return parts;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor4<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& b) {
  detail::require_same_shape(acc.shape(), b.shape(), "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

/// y(n,c,:,:) = s(n,c) * x(n,c,:,:); s is (n, c, 1, 1).
template <typename T>
Tensor4<T> scale_channels(const Tensor4<T>& x, const Tensor4<T>& s) {
  detail::require_channel_vec(s.shape(), x.n(), x.c(), "scale_channels", "scale");
  if (s.n() != x.n()) throw DimensionError("scale_channels: scale batch must equal input batch");
  Tensor4<T> y(x.shape());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T f = s(n, ch, 0, 0);
      const T* src = x.plane(n, ch);
      T* dst = y.plane(n, ch);
      for (std::size_t i = 0; i < P; ++i) dst[i] = f * src[i];
    }
  }
  return y;
}

template <typename T>
Pair<T> scale_channels_backward(const Tensor4<T>& x, const Tensor4<T>& s, const Tensor4<T>& dy) {
  detail::require_same_shape(dy.shape(), x.shape(), "scale_channels_backward");
  Pair<T> g{scale_channels(dy, s), Tensor4<T>(s.shape())};
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T* a = x.plane(n, ch);
      const T* d = dy.plane(n, ch);
      T sum{0};
      for (std::size_t i = 0; i < P; ++i) sum += a[i] * d[i];
      g.second(n, ch, 0, 0) = sum;
    }
  }
  return g;
}

}  // namespace csrnet::ops
