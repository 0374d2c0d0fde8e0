// SPDX-License-Identifier: Apache-2.0
#pragma once
// Spatial primitives: dense 2-d convolution (im2col + GEMM), depthwise 3x3
// convolution, bilinear upsampling and adaptive max pooling, each with a
// recorded backward. Work is parallelized over independent images or planes,
// and cross-image accumulations are summed in index order, so results do not
// depend on the thread count.

#include <cstddef>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "frskd/tensor.hpp"

namespace frskd {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvDims {
  std::size_t batch, in_ch, h, w;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;
  std::size_t ho, wo;
  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* what) {
  const std::size_t padded = in + 2 * pad;
  if (padded < k) throw ShapeError(std::string(what) + ": kernel exceeds padded input");
  if ((padded - k) % stride != 0) throw ShapeError(std::string(what) + ": non-integral output extent");
  return (padded - k) / stride + 1;
}

// Patch matrix for one image, row-major [positions x patch]; out-of-bounds
// taps read as zero.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::size_t kk = d.kh * d.kw;
  for (std::size_t oy = 0; oy < d.ho; ++oy) {
    for (std::size_t ox = 0; ox < d.wo; ++ox) {
      T* row = col + (oy * d.wo + ox) * d.patch();
      for (std::size_t c = 0; c < d.in_ch; ++c) {
        const T* plane = x + c * d.h * d.w;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            T v = T(0);
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(d.h) && ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w)) {
              v = plane[static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)];
            }
            row[c * kk + ky * d.kw + kx] = v;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* gx) {
  const std::size_t kk = d.kh * d.kw;
  for (std::size_t oy = 0; oy < d.ho; ++oy) {
    for (std::size_t ox = 0; ox < d.wo; ++ox) {
      const T* row = col + (oy * d.wo + ox) * d.patch();
      for (std::size_t c = 0; c < d.in_ch; ++c) {
        T* plane = gx + c * d.h * d.w;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
            plane[static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)] += row[c * kk + ky * d.kw + kx];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of [b,ci,h,w] with kernel [co,ci,kh,kw] plus optional
/// bias [co]. Gradients are defined for input, kernel and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::type_identity_t<const Tensor<T>*> bias,
                 std::size_t stride, std::size_t padding) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be [b,ci,h,w]");
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [co,ci,kh,kw]");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvDims d;
  d.batch = input.shape()[0];
  d.in_ch = input.shape()[1];
  d.h = input.shape()[2];
  d.w = input.shape()[3];
  d.out_ch = kernel.shape()[0];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.stride = stride;
  d.pad = padding;
  if (kernel.shape()[1] != d.in_ch) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.shape()[1]) + " input channels, got " +
                     std::to_string(d.in_ch));
  }
  if (bias && bias->shape() != Shape{d.out_ch}) throw ShapeError("conv2d: bias must be [out_ch]");
  d.ho = detail::conv_out_extent(d.h, d.kh, stride, padding, "conv2d");
  d.wo = detail::conv_out_extent(d.w, d.kw, stride, padding, "conv2d");

  const std::size_t P = d.positions(), K = d.patch();
  std::vector<T> out(d.batch * d.out_ch * P);
  {
    const T* kptr = kernel.data();
    const T* xptr = input.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(d.batch); ++i) {
      std::vector<T> col(P * K);
      detail::im2col(xptr + i * d.in_ch * d.h * d.w, d, col.data());
      Eigen::Map<const detail::RowMat<T>> Km(kptr, d.out_ch, K);
      Eigen::Map<const detail::RowMat<T>> Cm(col.data(), P, K);
      Eigen::Map<detail::RowMat<T>> Om(out.data() + i * d.out_ch * P, d.out_ch, P);
      Om.noalias() = Km * Cm.transpose();
    }
    if (bias) {
      const T* bptr = bias->data();
      for (std::size_t i = 0; i < d.batch; ++i)
        for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
          T* row = out.data() + (i * d.out_ch + oc) * P;
          for (std::size_t p = 0; p < P; ++p) row[p] += bptr[oc];
        }
    }
  }

  const Tensor<T> xv = input.detach();
  const Tensor<T> kv = kernel.detach();
  std::vector<Tensor<T>> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  const bool need_x = input.requires_grad();
  const bool has_bias = bias != nullptr;

  auto bw = [d, xv, kv, need_x, has_bias, P, K](const Tensor<T>& g) {
    const T* gptr = g.data();
    std::vector<Tensor<T>> grads(has_bias ? 3 : 2);

    std::vector<T> gx;
    if (need_x) gx.assign(xv.size(), T(0));
    std::vector<std::vector<T>> gk_partial(d.batch);

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(d.batch); ++i) {
      std::vector<T> col(P * K);
      detail::im2col(xv.data() + i * d.in_ch * d.h * d.w, d, col.data());
      Eigen::Map<const detail::RowMat<T>> Gm(gptr + i * d.out_ch * P, d.out_ch, P);
      Eigen::Map<const detail::RowMat<T>> Cm(col.data(), P, K);

      gk_partial[i].resize(d.out_ch * K);
      Eigen::Map<detail::RowMat<T>>(gk_partial[i].data(), d.out_ch, K).noalias() = Gm * Cm;

      if (need_x) {
        std::vector<T> gcol(P * K);
        Eigen::Map<const detail::RowMat<T>> Km(kv.data(), d.out_ch, K);
        Eigen::Map<detail::RowMat<T>>(gcol.data(), P, K).noalias() = Gm.transpose() * Km;
        detail::col2im_add(gcol.data(), d, gx.data() + i * d.in_ch * d.h * d.w);
      }
    }

    std::vector<T> gk(d.out_ch * K, T(0));
    for (std::size_t i = 0; i < d.batch; ++i)
      for (std::size_t j = 0; j < gk.size(); ++j) gk[j] += gk_partial[i][j];
    grads[1] = Tensor<T>::create(kv.shape(), std::move(gk));
    if (need_x) grads[0] = Tensor<T>::create(xv.shape(), std::move(gx));

    if (has_bias) {
      std::vector<T> gb(d.out_ch, T(0));
      for (std::size_t i = 0; i < d.batch; ++i)
        for (std::size_t oc = 0; oc < d.out_ch; ++oc) {
          const T* row = gptr + (i * d.out_ch + oc) * P;
          for (std::size_t p = 0; p < P; ++p) gb[oc] += row[p];
        }
      grads[2] = Tensor<T>::create({d.out_ch}, std::move(gb));
    }
    return grads;
  };

  return Tensor<T>::make_result({d.batch, d.out_ch, d.ho, d.wo}, std::move(out), "conv2d", std::move(parents),
                                std::move(bw));
}

/// Per-channel 3x3 convolution, stride 1, padding 1; kernel [c,1,3,3],
/// optional bias [c]. Spatial extents are preserved.
template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& input, const Tensor<T>& kernel,
                            std::type_identity_t<const Tensor<T>*> bias) {
  if (input.rank() != 4) throw ShapeError("depthwise_conv3x3: input must be [b,c,h,w]");
  const std::size_t b = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  if (kernel.shape() != Shape{c, 1, 3, 3}) {
    throw ShapeError("depthwise_conv3x3: kernel must be [" + std::to_string(c) + ",1,3,3]");
  }
  if (bias && bias->shape() != Shape{c}) throw ShapeError("depthwise_conv3x3: bias must be [c]");

  const std::size_t plane = h * w;
  std::vector<T> out(b * c * plane);
  const T* xptr = input.data();
  const T* kptr = kernel.data();
  const T* bptr = bias ? bias->data() : nullptr;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(b * c); ++pi) {
    const std::size_t ch = static_cast<std::size_t>(pi) % c;
    const T* x = xptr + pi * plane;
    const T* k = kptr + ch * 9;
    T* o = out.data() + pi * plane;
    const T b0 = bptr ? bptr[ch] : T(0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xcol = 0; xcol < w; ++xcol) {
        T acc = b0;
        for (int ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + ky - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xcol) + kx - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            acc += k[ky * 3 + kx] * x[iy * w + ix];
          }
        }
        o[y * w + xcol] = acc;
      }
    }
  }

  const Tensor<T> xv = input.detach();
  const Tensor<T> kv = kernel.detach();
  std::vector<Tensor<T>> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  const bool need_x = input.requires_grad();
  const bool has_bias = bias != nullptr;

  auto bw = [b, c, h, w, plane, xv, kv, need_x, has_bias](const Tensor<T>& g) {
    const T* gptr = g.data();
    std::vector<Tensor<T>> grads(has_bias ? 3 : 2);
    std::vector<T> gx;
    if (need_x) gx.assign(xv.size(), T(0));
    std::vector<std::vector<T>> gk_partial(b * c);

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(b * c); ++pi) {
      const std::size_t ch = static_cast<std::size_t>(pi) % c;
      const T* x = xv.data() + pi * plane;
      const T* k = kv.data() + ch * 9;
      const T* go = gptr + pi * plane;
      gk_partial[pi].assign(9, T(0));
      T* gkp = gk_partial[pi].data();
      T* gxp = need_x ? gx.data() + pi * plane : nullptr;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xcol = 0; xcol < w; ++xcol) {
          const T gv = go[y * w + xcol];
          for (int ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + ky - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xcol) + kx - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              gkp[ky * 3 + kx] += gv * x[iy * w + ix];
              if (gxp) gxp[iy * w + ix] += gv * k[ky * 3 + kx];
            }
          }
        }
      }
    }

    std::vector<T> gk(c * 9, T(0));
    for (std::size_t pi = 0; pi < b * c; ++pi) {
      const std::size_t ch = pi % c;
      for (int j = 0; j < 9; ++j) gk[ch * 9 + j] += gk_partial[pi][j];
    }
    grads[1] = Tensor<T>::create(kv.shape(), std::move(gk));
    if (need_x) grads[0] = Tensor<T>::create(xv.shape(), std::move(gx));
    if (has_bias) {
      std::vector<T> gb(c, T(0));
      for (std::size_t pi = 0; pi < b * c; ++pi) {
        const T* go = gptr + pi * plane;
        T acc = T(0);
        for (std::size_t j = 0; j < plane; ++j) acc += go[j];
        gb[pi % c] += acc;
      }
      grads[2] = Tensor<T>::create({c}, std::move(gb));
    }
    return grads;
  };

  return Tensor<T>::make_result({b, c, h, w}, std::move(out), "depthwise_conv3x3", std::move(parents),
                                std::move(bw));
}

namespace detail {

// Half-pixel source coordinates with edge clamping.
struct LerpTap {
  std::size_t lo, hi;
  double t;
};

inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double fl = std::floor(src);
    const double t = src - fl;
    const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(fl);
    const auto clamp = [in](std::ptrdiff_t v) {
      if (v < 0) return std::size_t(0);
      if (v >= static_cast<std::ptrdiff_t>(in)) return in - 1;
      return static_cast<std::size_t>(v);
    };
    taps[o] = {clamp(i0), clamp(i0 + 1), t};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling of [b,c,h,w] to [b,c,ht,wt] with ht >= h and wt >= w.
template <typename T>
Tensor<T> bilinear_up(const Tensor<T>& input, std::size_t ht, std::size_t wt) {
  if (input.rank() != 4) throw ShapeError("bilinear_up: input must be [b,c,h,w]");
  const std::size_t b = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  if (ht < h || wt < w) throw ShapeError("bilinear_up: target extent smaller than source");

  const auto ty = detail::bilinear_taps(h, ht);
  const auto tx = detail::bilinear_taps(w, wt);
  const std::size_t in_plane = h * w, out_plane = ht * wt;
  std::vector<T> out(b * c * out_plane);
  const T* xptr = input.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(b * c); ++pi) {
    const T* x = xptr + pi * in_plane;
    T* o = out.data() + pi * out_plane;
    for (std::size_t y = 0; y < ht; ++y) {
      const auto& ay = ty[y];
      for (std::size_t xcol = 0; xcol < wt; ++xcol) {
        const auto& ax = tx[xcol];
        const T v00 = x[ay.lo * w + ax.lo], v01 = x[ay.lo * w + ax.hi];
        const T v10 = x[ay.hi * w + ax.lo], v11 = x[ay.hi * w + ax.hi];
        const T top = v00 + static_cast<T>(ax.t) * (v01 - v00);
        const T bot = v10 + static_cast<T>(ax.t) * (v11 - v10);
        o[y * wt + xcol] = top + static_cast<T>(ay.t) * (bot - top);
      }
    }
  }

  const Shape in_shape = input.shape();
  auto bw = [b, c, h, w, ht, wt, ty, tx, in_plane, out_plane, in_shape](const Tensor<T>& g) {
    std::vector<T> gx(b * c * in_plane, T(0));
    const T* gptr = g.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(b * c); ++pi) {
      const T* go = gptr + pi * out_plane;
      T* gp = gx.data() + pi * in_plane;
      for (std::size_t y = 0; y < ht; ++y) {
        const auto& ay = ty[y];
        for (std::size_t xcol = 0; xcol < wt; ++xcol) {
          const auto& ax = tx[xcol];
          const T gv = go[y * wt + xcol];
          const T wy1 = static_cast<T>(ay.t), wy0 = T(1) - wy1;
          const T wx1 = static_cast<T>(ax.t), wx0 = T(1) - wx1;
          gp[ay.lo * w + ax.lo] += gv * wy0 * wx0;
          gp[ay.lo * w + ax.hi] += gv * wy0 * wx1;
          gp[ay.hi * w + ax.lo] += gv * wy1 * wx0;
          gp[ay.hi * w + ax.hi] += gv * wy1 * wx1;
        }
      }
    }
    return std::vector<Tensor<T>>{Tensor<T>::create(in_shape, std::move(gx))};
  };
  return Tensor<T>::make_result({b, c, ht, wt}, std::move(out), "bilinear_up", {input}, std::move(bw));
}

/// Adaptive max pooling of [b,c,h,w] down to [b,c,ht,wt] with ht <= h and
/// wt <= w. Input extents are partitioned into contiguous windows; within a
/// window the first maximum in row-major order receives the gradient.
template <typename T>
Tensor<T> adaptive_max_pool(const Tensor<T>& input, std::size_t ht, std::size_t wt) {
  if (input.rank() != 4) throw ShapeError("adaptive_max_pool: input must be [b,c,h,w]");
  const std::size_t b = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  if (ht > h || wt > w) throw ShapeError("adaptive_max_pool: target extent larger than source");
  if (ht == 0 || wt == 0) throw ShapeError("adaptive_max_pool: zero target extent");

  const auto bound = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  const std::size_t in_plane = h * w, out_plane = ht * wt;
  std::vector<T> out(b * c * out_plane);
  std::vector<std::size_t> argmax(b * c * out_plane);
  const T* xptr = input.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(b * c); ++pi) {
    const T* x = xptr + pi * in_plane;
    T* o = out.data() + pi * out_plane;
    std::size_t* am = argmax.data() + pi * out_plane;
    for (std::size_t oy = 0; oy < ht; ++oy) {
      const std::size_t y0 = bound(oy, h, ht), y1 = bound(oy + 1, h, ht);
      for (std::size_t ox = 0; ox < wt; ++ox) {
        const std::size_t x0 = bound(ox, w, wt), x1 = bound(ox + 1, w, wt);
        T best = x[y0 * w + x0];
        std::size_t best_idx = y0 * w + x0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xc = x0; xc < x1; ++xc) {
            const std::size_t idx = y * w + xc;
            if (x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        o[oy * wt + ox] = best;
        am[oy * wt + ox] = best_idx;
      }
    }
  }

  const Shape in_shape = input.shape();
  auto bw = [b, c, in_plane, out_plane, argmax, in_shape](const Tensor<T>& g) {
    std::vector<T> gx(b * c * in_plane, T(0));
    const T* gptr = g.data();
    for (std::size_t pi = 0; pi < b * c; ++pi) {
      const T* go = gptr + pi * out_plane;
      const std::size_t* am = argmax.data() + pi * out_plane;
      T* gp = gx.data() + pi * in_plane;
      for (std::size_t j = 0; j < out_plane; ++j) gp[am[j]] += go[j];
    }
    return std::vector<Tensor<T>>{Tensor<T>::create(in_shape, std::move(gx))};
  };
  return Tensor<T>::make_result({b, c, ht, wt}, std::move(out), "adaptive_max_pool", {input}, std::move(bw));
}

}  // namespace frskd
