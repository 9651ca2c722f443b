#pragma once

#include <Eigen/Core>

#include <cstring>
#include <string>
#include <vector>

#include "veinseg/rng.hpp"
#include "veinseg/tensor.hpp"

namespace veinseg {

template <typename T>
using MatRM =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

namespace detail {

// Unfolds one image (C,H,W) into a (C*9) x (H*W) patch matrix for a 3x3
// kernel with zero padding 1 and stride 1. Row r = (c*3+ky)*3+kx.
template <typename T>
void im2col_3x3(const T* img, int c, int h, int w, T* col) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* src_plane = img + static_cast<std::size_t>(ch) * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (static_cast<std::size_t>(ch) * 9 + ky * 3 + kx) * plane;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          T* dst = row + static_cast<std::size_t>(y) * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::memset(dst, 0, sizeof(T) * w);
            continue;
          }
          const T* src = src_plane + static_cast<std::size_t>(sy) * w;
          if (dx == 0) {
            std::memcpy(dst, src, sizeof(T) * w);
          } else if (dx < 0) {
            dst[0] = T(0);
            std::memcpy(dst + 1, src, sizeof(T) * (w - 1));
          } else {
            std::memcpy(dst, src + 1, sizeof(T) * (w - 1));
            dst[w - 1] = T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col_3x3: scatter-adds a (C*9) x (H*W) patch-gradient matrix
// back onto the (C,H,W) input gradient.
template <typename T>
void col2im_3x3(const T* col, int c, int h, int w, T* img) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    T* dst_plane = img + static_cast<std::size_t>(ch) * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row =
            col + (static_cast<std::size_t>(ch) * 9 + ky * 3 + kx) * plane;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* src = row + static_cast<std::size_t>(y) * w;
          T* dst = dst_plane + static_cast<std::size_t>(sy) * w;
          const int x0 = dx < 0 ? 1 : 0;
          const int x1 = dx > 0 ? w - 1 : w;
          for (int x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

template <typename T>
void kaiming_init(Parameter<T>& kernel, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : kernel.value) v = static_cast<T>(stddev * rng.normal());
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1 ("same"): spatial dims are
// preserved. Kernel layout (C_out, C_in, 3, 3), bias (C_out). Forward caches
// the input; backward accumulates kernel/bias gradients and returns the
// input gradient.
template <typename T>
class Conv2d {
 public:
  Conv2d(const std::string& prefix, int in_ch, int out_ch, Rng& rng)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        kernel(prefix + ".kernel", {out_ch, in_ch, 3, 3}, true, true),
        bias(prefix + ".bias", {out_ch}, true, false) {
    detail::kaiming_init(kernel, in_ch * 9, rng);
  }

  Tensor4<T> forward(const Tensor4<T>& x) {
    if (x.shape.c != in_ch_) {
      throw config_error("conv2d " + kernel.name + ": input has " +
                         std::to_string(x.shape.c) + " channels, expected " +
                         std::to_string(in_ch_));
    }
    if (x.shape.h <= 0 || x.shape.w <= 0) {
      throw config_error("conv2d " + kernel.name + ": zero-sized spatial dims");
    }
    cached_x_ = x;
    const int h = x.shape.h, w = x.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor4<T> y(Shape4{x.shape.n, out_ch_, h, w});
    col_.resize(static_cast<std::size_t>(in_ch_) * 9 * plane);
    CMapRM<T> kmat(kernel.value.data(), out_ch_, in_ch_ * 9);
    for (int n = 0; n < x.shape.n; ++n) {
      detail::im2col_3x3(x.image_ptr(n), in_ch_, h, w, col_.data());
      CMapRM<T> col(col_.data(), in_ch_ * 9, static_cast<int>(plane));
      MapRM<T> out(y.image_ptr(n), out_ch_, static_cast<int>(plane));
      out.noalias() = kmat * col;
      for (int c = 0; c < out_ch_; ++c) out.row(c).array() += bias.value[c];
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    const Tensor4<T>& x = cached_x_;
    const int h = x.shape.h, w = x.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor4<T> gx(x.shape);
    MapRM<T> gk(kernel.grad.data(), out_ch_, in_ch_ * 9);
    gcol_.resize(static_cast<std::size_t>(in_ch_) * 9 * plane);
    CMapRM<T> kmat(kernel.value.data(), out_ch_, in_ch_ * 9);
    for (int n = 0; n < x.shape.n; ++n) {
      detail::im2col_3x3(x.image_ptr(n), in_ch_, h, w, col_.data());
      CMapRM<T> col(col_.data(), in_ch_ * 9, static_cast<int>(plane));
      CMapRM<T> g(gy.image_ptr(n), out_ch_, static_cast<int>(plane));
      gk.noalias() += g * col.transpose();
      for (int c = 0; c < out_ch_; ++c) bias.grad[c] += g.row(c).sum();
      MapRM<T> gcol(gcol_.data(), in_ch_ * 9, static_cast<int>(plane));
      gcol.noalias() = kmat.transpose() * g;
      detail::col2im_3x3(gcol_.data(), in_ch_, h, w, gx.image_ptr(n));
    }
    return gx;
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

  Parameter<T> kernel;
  Parameter<T> bias;

 private:
  int in_ch_;
  int out_ch_;
  Tensor4<T> cached_x_;
  std::vector<T> col_;
  std::vector<T> gcol_;
};

// 2x2 transposed convolution with stride (2,2) and no padding: doubles the
// spatial dims. Defined as the adjoint of a stride-2 2x2 convolution with
// respect to its input. Kernel layout (C_in, C_out, 2, 2), bias (C_out).
// Because stride equals kernel size, each input pixel expands into a
// disjoint 2x2 output block.
template <typename T>
class TransposedConv2d {
 public:
  TransposedConv2d(const std::string& prefix, int in_ch, int out_ch, Rng& rng)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        kernel(prefix + ".kernel", {in_ch, out_ch, 2, 2}, true, true),
        bias(prefix + ".bias", {out_ch}, true, false) {
    detail::kaiming_init(kernel, in_ch * 4, rng);
  }

  Tensor4<T> forward(const Tensor4<T>& x) {
    if (x.shape.c != in_ch_) {
      throw config_error("transposed_conv2d " + kernel.name + ": input has " +
                         std::to_string(x.shape.c) + " channels, expected " +
                         std::to_string(in_ch_));
    }
    cached_x_ = x;
    const int h = x.shape.h, w = x.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor4<T> y(Shape4{x.shape.n, out_ch_, 2 * h, 2 * w});
    const MatRM<T> kmat = rearranged_kernel();
    MatRM<T> y2(out_ch_ * 4, static_cast<int>(plane));
    for (int n = 0; n < x.shape.n; ++n) {
      CMapRM<T> in(x.image_ptr(n), in_ch_, static_cast<int>(plane));
      y2.noalias() = kmat * in;
      T* out = y.image_ptr(n);
      for (int c = 0; c < out_ch_; ++c) {
        const T b = bias.value[c];
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            const T* src = y2.data() +
                           static_cast<std::size_t>(c * 4 + a * 2 + bb) * plane;
            for (int yy = 0; yy < h; ++yy) {
              T* dst = out + ((static_cast<std::size_t>(c) * 2 * h +
                               (2 * yy + a)) *
                              2 * w) +
                       bb;
              const T* s = src + static_cast<std::size_t>(yy) * w;
              for (int xx = 0; xx < w; ++xx) dst[2 * xx] = s[xx] + b;
            }
          }
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    const Tensor4<T>& x = cached_x_;
    const int h = x.shape.h, w = x.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor4<T> gx(x.shape);
    const MatRM<T> kmat = rearranged_kernel();
    MatRM<T> g2(out_ch_ * 4, static_cast<int>(plane));
    MatRM<T> gkmat = MatRM<T>::Zero(out_ch_ * 4, in_ch_);
    for (int n = 0; n < x.shape.n; ++n) {
      // Gather the strided output gradient into (C_out*4) x (H*W) form.
      const T* gout = gy.image_ptr(n);
      for (int c = 0; c < out_ch_; ++c) {
        T acc_bias = T(0);
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            T* dst = g2.data() +
                     static_cast<std::size_t>(c * 4 + a * 2 + bb) * plane;
            for (int yy = 0; yy < h; ++yy) {
              const T* s = gout + ((static_cast<std::size_t>(c) * 2 * h +
                                    (2 * yy + a)) *
                                   2 * w) +
                           bb;
              T* d = dst + static_cast<std::size_t>(yy) * w;
              for (int xx = 0; xx < w; ++xx) {
                d[xx] = s[2 * xx];
                acc_bias += s[2 * xx];
              }
            }
          }
        }
        bias.grad[c] += acc_bias;
      }
      CMapRM<T> in(x.image_ptr(n), in_ch_, static_cast<int>(plane));
      MapRM<T> gin(gx.image_ptr(n), in_ch_, static_cast<int>(plane));
      gin.noalias() = kmat.transpose() * g2;
      gkmat.noalias() += g2 * in.transpose();
    }
    // Scatter the rearranged kernel gradient back to (C_in, C_out, 2, 2).
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int co = 0; co < out_ch_; ++co) {
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            kernel.grad[((static_cast<std::size_t>(ci) * out_ch_ + co) * 2 +
                         a) *
                            2 +
                        bb] += gkmat(co * 4 + a * 2 + bb, ci);
          }
        }
      }
    }
    return gx;
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

  Parameter<T> kernel;
  Parameter<T> bias;

 private:
  MatRM<T> rearranged_kernel() const {
    MatRM<T> kmat(out_ch_ * 4, in_ch_);
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int co = 0; co < out_ch_; ++co) {
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            kmat(co * 4 + a * 2 + bb, ci) =
                kernel.value[((static_cast<std::size_t>(ci) * out_ch_ + co) *
                                  2 +
                              a) *
                                 2 +
                             bb];
          }
        }
      }
    }
    return kmat;
  }

  int in_ch_;
  int out_ch_;
  Tensor4<T> cached_x_;
};

}  // namespace veinseg
