#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "veinseg/rng.hpp"
#include "veinseg/tensor.hpp"

namespace veinseg {

// Per-channel batch normalization over the N*H*W axis.
//
// Training mode standardizes with the mini-batch mean and population
// variance, applies the learned affine (gamma, beta) and updates the running
// estimates; inference mode standardizes with the running estimates.
// Statistics are accumulated in double regardless of T.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d(const std::string& prefix, int channels, double eps = 1e-5,
              double momentum = 0.9)
      : channels_(channels),
        eps_(eps),
        momentum_(momentum),
        gamma(prefix + ".gamma", {channels}, true, false),
        beta(prefix + ".beta", {channels}, true, false),
        running_mean(prefix + ".running_mean", {channels}, false, false),
        running_var(prefix + ".running_var", {channels}, false, false) {
    std::fill(gamma.value.begin(), gamma.value.end(), T(1));
    std::fill(running_var.value.begin(), running_var.value.end(), T(1));
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool training) {
    if (x.shape.c != channels_) {
      throw config_error("batch_norm " + gamma.name + ": input has " +
                         std::to_string(x.shape.c) + " channels, expected " +
                         std::to_string(channels_));
    }
    const std::size_t m =
        static_cast<std::size_t>(x.shape.n) * x.shape.h * x.shape.w;
    if (training && m < 2) {
      throw config_error("batch_norm " + gamma.name +
                         ": training mode needs at least 2 values per channel");
    }
    training_ = training;
    const int nb = x.shape.n, h = x.shape.h, w = x.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor4<T> y(x.shape);
    xhat_ = Tensor4<T>(x.shape);
    invstd_.assign(channels_, T(0));
    for (int c = 0; c < channels_; ++c) {
      double mean = 0.0, var = 0.0;
      if (training) {
        double sum = 0.0;
        for (int n = 0; n < nb; ++n) {
          const T* p = x.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i) sum += p[i];
        }
        mean = sum / static_cast<double>(m);
        double sq = 0.0;
        for (int n = 0; n < nb; ++n) {
          const T* p = x.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = p[i] - mean;
            sq += d * d;
          }
        }
        var = sq / static_cast<double>(m);
        running_mean.value[c] = static_cast<T>(
            momentum_ * running_mean.value[c] + (1.0 - momentum_) * mean);
        running_var.value[c] = static_cast<T>(
            momentum_ * running_var.value[c] + (1.0 - momentum_) * var);
      } else {
        mean = running_mean.value[c];
        var = running_var.value[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      invstd_[c] = inv;
      const T mu = static_cast<T>(mean);
      const T g = gamma.value[c];
      const T b = beta.value[c];
      for (int n = 0; n < nb; ++n) {
        const T* p = x.image_ptr(n) + static_cast<std::size_t>(c) * plane;
        T* xh = xhat_.image_ptr(n) + static_cast<std::size_t>(c) * plane;
        T* out = y.image_ptr(n) + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = (p[i] - mu) * inv;
          out[i] = g * xh[i] + b;
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    const int nb = gy.shape.n, h = gy.shape.h, w = gy.shape.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double m = static_cast<double>(nb) * h * w;
    Tensor4<T> gx(gy.shape);
    for (int c = 0; c < channels_; ++c) {
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int n = 0; n < nb; ++n) {
        const T* g = gy.image_ptr(n) + static_cast<std::size_t>(c) * plane;
        const T* xh = xhat_.image_ptr(n) + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_gy += g[i];
          sum_gy_xhat += g[i] * xh[i];
        }
      }
      gamma.grad[c] += static_cast<T>(sum_gy_xhat);
      beta.grad[c] += static_cast<T>(sum_gy);
      const double gam = gamma.value[c];
      const double inv = invstd_[c];
      if (training_) {
        const double mean_dxhat = gam * sum_gy / m;
        const double mean_dxhat_xhat = gam * sum_gy_xhat / m;
        for (int n = 0; n < nb; ++n) {
          const T* g = gy.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          const T* xh =
              xhat_.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          T* out = gx.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            out[i] = static_cast<T>(
                inv * (gam * g[i] - mean_dxhat - xh[i] * mean_dxhat_xhat));
          }
        }
      } else {
        const double k = gam * inv;
        for (int n = 0; n < nb; ++n) {
          const T* g = gy.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          T* out = gx.image_ptr(n) + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i)
            out[i] = static_cast<T>(k * g[i]);
        }
      }
    }
    return gx;
  }

  int channels() const { return channels_; }
  double eps() const { return eps_; }
  double momentum() const { return momentum_; }

  Parameter<T> gamma;
  Parameter<T> beta;
  Parameter<T> running_mean;
  Parameter<T> running_var;

 private:
  int channels_;
  double eps_;
  double momentum_;
  bool training_ = false;
  Tensor4<T> xhat_;
  std::vector<T> invstd_;
};

enum class ActKind { relu, leaky_relu, sigmoid };

template <typename T>
class Activation {
 public:
  explicit Activation(ActKind kind, double leaky_slope = 0.01)
      : kind_(kind), slope_(static_cast<T>(leaky_slope)) {}

  Tensor4<T> forward(const Tensor4<T>& x) {
    Tensor4<T> y(x.shape);
    switch (kind_) {
      case ActKind::relu:
        for (std::size_t i = 0; i < x.size(); ++i)
          y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
        cached_ = x;
        break;
      case ActKind::leaky_relu:
        for (std::size_t i = 0; i < x.size(); ++i)
          y.data[i] = x.data[i] > T(0) ? x.data[i] : slope_ * x.data[i];
        cached_ = x;
        break;
      case ActKind::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i)
          y.data[i] = static_cast<T>(
              1.0 / (1.0 + std::exp(-static_cast<double>(x.data[i]))));
        cached_ = y;  // derivative needs only the output
        break;
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    Tensor4<T> gx(gy.shape);
    switch (kind_) {
      case ActKind::relu:
        for (std::size_t i = 0; i < gy.size(); ++i)
          gx.data[i] = cached_.data[i] > T(0) ? gy.data[i] : T(0);
        break;
      case ActKind::leaky_relu:
        for (std::size_t i = 0; i < gy.size(); ++i)
          gx.data[i] =
              cached_.data[i] > T(0) ? gy.data[i] : slope_ * gy.data[i];
        break;
      case ActKind::sigmoid:
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const T s = cached_.data[i];
          gx.data[i] = gy.data[i] * s * (T(1) - s);
        }
        break;
    }
    return gx;
  }

  ActKind kind() const { return kind_; }

 private:
  ActKind kind_;
  T slope_;
  Tensor4<T> cached_;
};

// 2x2 max pooling with stride 2. Requires even spatial dims. Ties route the
// gradient to the first maximal element in scan order.
template <typename T>
class MaxPool2x2 {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) {
    if (x.shape.h % 2 != 0 || x.shape.w % 2 != 0) {
      throw config_error("max_pool_2x2: spatial dims must be even, got " +
                         x.shape.str());
    }
    in_shape_ = x.shape;
    const int oh = x.shape.h / 2, ow = x.shape.w / 2;
    Tensor4<T> y(Shape4{x.shape.n, x.shape.c, oh, ow});
    argmax_.assign(y.size(), 0);
    std::size_t oi = 0;
    for (int n = 0; n < x.shape.n; ++n) {
      for (int c = 0; c < x.shape.c; ++c) {
        for (int yy = 0; yy < oh; ++yy) {
          for (int xx = 0; xx < ow; ++xx, ++oi) {
            std::size_t best = x.index(n, c, 2 * yy, 2 * xx);
            T best_v = x.data[best];
            const std::size_t cand[3] = {x.index(n, c, 2 * yy, 2 * xx + 1),
                                         x.index(n, c, 2 * yy + 1, 2 * xx),
                                         x.index(n, c, 2 * yy + 1, 2 * xx + 1)};
            for (const std::size_t idx : cand) {
              if (x.data[idx] > best_v) {
                best_v = x.data[idx];
                best = idx;
              }
            }
            y.data[oi] = best_v;
            argmax_[oi] = best;
          }
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    Tensor4<T> gx(in_shape_);
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx.data[argmax_[i]] += gy.data[i];
    return gx;
  }

 private:
  Shape4 in_shape_{};
  std::vector<std::size_t> argmax_;
};

// Inverted dropout: training mode zeroes each element with probability
// `rate` and scales survivors by 1/(1-rate); inference mode is the identity.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) {
      throw config_error("dropout rate must be in [0, 1)");
    }
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool training, Rng* rng) {
    if (!training || rate_ == 0.0) {
      mask_.clear();
      return x;
    }
    if (rng == nullptr) {
      throw config_error("dropout: training mode requires an RNG");
    }
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    mask_.assign(x.size(), T(0));
    Tensor4<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (rng->uniform() >= rate_) {
        mask_[i] = scale;
        y.data[i] = x.data[i] * scale;
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& gy) {
    if (mask_.empty()) return gy;
    Tensor4<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx.data[i] = gy.data[i] * mask_[i];
    return gx;
  }

  double rate() const { return rate_; }

 private:
  double rate_;
  std::vector<T> mask_;
};

// Channel concatenation of two tensors with matching N, H, W.
template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h ||
      a.shape.w != b.shape.w) {
    throw config_error("concat_channels: shape mismatch " + a.shape.str() +
                       " vs " + b.shape.str());
  }
  Tensor4<T> y(Shape4{a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w});
  const std::size_t pa = static_cast<std::size_t>(a.shape.c) * a.shape.h * a.shape.w;
  const std::size_t pb = static_cast<std::size_t>(b.shape.c) * b.shape.h * b.shape.w;
  for (int n = 0; n < a.shape.n; ++n) {
    std::copy_n(a.image_ptr(n), pa, y.image_ptr(n));
    std::copy_n(b.image_ptr(n), pb, y.image_ptr(n) + pa);
  }
  return y;
}

// Splits the gradient of concat_channels back into the two operands.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> concat_channels_backward(
    const Tensor4<T>& gy, int channels_a) {
  const int cb = gy.shape.c - channels_a;
  Tensor4<T> ga(Shape4{gy.shape.n, channels_a, gy.shape.h, gy.shape.w});
  Tensor4<T> gb(Shape4{gy.shape.n, cb, gy.shape.h, gy.shape.w});
  const std::size_t pa = static_cast<std::size_t>(channels_a) * gy.shape.h * gy.shape.w;
  const std::size_t pb = static_cast<std::size_t>(cb) * gy.shape.h * gy.shape.w;
  for (int n = 0; n < gy.shape.n; ++n) {
    std::copy_n(gy.image_ptr(n), pa, ga.image_ptr(n));
    std::copy_n(gy.image_ptr(n) + pa, pb, gb.image_ptr(n));
  }
  return {std::move(ga), std::move(gb)};
}

}  // namespace veinseg
