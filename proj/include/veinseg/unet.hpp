#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "veinseg/conv.hpp"
#include "veinseg/layers.hpp"
#include "veinseg/rng.hpp"
#include "veinseg/tensor.hpp"

namespace veinseg {

struct UNetConfig {
  int base_filters = 16;
  int depth = 4;  // pooling levels
  double dropout_rate = 0.05;
  double l2_scale = 1e-4;
  int in_channels = 1;
  int out_channels = 1;
  ActKind hidden_activation = ActKind::relu;

  void validate() const {
    if (base_filters < 1) throw config_error("base_filters must be >= 1");
    if (depth < 1 || depth > 6) throw config_error("depth must be in [1, 6]");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw config_error("dropout_rate must be in [0, 1)");
    if (l2_scale < 0.0) throw config_error("l2_scale must be >= 0");
    if (in_channels < 1 || out_channels < 1)
      throw config_error("channel counts must be >= 1");
    if (hidden_activation == ActKind::sigmoid)
      throw config_error("hidden activation must be relu or leaky_relu");
  }
};

// U-Net with a 4-level contracting path of double 3x3 convolutions
// (filters doubling per level), a double-conv bottleneck followed by
// dropout, and an expansive path of 2x2 stride-2 transposed convolutions
// with skip concatenation and double convolutions halving the filters.
// Every convolution (ordinary and transposed, the 3x3 head included) is
// followed by batch normalization and then its activation; the head
// activation is a sigmoid producing a per-pixel probability map. At
// depth 4 this yields 19 ordinary and 4 transposed convolutions.
template <typename T>
class UNet {
 public:
  UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg), dropout_(cfg.dropout_rate) {
    cfg.validate();
    const int d = cfg.depth;
    const int base = cfg.base_filters;
    enc_.reserve(2 * d);
    pool_.resize(d);
    bott_.reserve(2);
    up_.reserve(d);
    dec_.reserve(2 * d);
    skip_channels_.resize(d);

    int ci = cfg.in_channels;
    for (int l = 0; l < d; ++l) {
      const int co = base << l;
      const std::string p = "enc" + std::to_string(l);
      enc_.emplace_back(p + ".conv1", p + ".bn1", ci, co,
                        cfg.hidden_activation, rng);
      enc_.emplace_back(p + ".conv2", p + ".bn2", co, co,
                        cfg.hidden_activation, rng);
      skip_channels_[l] = co;
      ci = co;
    }
    const int cb = base << d;
    bott_.emplace_back("bott.conv1", "bott.bn1", ci, cb,
                       cfg.hidden_activation, rng);
    bott_.emplace_back("bott.conv2", "bott.bn2", cb, cb,
                       cfg.hidden_activation, rng);
    int ct = cb;
    for (int i = 0; i < d; ++i) {
      const int lvl = d - 1 - i;
      const int co = base << lvl;
      const std::string p = "dec" + std::to_string(lvl);
      up_.emplace_back(p + ".up", p + ".up_bn", ct, co, cfg.hidden_activation,
                       rng);
      dec_.emplace_back(p + ".conv1", p + ".bn1", 2 * co, co,
                        cfg.hidden_activation, rng);
      dec_.emplace_back(p + ".conv2", p + ".bn2", co, co,
                        cfg.hidden_activation, rng);
      ct = co;
    }
    head_.emplace_back("head.conv", "head.bn", ct, cfg.out_channels,
                       ActKind::sigmoid, rng);
    register_params();
  }

  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  // Produces the per-pixel probability map. Spatial dims must be divisible
  // by 2^depth; inference mode is a pure function of (weights, input).
  Tensor4<T> forward(const Tensor4<T>& x, bool training,
                     Rng* dropout_rng = nullptr) {
    if (x.shape.c != cfg_.in_channels) {
      throw config_error("forward: input has " + std::to_string(x.shape.c) +
                         " channels, expected " +
                         std::to_string(cfg_.in_channels));
    }
    const int div = 1 << cfg_.depth;
    if (x.shape.h <= 0 || x.shape.w <= 0 || x.shape.h % div != 0 ||
        x.shape.w % div != 0) {
      throw config_error("forward: spatial dims " + x.shape.str() +
                         " must be positive and divisible by " +
                         std::to_string(div));
    }
    const int d = cfg_.depth;
    std::vector<Tensor4<T>> skips;
    skips.reserve(d);
    Tensor4<T> t = x;
    for (int l = 0; l < d; ++l) {
      t = enc_[2 * l].forward(t, training);
      t = enc_[2 * l + 1].forward(t, training);
      skips.push_back(t);
      t = pool_[l].forward(t);
    }
    t = bott_[0].forward(t, training);
    t = bott_[1].forward(t, training);
    t = dropout_.forward(t, training, dropout_rng);
    for (int i = 0; i < d; ++i) {
      const int lvl = d - 1 - i;
      Tensor4<T> u = up_[i].forward(t, training);
      t = concat_channels(skips[lvl], u);
      t = dec_[2 * i].forward(t, training);
      t = dec_[2 * i + 1].forward(t, training);
    }
    return head_[0].forward(t, training);
  }

  // Reverse-mode pass after a training-mode forward. Accumulates parameter
  // gradients and returns the gradient with respect to the input.
  Tensor4<T> backward(const Tensor4<T>& gy) {
    const int d = cfg_.depth;
    Tensor4<T> g = head_[0].backward(gy);
    std::vector<Tensor4<T>> skip_grads(d);
    for (int i = d - 1; i >= 0; --i) {
      const int lvl = d - 1 - i;
      g = dec_[2 * i + 1].backward(g);
      g = dec_[2 * i].backward(g);
      auto [gskip, gup] = concat_channels_backward(g, skip_channels_[lvl]);
      skip_grads[lvl] = std::move(gskip);
      g = up_[i].backward(gup);
    }
    g = dropout_.backward(g);
    g = bott_[1].backward(g);
    g = bott_[0].backward(g);
    for (int l = d - 1; l >= 0; --l) {
      g = pool_[l].backward(g);
      const Tensor4<T>& s = skip_grads[l];
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s.data[i];
      g = enc_[2 * l + 1].backward(g);
      g = enc_[2 * l].backward(g);
    }
    return g;
  }

  const std::vector<Parameter<T>*>& parameters() { return params_; }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* p : params_)
      if (p->trainable) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::size_t trainable_scalar_count() {
    std::size_t n = 0;
    for (const auto* p : params_)
      if (p->trainable) n += p->size();
    return n;
  }

  int ordinary_conv_count() const {
    return static_cast<int>(enc_.size() + bott_.size() + dec_.size() +
                            head_.size());
  }
  int transposed_conv_count() const { return static_cast<int>(up_.size()); }

  const UNetConfig& config() const { return cfg_; }

 private:
  struct ConvBlock {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    Activation<T> act;
    ConvBlock(const std::string& conv_name, const std::string& bn_name, int ci,
              int co, ActKind kind, Rng& rng)
        : conv(conv_name, ci, co, rng), bn(bn_name, co), act(kind) {}
    Tensor4<T> forward(const Tensor4<T>& x, bool training) {
      return act.forward(bn.forward(conv.forward(x), training));
    }
    Tensor4<T> backward(const Tensor4<T>& gy) {
      return conv.backward(bn.backward(act.backward(gy)));
    }
  };

  struct UpBlock {
    TransposedConv2d<T> up;
    BatchNorm2d<T> bn;
    Activation<T> act;
    UpBlock(const std::string& up_name, const std::string& bn_name, int ci,
            int co, ActKind kind, Rng& rng)
        : up(up_name, ci, co, rng), bn(bn_name, co), act(kind) {}
    Tensor4<T> forward(const Tensor4<T>& x, bool training) {
      return act.forward(bn.forward(up.forward(x), training));
    }
    Tensor4<T> backward(const Tensor4<T>& gy) {
      return up.backward(bn.backward(act.backward(gy)));
    }
  };

  void add_block_params(ConvBlock& b) {
    params_.push_back(&b.conv.kernel);
    params_.push_back(&b.conv.bias);
    params_.push_back(&b.bn.gamma);
    params_.push_back(&b.bn.beta);
    params_.push_back(&b.bn.running_mean);
    params_.push_back(&b.bn.running_var);
  }

  void register_params() {
    for (auto& b : enc_) add_block_params(b);
    for (auto& b : bott_) add_block_params(b);
    for (int i = 0; i < static_cast<int>(up_.size()); ++i) {
      auto& u = up_[i];
      params_.push_back(&u.up.kernel);
      params_.push_back(&u.up.bias);
      params_.push_back(&u.bn.gamma);
      params_.push_back(&u.bn.beta);
      params_.push_back(&u.bn.running_mean);
      params_.push_back(&u.bn.running_var);
      add_block_params(dec_[2 * i]);
      add_block_params(dec_[2 * i + 1]);
    }
    for (auto& b : head_) add_block_params(b);
    std::set<std::string> names;
    for (const auto* p : params_) {
      if (!names.insert(p->name).second) {
        throw config_error("duplicate parameter name " + p->name);
      }
    }
  }

  UNetConfig cfg_;
  std::vector<ConvBlock> enc_;
  std::vector<MaxPool2x2<T>> pool_;
  std::vector<ConvBlock> bott_;
  Dropout<T> dropout_;
  std::vector<UpBlock> up_;
  std::vector<ConvBlock> dec_;
  std::vector<ConvBlock> head_;
  std::vector<int> skip_channels_;
  std::vector<Parameter<T>*> params_;
};

}  // namespace veinseg
