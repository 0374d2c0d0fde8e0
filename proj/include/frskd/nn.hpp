// SPDX-License-Identifier: Apache-2.0
#pragma once
// Parameterized layers over the tensor primitives: dense and depthwise
// separable convolutions, batch normalization, linear heads, resizing and
// pooling. Parameters live in a registry under unique hierarchical names; the
// registration order is the initialization, checkpoint and update order.

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "frskd/conv_ops.hpp"
#include "frskd/rng.hpp"
#include "frskd/tensor.hpp"

namespace frskd {

enum class Mode { train, eval };

/// Ordered per-level feature maps, finest level first.
template <typename T>
using FeaturePyramid = std::vector<Tensor<T>>;

struct Cost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  void add(std::uint64_t p, std::uint64_t f) {
    params += p;
    flops += f;
  }
};

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  bool trainable = true;  // running statistics are registered non-trainable
  bool decay = false;     // weight decay applies to conv/linear weights only

  std::size_t size() const { return storage->size(); }

  Tensor<T> tensor() const {
    return Tensor<T>::from_storage(shape, std::shared_ptr<const std::vector<T>>(storage), trainable);
  }

  /// Direct access for optimizer updates and running-statistic refreshes.
  /// Callers must only mutate between recorded graphs.
  std::vector<T>& mutable_values() { return *storage; }
  const std::vector<T>& values() const { return *storage; }
};

template <typename T>
class ParamRegistry {
 public:
  using Ptr = std::shared_ptr<Parameter<T>>;

  Ptr add(std::string name, Shape shape, std::vector<T> init, bool trainable, bool decay) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    if (shape_size(shape) != init.size()) throw ShapeError("parameter '" + name + "': init size mismatch");
    auto p = std::make_shared<Parameter<T>>();
    p->name = std::move(name);
    p->shape = std::move(shape);
    p->storage = std::make_shared<std::vector<T>>(std::move(init));
    p->trainable = trainable;
    p->decay = decay;
    index_.emplace(p->name, params_.size());
    params_.push_back(p);
    return p;
  }

  const std::vector<Ptr>& list() const { return params_; }

  Ptr find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second];
  }

  std::uint64_t total_values(bool trainable_only = false) const {
    std::uint64_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p->trainable) n += p->size();
    }
    return n;
  }

 private:
  std::vector<Ptr> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Initializers: fan-in-scaled normal for conv/linear weights, zeros for
// biases, unit scale / zero shift for normalization.

template <typename T>
std::vector<T> he_normal(Rng& rng, std::size_t count, std::size_t fan_in) {
  std::vector<T> v(count);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return v;
}

// ---------------------------------------------------------------------------
// Batch normalization over [b,c,h,w]; biased (1/N) batch variance, running
// statistics updated with momentum 0.9, epsilon 1e-5.

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry<T>& reg, const std::string& prefix, std::size_t channels)
      : channels_(channels),
        scale_(reg.add(prefix + "/scale", {channels}, std::vector<T>(channels, T(1)), true, false)),
        shift_(reg.add(prefix + "/shift", {channels}, std::vector<T>(channels, T(0)), true, false)),
        run_mean_(reg.add(prefix + "/running_mean", {channels}, std::vector<T>(channels, T(0)), false, false)),
        run_var_(reg.add(prefix + "/running_var", {channels}, std::vector<T>(channels, T(1)), false, false)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    if (x.rank() != 4) throw ShapeError("batch_norm: input must be [b,c,h,w]");
    const std::size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (c != channels_) throw ShapeError("batch_norm: channel mismatch");
    const Shape cshape{1, c, 1, 1};
    const Tensor<T> eps_t = Tensor<T>::scalar(static_cast<T>(kEps));
    Tensor<T> xn;
    if (mode == Mode::train) {
      if (b * h * w < 2) throw ValueError("batch_norm: degenerate batch in train mode");
      Tensor<T> m = mean(x, Axes{0, 2, 3}, true);
      Tensor<T> centered = sub(x, m);
      Tensor<T> v = mean(square(centered), Axes{0, 2, 3}, true);
      xn = div(centered, frskd::sqrt(add(v, eps_t)));
      // Running statistics track the same biased batch moments.
      auto& rm = run_mean_->mutable_values();
      auto& rv = run_var_->mutable_values();
      const auto& mv = m.values();
      const auto& vv = v.values();
      for (std::size_t i = 0; i < c; ++i) {
        rm[i] = static_cast<T>(kMomentum) * rm[i] + static_cast<T>(1 - kMomentum) * mv[i];
        rv[i] = static_cast<T>(kMomentum) * rv[i] + static_cast<T>(1 - kMomentum) * vv[i];
      }
    } else {
      Tensor<T> rm = reshape(run_mean_->tensor(), cshape);
      Tensor<T> rv = reshape(run_var_->tensor(), cshape);
      xn = div(sub(x, rm), frskd::sqrt(add(rv, eps_t)));
    }
    return add(mul(xn, reshape(scale_->tensor(), cshape)), reshape(shift_->tensor(), cshape));
  }

  void count(Cost& cost, std::size_t h, std::size_t w, std::size_t batch = 1) const {
    cost.add(4 * channels_, 4ull * batch * channels_ * h * w);
  }

  std::size_t channels() const { return channels_; }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

 private:
  std::size_t channels_ = 0;
  typename ParamRegistry<T>::Ptr scale_, shift_, run_mean_, run_var_;
};

// ---------------------------------------------------------------------------
// Dense 2-d convolution layer.

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
              std::size_t ksize, std::size_t stride, std::size_t pad, bool with_bias)
      : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), pad_(pad) {
    const std::size_t fan_in = in_ch * ksize * ksize;
    weight_ = reg.add(prefix + "/weight", {out_ch, in_ch, ksize, ksize},
                      he_normal<T>(rng, out_ch * fan_in, fan_in), true, true);
    if (with_bias) bias_ = reg.add(prefix + "/bias", {out_ch}, std::vector<T>(out_ch, T(0)), true, false);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> w = weight_->tensor();
    if (bias_) {
      Tensor<T> b = bias_->tensor();
      return conv2d(x, w, &b, stride_, pad_);
    }
    return conv2d(x, w, nullptr, stride_, pad_);
  }

  Shape out_shape(const Shape& in) const {
    if (in.size() != 4 || in[1] != in_ch_) throw ShapeError("conv2d: channel mismatch");
    return {in[0], out_ch_, detail::conv_out_extent(in[2], ksize_, stride_, pad_, "conv2d"),
            detail::conv_out_extent(in[3], ksize_, stride_, pad_, "conv2d")};
  }

  void count(Cost& cost, std::size_t h, std::size_t w, std::size_t batch = 1) const {
    const std::size_t ho = detail::conv_out_extent(h, ksize_, stride_, pad_, "conv2d");
    const std::size_t wo = detail::conv_out_extent(w, ksize_, stride_, pad_, "conv2d");
    const std::uint64_t positions = static_cast<std::uint64_t>(batch) * ho * wo;
    std::uint64_t params = static_cast<std::uint64_t>(out_ch_) * in_ch_ * ksize_ * ksize_;
    std::uint64_t flops = positions * out_ch_ * 2ull * in_ch_ * ksize_ * ksize_;
    if (bias_) {
      params += out_ch_;
      flops += positions * out_ch_;
    }
    cost.add(params, flops);
  }

  std::size_t out_channels() const { return out_ch_; }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1, pad_ = 0;
  typename ParamRegistry<T>::Ptr weight_, bias_;
};

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution with optional bias, normalization, activation.
// Lateral layers use norm without bias; channel projections use bias alone.

template <typename T>
class PointwiseConv {
 public:
  PointwiseConv() = default;
  PointwiseConv(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                bool with_bias, bool with_norm, bool with_act)
      : conv_(reg, rng, prefix, in_ch, out_ch, 1, 1, 0, with_bias), with_norm_(with_norm), with_act_(with_act) {
    if (with_norm) norm_ = BatchNorm2d<T>(reg, prefix + "/norm", out_ch);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    Tensor<T> h = conv_.forward(x);
    if (with_norm_) h = norm_.forward(h, mode);
    if (with_act_) h = relu(h);
    return h;
  }

  void count(Cost& cost, std::size_t h, std::size_t w, std::size_t batch = 1) const {
    conv_.count(cost, h, w, batch);
    if (with_norm_) norm_.count(cost, h, w, batch);
    if (with_act_) cost.add(0, static_cast<std::uint64_t>(batch) * conv_.out_channels() * h * w);
  }

  std::size_t out_channels() const { return conv_.out_channels(); }

 private:
  Conv2dLayer<T> conv_;
  BatchNorm2d<T> norm_;
  bool with_norm_ = false, with_act_ = false;
};

// ---------------------------------------------------------------------------
// Depthwise separable convolution: per-channel 3x3 (stride 1, padding 1),
// pointwise 1x1, then optional normalization and ReLU. Spatial extents are
// preserved.

template <typename T>
class DepthwiseSeparableConv {
 public:
  DepthwiseSeparableConv() = default;
  DepthwiseSeparableConv(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_ch,
                         std::size_t out_ch, bool with_norm = true, bool with_act = true)
      : in_ch_(in_ch), out_ch_(out_ch), with_norm_(with_norm), with_act_(with_act) {
    dw_ = reg.add(prefix + "/depthwise", {in_ch, 1, 3, 3}, he_normal<T>(rng, in_ch * 9, 9), true, true);
    pw_ = reg.add(prefix + "/pointwise", {out_ch, in_ch, 1, 1}, he_normal<T>(rng, out_ch * in_ch, in_ch), true,
                  true);
    if (with_norm) {
      norm_ = BatchNorm2d<T>(reg, prefix + "/norm", out_ch);
    } else {
      pw_bias_ = reg.add(prefix + "/bias", {out_ch}, std::vector<T>(out_ch, T(0)), true, false);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    if (x.rank() != 4 || x.shape()[1] != in_ch_) throw ShapeError("depthwise_separable_conv: channel mismatch");
    Tensor<T> h = depthwise_conv3x3(x, dw_->tensor(), nullptr);
    if (pw_bias_) {
      Tensor<T> b = pw_bias_->tensor();
      h = conv2d(h, pw_->tensor(), &b, 1, 0);
    } else {
      h = conv2d(h, pw_->tensor(), nullptr, 1, 0);
    }
    if (with_norm_) h = norm_.forward(h, mode);
    if (with_act_) h = relu(h);
    return h;
  }

  void count(Cost& cost, std::size_t h, std::size_t w, std::size_t batch = 1) const {
    const std::uint64_t positions = static_cast<std::uint64_t>(batch) * h * w;
    std::uint64_t params = static_cast<std::uint64_t>(in_ch_) * 9 + static_cast<std::uint64_t>(out_ch_) * in_ch_;
    std::uint64_t flops = positions * in_ch_ * 18ull + positions * out_ch_ * 2ull * in_ch_;
    if (pw_bias_) {
      params += out_ch_;
      flops += positions * out_ch_;
    }
    cost.add(params, flops);
    if (with_norm_) norm_.count(cost, h, w, batch);
    if (with_act_) cost.add(0, positions * out_ch_);
  }

  std::size_t out_channels() const { return out_ch_; }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0;
  bool with_norm_ = true, with_act_ = true;
  typename ParamRegistry<T>::Ptr dw_, pw_, pw_bias_;
  BatchNorm2d<T> norm_;
};

// ---------------------------------------------------------------------------
// Linear layer: out = x . weight^T + bias, weight [k,f].

template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_features,
              std::size_t out_features)
      : in_(in_features), out_(out_features) {
    weight_ = reg.add(prefix + "/weight", {out_features, in_features},
                      he_normal<T>(rng, out_features * in_features, in_features), true, true);
    bias_ = reg.add(prefix + "/bias", {out_features}, std::vector<T>(out_features, T(0)), true, false);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.shape()[1] != in_) throw ShapeError("linear: dimension mismatch");
    return add(matmul(x, transpose2d(weight_->tensor())), reshape(bias_->tensor(), {1, out_}));
  }

  void count(Cost& cost, std::size_t batch = 1) const {
    cost.add(static_cast<std::uint64_t>(out_) * in_ + out_,
             static_cast<std::uint64_t>(batch) * (out_ * 2ull * in_ + out_));
  }

  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  typename ParamRegistry<T>::Ptr weight_, bias_;
};

// ---------------------------------------------------------------------------
// Resizing and pooling surface.

enum class ResizeMode { bilinear_up, maxpool_down };

template <typename T>
Tensor<T> resize(const Tensor<T>& x, std::size_t ht, std::size_t wt, ResizeMode mode) {
  if (x.rank() != 4) throw ShapeError("resize: input must be [b,c,h,w]");
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  if (mode == ResizeMode::bilinear_up) {
    if (ht < h || wt < w) throw ShapeError("resize: bilinear_up cannot shrink extents");
    return bilinear_up(x, ht, wt);
  }
  if (ht > h || wt > w) throw ShapeError("resize: maxpool_down cannot grow extents");
  return adaptive_max_pool(x, ht, wt);
}

/// Mean over spatial positions: [b,c,h,w] -> [b,c].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be [b,c,h,w]");
  return mean(x, Axes{2, 3});
}

}  // namespace frskd
