// SPDX-License-Identifier: Apache-2.0
#pragma once
// Classifier backbones: small wide-residual and basic-residual families that
// expose one feature map per block group plus class logits. Spatial extents
// halve between consecutive groups.
//
// Output extents of every convolution are exact (no floor division), so the
// downsampling positions use 2x2 stride-2 kernels; 3x3 stride-2 padding-1
// would not produce integral extents on the even inputs these networks take.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "frskd/nn.hpp"

namespace frskd {

struct BackboneConfig {
  enum class Family { wrn, resnet_basic };
  Family family = Family::wrn;
  std::size_t depth = 16;
  std::vector<std::size_t> channels;  // c_1..c_n, non-decreasing
  std::size_t input_extent = 32;
  std::size_t classes = 100;

  std::size_t levels() const { return channels.size(); }

  std::size_t blocks_per_group() const {
    if (family == Family::wrn) return (depth - 4) / 6;
    return (depth - 2) / (2 * levels());
  }

  void validate() const {
    const std::size_t n = levels();
    if (n < 3) throw ConfigError("backbone: at least 3 block groups required");
    for (std::size_t i = 1; i < n; ++i) {
      if (channels[i] < channels[i - 1]) throw ConfigError("backbone: channels must be non-decreasing");
    }
    for (std::size_t c : channels) {
      if (c == 0) throw ConfigError("backbone: zero channel count");
    }
    std::size_t div = 1;
    for (std::size_t i = 1; i < n; ++i) div *= 2;
    if (input_extent == 0 || input_extent % div != 0) {
      throw ConfigError("backbone: input extent must be divisible by 2^(levels-1)");
    }
    if (classes < 2) throw ConfigError("backbone: need at least 2 classes");
    if (family == Family::wrn) {
      if (depth < 10 || (depth - 4) % 6 != 0) throw ConfigError("backbone: wrn depth must be 6k+4, k >= 1");
    } else {
      if (depth < 2 + 2 * n || (depth - 2) % (2 * n) != 0) {
        throw ConfigError("backbone: resnet depth must be 2 + 2*levels*k");
      }
    }
  }

  std::size_t stem_channels() const {
    if (family == Family::resnet_basic) return channels[0];
    const std::size_t half = channels[0] / 2;
    return half < 4 ? 4 : half;
  }

  /// Spatial extent of pyramid level i (0-based).
  std::size_t level_extent(std::size_t i) const {
    std::size_t e = input_extent;
    for (std::size_t k = 0; k < i; ++k) e /= 2;
    return e;
  }
};

namespace detail {

// Pre-activation residual block (wide-resnet style).
template <typename T>
class PreactBlock {
 public:
  PreactBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
              std::size_t stride)
      : bn1_(reg, prefix + "/bn1", in_ch),
        bn2_(reg, prefix + "/bn2", out_ch),
        projects_(in_ch != out_ch || stride != 1) {
    const std::size_t k1 = stride == 1 ? 3 : 2;
    conv1_ = Conv2dLayer<T>(reg, rng, prefix + "/conv1", in_ch, out_ch, k1, stride, k1 == 3 ? 1 : 0, false);
    conv2_ = Conv2dLayer<T>(reg, rng, prefix + "/conv2", out_ch, out_ch, 3, 1, 1, false);
    if (projects_) {
      const std::size_t ks = stride == 1 ? 1 : 2;
      shortcut_ = Conv2dLayer<T>(reg, rng, prefix + "/shortcut", in_ch, out_ch, ks, stride, 0, false);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    Tensor<T> a = relu(bn1_.forward(x, mode));
    Tensor<T> h = conv1_.forward(a);
    h = conv2_.forward(relu(bn2_.forward(h, mode)));
    Tensor<T> s = projects_ ? shortcut_.forward(a) : x;
    return add(h, s);
  }

  void count(Cost& cost, std::size_t h, std::size_t w) const {
    bn1_.count(cost, h, w);
    cost.add(0, 0);  // relu counted below with known extents
    cost.flops += static_cast<std::uint64_t>(h) * w * bn1_.channels();
    conv1_.count(cost, h, w);
    const std::size_t ho = h / (conv1_.stride()), wo = w / (conv1_.stride());
    bn2_.count(cost, ho, wo);
    cost.flops += static_cast<std::uint64_t>(ho) * wo * bn2_.channels();
    conv2_.count(cost, ho, wo);
    if (projects_) shortcut_.count(cost, h, w);
    cost.flops += static_cast<std::uint64_t>(ho) * wo * conv2_.out_channels();  // residual add
  }

 private:
  BatchNorm2d<T> bn1_, bn2_;
  Conv2dLayer<T> conv1_, conv2_, shortcut_;
  bool projects_ = false;
};

// Post-activation basic residual block (resnet v1 style).
template <typename T>
class BasicBlock {
 public:
  BasicBlock(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
             std::size_t stride)
      : bn1_(reg, prefix + "/bn1", out_ch), bn2_(reg, prefix + "/bn2", out_ch),
        projects_(in_ch != out_ch || stride != 1) {
    const std::size_t k1 = stride == 1 ? 3 : 2;
    conv1_ = Conv2dLayer<T>(reg, rng, prefix + "/conv1", in_ch, out_ch, k1, stride, k1 == 3 ? 1 : 0, false);
    conv2_ = Conv2dLayer<T>(reg, rng, prefix + "/conv2", out_ch, out_ch, 3, 1, 1, false);
    if (projects_) {
      const std::size_t ks = stride == 1 ? 1 : 2;
      shortcut_ = Conv2dLayer<T>(reg, rng, prefix + "/shortcut", in_ch, out_ch, ks, stride, 0, false);
      bn_sc_ = BatchNorm2d<T>(reg, prefix + "/bn_shortcut", out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    Tensor<T> h = relu(bn1_.forward(conv1_.forward(x), mode));
    h = bn2_.forward(conv2_.forward(h), mode);
    Tensor<T> s = projects_ ? bn_sc_.forward(shortcut_.forward(x), mode) : x;
    return relu(add(h, s));
  }

  void count(Cost& cost, std::size_t h, std::size_t w) const {
    conv1_.count(cost, h, w);
    const std::size_t ho = h / conv1_.stride(), wo = w / conv1_.stride();
    bn1_.count(cost, ho, wo);
    conv2_.count(cost, ho, wo);
    bn2_.count(cost, ho, wo);
    if (projects_) {
      shortcut_.count(cost, h, w);
      bn_sc_.count(cost, ho, wo);
    }
    cost.flops += 3ull * ho * wo * conv2_.out_channels();  // two relus + residual add
  }

 private:
  BatchNorm2d<T> bn1_, bn2_, bn_sc_;
  Conv2dLayer<T> conv1_, conv2_, shortcut_;
  bool projects_ = false;
};

}  // namespace detail

template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x6261636bULL));  // "back"
    const std::size_t n = cfg_.levels();
    stem_ = Conv2dLayer<T>(reg_, rng, "stem", 3, cfg_.stem_channels(), 3, 1, 1, false);
    std::size_t in_ch = cfg_.stem_channels();
    for (std::size_t g = 0; g < n; ++g) {
      const std::size_t out_ch = cfg_.channels[g];
      std::vector<BlockT> group;
      for (std::size_t b = 0; b < cfg_.blocks_per_group(); ++b) {
        const std::size_t stride = (g > 0 && b == 0) ? 2 : 1;
        const std::string prefix = "group" + std::to_string(g + 1) + "/block" + std::to_string(b);
        if (cfg_.family == BackboneConfig::Family::wrn) {
          group.emplace_back(std::in_place_index<0>, reg_, rng, prefix, in_ch, out_ch, stride);
        } else {
          group.emplace_back(std::in_place_index<1>, reg_, rng, prefix, in_ch, out_ch, stride);
        }
        in_ch = out_ch;
      }
      groups_.push_back(std::move(group));
    }
    if (cfg_.family == BackboneConfig::Family::wrn) {
      final_bn_ = BatchNorm2d<T>(reg_, "final_bn", cfg_.channels.back());
    }
    head_ = LinearLayer<T>(reg_, rng, "head", cfg_.channels.back(), cfg_.classes);
  }

  struct Output {
    FeaturePyramid<T> pyramid;
    Tensor<T> logits;
  };

  Output forward(const Tensor<T>& x, Mode mode) const {
    if (x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != cfg_.input_extent || x.shape()[3] != cfg_.input_extent) {
      throw ShapeError("backbone: input must be [b,3," + std::to_string(cfg_.input_extent) + "," +
                       std::to_string(cfg_.input_extent) + "]");
    }
    Output out;
    Tensor<T> h = stem_.forward(x);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      for (const auto& blk : groups_[g]) {
        h = std::visit([&](const auto& b) { return b.forward(h, mode); }, blk);
      }
      if (cfg_.family == BackboneConfig::Family::wrn && g + 1 == groups_.size()) {
        h = relu(final_bn_.forward(h, mode));
      }
      out.pyramid.push_back(h);
    }
    out.logits = head_.forward(global_avg_pool(out.pyramid.back()));
    return out;
  }

  /// Pyramid level shapes for a given batch size; a pure function of config.
  std::vector<Shape> pyramid_shapes(std::size_t batch) const {
    std::vector<Shape> shapes;
    for (std::size_t i = 0; i < cfg_.levels(); ++i) {
      const std::size_t e = cfg_.level_extent(i);
      shapes.push_back({batch, cfg_.channels[i], e, e});
    }
    return shapes;
  }

  Cost count() const {
    Cost cost;
    std::size_t e = cfg_.input_extent;
    stem_.count(cost, e, e);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (g > 0) e /= 2;
      for (std::size_t b = 0; b < groups_[g].size(); ++b) {
        const std::size_t he = (g > 0 && b == 0) ? e * 2 : e;  // first block downsamples
        std::visit([&](const auto& blk) { blk.count(cost, he, he); }, groups_[g][b]);
      }
    }
    if (cfg_.family == BackboneConfig::Family::wrn) {
      final_bn_.count(cost, e, e);
      cost.flops += static_cast<std::uint64_t>(e) * e * cfg_.channels.back();
    }
    cost.flops += static_cast<std::uint64_t>(e) * e * cfg_.channels.back();  // global average pool
    head_.count(cost);
    return cost;
  }

  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  const BackboneConfig& config() const { return cfg_; }

 private:
  using BlockT = std::variant<detail::PreactBlock<T>, detail::BasicBlock<T>>;
  BackboneConfig cfg_;
  ParamRegistry<T> reg_;
  Conv2dLayer<T> stem_;
  std::vector<std::vector<BlockT>> groups_;
  BatchNorm2d<T> final_bn_;
  LinearLayer<T> head_;
};

inline BackboneConfig backbone_preset(const std::string& name) {
  BackboneConfig cfg;
  if (name == "wrn16-2") {
    cfg.family = BackboneConfig::Family::wrn;
    cfg.depth = 16;
    cfg.channels = {32, 64, 128};
    cfg.input_extent = 32;
    cfg.classes = 100;
  } else if (name == "wrn16-1") {
    cfg.family = BackboneConfig::Family::wrn;
    cfg.depth = 16;
    cfg.channels = {16, 32, 64};
    cfg.input_extent = 32;
    cfg.classes = 100;
  } else if (name == "mini") {
    cfg.family = BackboneConfig::Family::wrn;
    cfg.depth = 10;
    cfg.channels = {16, 32, 64};
    cfg.input_extent = 16;
    cfg.classes = 4;
  } else if (name == "resnet18") {
    cfg.family = BackboneConfig::Family::resnet_basic;
    cfg.depth = 18;
    cfg.channels = {64, 128, 256, 512};
    cfg.input_extent = 32;
    cfg.classes = 100;
  } else if (name == "tiny") {
    cfg.family = BackboneConfig::Family::wrn;
    cfg.depth = 10;
    cfg.channels = {4, 8, 16};
    cfg.input_extent = 8;
    cfg.classes = 3;
  } else {
    throw ConfigError("unknown backbone preset '" + name + "'");
  }
  return cfg;
}

}  // namespace frskd
