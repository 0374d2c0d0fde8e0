// SPDX-License-Identifier: Apache-2.0
#pragma once
// The auxiliary self-teacher: lateral pointwise projections of the backbone
// pyramid into depth-scaled widths d_i, then one or more bidirectional fusion
// layers (top-down nodes P, bottom-up nodes T) with fast normalized fusion,
// and a linear head on the deepest refined map.
//
// Topology per fusion layer, for n >= 3 levels (1-based):
//   P_{n-1} = DSConv(fuse(L_{n-1}, Up(L_n)))          diagonal from L_n
//   P_i     = DSConv(fuse(L_i, Up(P_{i+1})))          i = n-2 .. 2
//   T_1     = DSConv(fuse(L_1, Up(P_2)))              diagonal from P_2
//   T_i     = DSConv(fuse(L_i, P_i, Down(T_{i-1})))   i = 2 .. n-1
//   T_n     = DSConv(fuse(L_n, Down(T_{n-1})))
// Cross-level inputs are channel-projected to the destination width and
// resized to the destination extent. Upsampling projects at the coarse extent
// and then interpolates; downsampling pools first and projects at the fine
// extent, so the pointwise convolution always runs on the smaller map.

#include <cstdint>
#include <string>
#include <vector>

#include "frskd/backbone.hpp"
#include "frskd/nn.hpp"

namespace frskd {

struct SelfTeacherConfig {
  enum class ChannelMode { scaled, uniform };
  std::vector<std::size_t> backbone_channels;  // c_1..c_n
  std::size_t width = 2;                       // w, scaled mode: d_i = w * c_i
  ChannelMode mode = ChannelMode::scaled;
  std::size_t uniform_channels = 256;  // D, uniform mode: d_i = D
  double fusion_eps = 1e-4;
  std::size_t classes = 100;
  std::size_t repeats = 1;       // stacked fusion layers
  bool detach_features = false;  // cut gradients into the backbone at the teacher boundary

  std::size_t levels() const { return backbone_channels.size(); }

  std::size_t d(std::size_t i) const {
    return mode == ChannelMode::scaled ? width * backbone_channels[i] : uniform_channels;
  }

  void validate() const {
    if (levels() < 3) throw ConfigError("self-teacher: at least 3 levels required");
    if (mode == ChannelMode::scaled && width == 0) throw ConfigError("self-teacher: width must be positive");
    if (mode == ChannelMode::uniform && uniform_channels == 0) {
      throw ConfigError("self-teacher: uniform channel count must be positive");
    }
    for (std::size_t i = 0; i < levels(); ++i) {
      if (d(i) == 0) throw ConfigError("self-teacher: zero channel width");
    }
    if (fusion_eps <= 0) throw ConfigError("self-teacher: fusion epsilon must be positive");
    if (classes < 2) throw ConfigError("self-teacher: need at least 2 classes");
    if (repeats == 0) throw ConfigError("self-teacher: repeats must be positive");
  }

  static SelfTeacherConfig for_backbone(const BackboneConfig& b, std::size_t width_param = 2,
                                        std::size_t repeats_param = 1) {
    SelfTeacherConfig cfg;
    cfg.backbone_channels = b.channels;
    cfg.width = width_param;
    cfg.classes = b.classes;
    cfg.repeats = repeats_param;
    return cfg;
  }
};

// Learnable per-edge scalars for fast normalized fusion; effective weights are
// ReLU(raw), never negative.
template <typename T>
struct FusionNode {
  std::vector<typename ParamRegistry<T>::Ptr> raw;
  double eps = 1e-4;

  static FusionNode make(ParamRegistry<T>& reg, const std::string& prefix, std::size_t edges, double eps) {
    FusionNode node;
    node.eps = eps;
    for (std::size_t k = 0; k < edges; ++k) {
      node.raw.push_back(reg.add(prefix + "/w" + std::to_string(k), {1}, {T(1)}, true, false));
    }
    return node;
  }
};

/// Fast normalized fusion: sum_k relu(w_k) x_k / (sum_k relu(w_k) + eps).
template <typename T>
Tensor<T> fuse(const std::vector<Tensor<T>>& inputs, const FusionNode<T>& node) {
  if (inputs.size() < 2) throw ShapeError("fuse: at least two inputs required");
  if (inputs.size() != node.raw.size()) throw ShapeError("fuse: edge count mismatch");
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    if (inputs[k].shape() != inputs[0].shape()) throw ShapeError("fuse: input shapes differ");
  }
  Tensor<T> w0 = relu(node.raw[0]->tensor());
  Tensor<T> num = mul(inputs[0], w0);
  Tensor<T> den = w0;
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    Tensor<T> wk = relu(node.raw[k]->tensor());
    num = add(num, mul(inputs[k], wk));
    den = add(den, wk);
  }
  den = add(den, Tensor<T>::scalar(static_cast<T>(node.eps)));
  return div(num, den);
}

namespace detail {

// Pointwise channel conversion; parameter-free pass-through when widths match.
template <typename T>
class ChannelProject {
 public:
  ChannelProject() = default;
  ChannelProject(ParamRegistry<T>& reg, Rng& rng, const std::string& prefix, std::size_t src, std::size_t dst)
      : identity_(src == dst) {
    if (!identity_) conv_ = Conv2dLayer<T>(reg, rng, prefix, src, dst, 1, 1, 0, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return identity_ ? x : conv_.forward(x); }

  void count(Cost& cost, std::size_t h, std::size_t w) const {
    if (!identity_) conv_.count(cost, h, w);
  }

 private:
  bool identity_ = true;
  Conv2dLayer<T> conv_;
};

// One fused graph node: channel projection for the cross-level edge, fusion
// weights and the output depthwise separable convolution.
template <typename T>
struct GraphNode {
  ChannelProject<T> project;
  FusionNode<T> weights;
  DepthwiseSeparableConv<T> conv;
};

}  // namespace detail

template <typename T>
class SelfTeacher {
 public:
  SelfTeacher(const SelfTeacherConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x74656163ULL));  // "teac"
    const std::size_t n = cfg_.levels();
    for (std::size_t i = 0; i < n; ++i) {
      laterals_.emplace_back(reg_, rng, "lateral" + std::to_string(i + 1), cfg_.backbone_channels[i], cfg_.d(i),
                             /*bias=*/false, /*norm=*/true, /*act=*/false);
    }
    for (std::size_t layer = 0; layer < cfg_.repeats; ++layer) {
      FusionLayer fl;
      const std::string lp = "layer" + std::to_string(layer);
      // Top-down nodes P_i, built from the deep end: i = n-2 .. 1 (0-based).
      for (std::size_t i = n - 2; i >= 1; --i) {
        detail::GraphNode<T> node;
        const std::string prefix = lp + "/p" + std::to_string(i + 1);
        node.project = detail::ChannelProject<T>(reg_, rng, prefix + "/project", cfg_.d(i + 1), cfg_.d(i));
        node.weights = FusionNode<T>::make(reg_, prefix, 2, cfg_.fusion_eps);
        node.conv = DepthwiseSeparableConv<T>(reg_, rng, prefix + "/conv", cfg_.d(i), cfg_.d(i));
        fl.top_down.push_back(std::move(node));  // stored deep-to-shallow
      }
      // Bottom-up nodes T_i, i = 0 .. n-1.
      for (std::size_t i = 0; i < n; ++i) {
        detail::GraphNode<T> node;
        const std::string prefix = lp + "/t" + std::to_string(i + 1);
        if (i == 0) {
          node.project = detail::ChannelProject<T>(reg_, rng, prefix + "/project", cfg_.d(1), cfg_.d(0));
          node.weights = FusionNode<T>::make(reg_, prefix, 2, cfg_.fusion_eps);
        } else {
          node.project = detail::ChannelProject<T>(reg_, rng, prefix + "/project", cfg_.d(i - 1), cfg_.d(i));
          node.weights = FusionNode<T>::make(reg_, prefix, i + 1 == n ? 2 : 3, cfg_.fusion_eps);
        }
        node.conv = DepthwiseSeparableConv<T>(reg_, rng, prefix + "/conv", cfg_.d(i), cfg_.d(i));
        fl.bottom_up.push_back(std::move(node));
      }
      layers_.push_back(std::move(fl));
    }
    head_ = LinearLayer<T>(reg_, rng, "head", cfg_.d(n - 1), cfg_.classes);
  }

  struct Output {
    FeaturePyramid<T> refined;
    Tensor<T> logits;
  };

  /// Lateral projections L_1..L_n of the backbone pyramid.
  FeaturePyramid<T> lateral_pyramid(const FeaturePyramid<T>& F, Mode mode) const {
    check_pyramid(F);
    FeaturePyramid<T> L;
    for (std::size_t i = 0; i < F.size(); ++i) {
      Tensor<T> f = cfg_.detach_features ? F[i].detach() : F[i];
      L.push_back(laterals_[i].forward(f, mode));
    }
    return L;
  }

  Output forward(const FeaturePyramid<T>& F, Mode mode) const {
    FeaturePyramid<T> X = lateral_pyramid(F, mode);
    for (const auto& layer : layers_) X = run_layer(layer, X, mode);
    Output out;
    out.refined = std::move(X);
    out.logits = head_.forward(global_avg_pool(out.refined.back()));
    return out;
  }

  /// Exact parameter count over every registered tensor.
  std::uint64_t count_params() const { return reg_.total_values(); }

  /// Analytic cost at the given per-level spatial extents (finest first).
  Cost count(const std::vector<std::size_t>& extents) const {
    const std::size_t n = cfg_.levels();
    if (extents.size() != n) throw ShapeError("self-teacher: extent list length mismatch");
    Cost cost;
    for (std::size_t i = 0; i < n; ++i) laterals_[i].count(cost, extents[i], extents[i]);
    for (const auto& layer : layers_) {
      for (std::size_t k = 0; k < layer.top_down.size(); ++k) {
        const std::size_t i = n - 2 - k;
        count_node(cost, layer.top_down[k], extents[i + 1], extents[i], cfg_.d(i + 1), cfg_.d(i), 2, true);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto& node = layer.bottom_up[i];
        if (i == 0) {
          count_node(cost, node, extents[1], extents[0], cfg_.d(1), cfg_.d(0), 2, true);
        } else {
          count_node(cost, node, extents[i - 1], extents[i], cfg_.d(i - 1), cfg_.d(i), i + 1 == n ? 2 : 3, false);
        }
      }
    }
    const std::size_t e = extents[n - 1];
    cost.flops += static_cast<std::uint64_t>(e) * e * cfg_.d(n - 1);  // global average pool
    head_.count(cost);
    return cost;
  }

  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  const SelfTeacherConfig& config() const { return cfg_; }

 private:
  struct FusionLayer {
    std::vector<detail::GraphNode<T>> top_down;   // P_{n-1} .. P_2, deep to shallow
    std::vector<detail::GraphNode<T>> bottom_up;  // T_1 .. T_n
  };

  void check_pyramid(const FeaturePyramid<T>& F) const {
    if (F.size() != cfg_.levels()) throw ShapeError("self-teacher: pyramid length mismatch");
    for (std::size_t i = 0; i < F.size(); ++i) {
      if (F[i].rank() != 4 || F[i].shape()[1] != cfg_.backbone_channels[i]) {
        throw ShapeError("self-teacher: level " + std::to_string(i + 1) + " channel mismatch");
      }
    }
  }

  // Project at the coarse extent, then upsample to the fine extent.
  static Tensor<T> up_edge(const detail::ChannelProject<T>& proj, const Tensor<T>& src, std::size_t ht,
                           std::size_t wt) {
    return bilinear_up(proj.forward(src), ht, wt);
  }

  // Downsample to the coarse extent, then project.
  static Tensor<T> down_edge(const detail::ChannelProject<T>& proj, const Tensor<T>& src, std::size_t ht,
                             std::size_t wt) {
    return proj.forward(adaptive_max_pool(src, ht, wt));
  }

  FeaturePyramid<T> run_layer(const FusionLayer& layer, const FeaturePyramid<T>& L, Mode mode) const {
    const std::size_t n = cfg_.levels();
    // Top-down path.
    std::vector<Tensor<T>> P(n);  // P[i] defined for i in [1, n-2]
    for (std::size_t k = 0; k < layer.top_down.size(); ++k) {
      const std::size_t i = n - 2 - k;
      const auto& node = layer.top_down[k];
      const Tensor<T>& high = (i == n - 2) ? L[i + 1] : P[i + 1];
      Tensor<T> up = up_edge(node.project, high, L[i].shape()[2], L[i].shape()[3]);
      P[i] = node.conv.forward(fuse<T>({L[i], up}, node.weights), mode);
    }
    // Bottom-up path.
    FeaturePyramid<T> Tp(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& node = layer.bottom_up[i];
      if (i == 0) {
        Tensor<T> up = up_edge(node.project, P[1], L[0].shape()[2], L[0].shape()[3]);
        Tp[0] = node.conv.forward(fuse<T>({L[0], up}, node.weights), mode);
      } else {
        Tensor<T> down = down_edge(node.project, Tp[i - 1], L[i].shape()[2], L[i].shape()[3]);
        std::vector<Tensor<T>> inputs;
        if (i + 1 == n) {
          inputs = {L[i], down};
        } else {
          inputs = {L[i], P[i], down};
        }
        Tp[i] = node.conv.forward(fuse<T>(inputs, node.weights), mode);
      }
    }
    return Tp;
  }

  void count_node(Cost& cost, const detail::GraphNode<T>& node, std::size_t src_extent, std::size_t dst_extent,
                  std::size_t src_ch, std::size_t dst_ch, std::size_t edges, bool up) const {
    if (up) {
      node.project.count(cost, src_extent, src_extent);  // project at the coarse extent
      cost.flops += 9ull * dst_extent * dst_extent * dst_ch;  // bilinear: three lerps per output
    } else {
      // max pooling: (window - 1) comparisons per output over a true partition
      cost.flops += (static_cast<std::uint64_t>(src_extent) * src_extent -
                     static_cast<std::uint64_t>(dst_extent) * dst_extent) * src_ch;
      node.project.count(cost, dst_extent, dst_extent);
    }
    // fusion: one multiply and one add per edge per element, one divide per element
    cost.flops += (2ull * edges + 1) * dst_extent * dst_extent * dst_ch;
    cost.params += edges;  // raw fusion weights
    node.conv.count(cost, dst_extent, dst_extent);
  }

  SelfTeacherConfig cfg_;
  ParamRegistry<T> reg_;
  std::vector<PointwiseConv<T>> laterals_;
  std::vector<FusionLayer> layers_;
  LinearLayer<T> head_;
};

}  // namespace frskd
