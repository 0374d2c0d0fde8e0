// SPDX-License-Identifier: Apache-2.0
#pragma once
// Loss terms for self-distillation training: cross-entropy for both heads,
// temperature-scaled KL between the student and teacher soft labels, and a
// feature loss between the backbone pyramid and the refined pyramid (either
// scale-invariant attention signatures or a FitNet-style projected MSE).
//
// Every teacher-derived tensor entering the distillation terms is detached, so
// those terms move only the student; the teacher trains through its own
// cross-entropy.

#include <cstdint>
#include <string>
#include <vector>

#include "frskd/nn.hpp"

namespace frskd {

struct LossConfig {
  double alpha = 2.0;        // KD weight
  double beta = 100.0;       // feature weight
  double temperature = 4.0;  // K
  enum class FeatureKind { attention, fitnet };
  FeatureKind feature_kind = FeatureKind::attention;
  bool kd_scale_k2 = false;  // multiply the KD term by K^2
  enum class KdDirection { paper, reverse };
  KdDirection kd_direction = KdDirection::paper;  // paper: KL(student || teacher)

  void validate() const {
    if (alpha < 0 || beta < 0) throw ConfigError("loss: alpha and beta must be non-negative");
    if (temperature <= 0) throw ConfigError("loss: temperature must be positive");
  }
};

template <typename T>
struct LossBundle {
  Tensor<T> ce_student, ce_teacher, kd, feature, total;
};

struct LossDiagnostics {
  std::uint64_t zero_attention_maps = 0;
};

inline LossDiagnostics& loss_diagnostics() {
  static thread_local LossDiagnostics diag;
  return diag;
}

/// Row-stable log-softmax over axis 1 of [b,C]. The max shift is treated as a
/// constant, which yields the exact softmax gradient and keeps the result
/// bitwise shift-invariant whenever the shifted logits are exactly
/// representable.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& z) {
  if (z.rank() != 2) throw ShapeError("log_softmax: input must be [b,classes]");
  Tensor<T> u = sub(z, reduce_max(z, Axes{1}, true).detach());
  return sub(u, log(sum(exp(u), Axes{1}, true)));
}

namespace detail {

// 1 where the scalar is positive, else 0; constant w.r.t. the graph.
template <typename T>
Tensor<T> positive_mask(const Tensor<T>& t, std::uint64_t* zero_counter) {
  std::vector<T> m(t.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = t.values()[i] > T(0) ? T(1) : T(0);
    if (m[i] == T(0) && zero_counter) ++*zero_counter;
  }
  return Tensor<T>::create(t.shape(), std::move(m));
}

// Row-wise L2 norm of [b,f] with an exact-zero guard: all-zero rows map to 0.
template <typename T>
Tensor<T> guarded_row_norm(const Tensor<T>& rows, Tensor<T>& mask_out, std::uint64_t* zero_counter) {
  Tensor<T> ss = sum(square(rows), Axes{1}, true);  // [b,1]
  mask_out = positive_mask(ss, zero_counter);
  Tensor<T> one = Tensor<T>::full(ss.shape(), T(1));
  // Zero rows divide by one instead of zero; their numerator is masked to 0.
  return frskd::sqrt(add(ss, sub(one, mask_out)));
}

}  // namespace detail

/// Attention signature: per batch element, the channel-wise sum of squares
/// flattened and L2-normalized. All-zero maps produce the zero vector and are
/// counted in the loss diagnostics.
template <typename T>
Tensor<T> attention_map(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("attention_map: input must be [b,c,h,w]");
  const std::size_t b = a.shape()[0], h = a.shape()[2], w = a.shape()[3];
  Tensor<T> q = reshape(sum(square(a), Axes{1}), {b, h * w});
  Tensor<T> mask;
  Tensor<T> norm = detail::guarded_row_norm(q, mask, &loss_diagnostics().zero_attention_maps);
  return div(mul(q, mask), norm);
}

template <typename T>
class FitNetProjector;

/// Feature distillation between the refined pyramid (detached) and the
/// backbone pyramid. Attention kind: per-level L2 distance between attention
/// signatures, averaged over the batch. FitNet kind: per-level mean squared
/// error after a learned pointwise projection of the backbone map.
template <typename T>
Tensor<T> feature_loss(const FeaturePyramid<T>& refined, const FeaturePyramid<T>& features,
                       LossConfig::FeatureKind kind, const FitNetProjector<T>* projector = nullptr,
                       Mode mode = Mode::train) {
  if (refined.size() != features.size()) throw ShapeError("feature_loss: pyramid length mismatch");
  if (refined.empty()) throw ShapeError("feature_loss: empty pyramids");
  for (std::size_t i = 0; i < refined.size(); ++i) {
    if (refined[i].rank() != 4 || features[i].rank() != 4 || refined[i].shape()[2] != features[i].shape()[2] ||
        refined[i].shape()[3] != features[i].shape()[3] || refined[i].shape()[0] != features[i].shape()[0]) {
      throw ShapeError("feature_loss: level " + std::to_string(i + 1) + " spatial mismatch");
    }
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < refined.size(); ++i) {
    Tensor<T> target = refined[i].detach();
    if (kind == LossConfig::FeatureKind::attention) {
      Tensor<T> diff = sub(attention_map(target), attention_map(features[i]));
      Tensor<T> mask;
      Tensor<T> nrm = detail::guarded_row_norm(diff, mask, nullptr);
      total = add(total, mean(reshape(mul(nrm, mask), {diff.shape()[0]}), Axes{0}));
    } else {
      if (!projector) throw ConfigError("feature_loss: fitnet kind needs a projector");
      Tensor<T> projected = projector->forward(i, features[i], mode);
      if (projected.shape() != target.shape()) {
        throw ShapeError("feature_loss: projected level " + std::to_string(i + 1) + " channel mismatch");
      }
      Tensor<T> se = square(sub(projected, target));
      Axes all{0, 1, 2, 3};
      total = add(total, mean(se, all));
    }
  }
  return total;
}

/// Learned pointwise projections from backbone widths to teacher widths,
/// trained by the FitNet feature loss on the student side.
template <typename T>
class FitNetProjector {
 public:
  FitNetProjector() = default;
  FitNetProjector(ParamRegistry<T>& reg, Rng& rng, const std::vector<std::size_t>& from,
                  const std::vector<std::size_t>& to) {
    if (from.size() != to.size()) throw ConfigError("fitnet projector: level count mismatch");
    for (std::size_t i = 0; i < from.size(); ++i) {
      convs_.emplace_back(reg, rng, "fitnet_proj/level" + std::to_string(i + 1), from[i], to[i], 1, 1, 0, true);
    }
  }

  Tensor<T> forward(std::size_t level, const Tensor<T>& x, Mode) const {
    if (level >= convs_.size()) throw ShapeError("fitnet projector: level out of range");
    return convs_[level].forward(x);
  }

  bool empty() const { return convs_.empty(); }

 private:
  std::vector<Conv2dLayer<T>> convs_;
};

/// Mean over the batch of KL(softmax(z_s/K) || softmax(z_t/K)); the reverse
/// direction swaps the roles. Optionally scaled by K^2.
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, double temperature,
                  LossConfig::KdDirection direction = LossConfig::KdDirection::paper, bool scale_k2 = false) {
  if (temperature <= 0) throw ValueError("kd_loss: temperature must be positive");
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("kd_loss: logit shapes must match as [b,classes]");
  }
  const Tensor<T> k = Tensor<T>::scalar(static_cast<T>(temperature));
  Tensor<T> ls_s = log_softmax(div(student_logits, k));
  Tensor<T> ls_t = log_softmax(div(teacher_logits, k));
  Tensor<T> row;
  if (direction == LossConfig::KdDirection::paper) {
    row = sum(mul(exp(ls_s), sub(ls_s, ls_t)), Axes{1});
  } else {
    row = sum(mul(exp(ls_t), sub(ls_t, ls_s)), Axes{1});
  }
  Tensor<T> out = mean(row, Axes{0});
  if (scale_k2) out = mul(out, Tensor<T>::scalar(static_cast<T>(temperature * temperature)));
  return out;
}

/// Mean negative log-softmax at the true class.
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("ce_loss: logits must be [b,classes]");
  const std::size_t b = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != b) throw ShapeError("ce_loss: label count mismatch");
  std::vector<T> onehot(b * classes, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ValueError("ce_loss: label " + std::to_string(labels[i]) + " out of range");
    }
    onehot[i * classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  Tensor<T> oh = Tensor<T>::create({b, classes}, std::move(onehot));
  Tensor<T> picked = sum_all(mul(oh, log_softmax(logits)));
  return mul(picked, Tensor<T>::scalar(T(-1) / static_cast<T>(b)));
}

/// Composes the optimization objective:
///   total = ce_student + ce_teacher + alpha * kd + beta * feature,
/// with the teacher logits and refined maps detached inside the kd and
/// feature terms. Terms with zero weight are skipped and contribute exact
/// zeros.
template <typename T>
LossBundle<T> total_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                         const FeaturePyramid<T>& features, const FeaturePyramid<T>& refined,
                         const std::vector<int>& labels, const LossConfig& cfg,
                         const FitNetProjector<T>* projector = nullptr, Mode mode = Mode::train) {
  cfg.validate();
  LossBundle<T> bundle;
  bundle.ce_student = ce_loss(student_logits, labels);
  bundle.ce_teacher = ce_loss(teacher_logits, labels);
  bundle.kd = cfg.alpha > 0 ? kd_loss(student_logits, teacher_logits.detach(), cfg.temperature, cfg.kd_direction,
                                      cfg.kd_scale_k2)
                            : Tensor<T>::scalar(T(0));
  bundle.feature = cfg.beta > 0 ? feature_loss(refined, features, cfg.feature_kind, projector, mode)
                                : Tensor<T>::scalar(T(0));
  bundle.total = add(add(add(bundle.ce_student, bundle.ce_teacher),
                         mul(Tensor<T>::scalar(static_cast<T>(cfg.alpha)), bundle.kd)),
                     mul(Tensor<T>::scalar(static_cast<T>(cfg.beta)), bundle.feature));
  return bundle;
}

}  // namespace frskd
