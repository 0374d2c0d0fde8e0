// SPDX-License-Identifier: Apache-2.0
#include "frskd/self_teacher.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using frskd::Backbone;
using frskd::BackboneConfig;
using frskd::FeaturePyramid;
using frskd::FusionNode;
using frskd::Mode;
using frskd::ParamRegistry;
using frskd::Rng;
using frskd::SelfTeacher;
using frskd::SelfTeacherConfig;
using frskd::Shape;
using frskd::Tensor;
using frskd::testutil::random_tensor;

using TD = Tensor<double>;

namespace {

FeaturePyramid<double> random_pyramid(Rng& rng, const std::vector<std::size_t>& channels, std::size_t extent,
                                      std::size_t batch = 2, bool requires_grad = false) {
  FeaturePyramid<double> F;
  std::size_t e = extent;
  for (std::size_t c : channels) {
    TD t = random_tensor(rng, {batch, c, e, e});
    if (requires_grad) t = TD::create(t.shape(), std::vector<double>(t.values()), true);
    F.push_back(t);
    e /= 2;
  }
  return F;
}

SelfTeacherConfig tiny_teacher_config() {
  SelfTeacherConfig cfg;
  cfg.backbone_channels = {4, 8, 16};
  cfg.width = 2;
  cfg.classes = 3;
  return cfg;
}

}  // namespace

TEST(Lateral, ScaledChannelWidths) {
  // c = [32,64,128] with w = 2 projects to [64,128,256].
  SelfTeacherConfig cfg;
  cfg.backbone_channels = {32, 64, 128};
  cfg.width = 2;
  cfg.classes = 100;
  SelfTeacher<double> teacher(cfg, 1);
  Rng rng(2);
  auto F = random_pyramid(rng, cfg.backbone_channels, 16, 1);
  auto L = teacher.lateral_pyramid(F, Mode::eval);
  ASSERT_EQ(L.size(), 3u);
  EXPECT_EQ(L[0].shape(), (Shape{1, 64, 16, 16}));
  EXPECT_EQ(L[1].shape(), (Shape{1, 128, 8, 8}));
  EXPECT_EQ(L[2].shape(), (Shape{1, 256, 4, 4}));
}

TEST(Lateral, IdentityKernelWithoutNormalizationPassesThrough) {
  ParamRegistry<double> reg;
  Rng rng(3);
  frskd::PointwiseConv<double> lateral(reg, rng, "lat", 3, 3, false, /*norm=*/false, false);
  auto w = reg.find("lat/weight");
  std::fill(w->mutable_values().begin(), w->mutable_values().end(), 0.0);
  for (int i = 0; i < 3; ++i) w->mutable_values()[i * 3 + i] = 1.0;
  TD x = random_tensor(rng, {2, 3, 5, 5});
  EXPECT_EQ(lateral.forward(x, Mode::eval).values(), x.values());
}

TEST(Lateral, PreservesSpatialExtents) {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    SelfTeacherConfig cfg = tiny_teacher_config();
    cfg.width = 1 + rng.integer(3);
    SelfTeacher<double> teacher(cfg, 10 + trial);
    const std::size_t extent = 8 * (1 + rng.integer(2));
    auto F = random_pyramid(rng, cfg.backbone_channels, extent, 1);
    auto L = teacher.lateral_pyramid(F, Mode::eval);
    for (std::size_t i = 0; i < L.size(); ++i) {
      EXPECT_EQ(L[i].shape()[2], F[i].shape()[2]);
      EXPECT_EQ(L[i].shape()[3], F[i].shape()[3]);
      EXPECT_EQ(L[i].shape()[1], cfg.d(i));
    }
  }
}

TEST(Fuse, WorkedScalarExample) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 2, 1e-4);
  TD a = TD::full({1, 1, 1, 1}, 2.0);
  TD b = TD::full({1, 1, 1, 1}, 4.0);
  TD out = frskd::fuse<double>({a, b}, node);
  EXPECT_NEAR(out.scalar_value(), 6.0 / 2.0001, 1e-12);
}

TEST(Fuse, SingleSurvivingEdge) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 2, 1e-4);
  node.raw[1]->mutable_values()[0] = 0.0;
  TD a = TD::full({1, 1, 1, 1}, 3.0);
  TD b = TD::full({1, 1, 1, 1}, 100.0);
  TD out = frskd::fuse<double>({a, b}, node);
  EXPECT_NEAR(out.scalar_value(), 3.0 / 1.0001, 1e-12);
}

TEST(Fuse, AllZeroWeightsGiveExactZero) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 3, 1e-4);
  for (auto& wp : node.raw) wp->mutable_values()[0] = 0.0;
  Rng rng(5);
  TD a = random_tensor(rng, {1, 2, 3, 3});
  TD b = random_tensor(rng, {1, 2, 3, 3});
  TD c = random_tensor(rng, {1, 2, 3, 3});
  TD out = frskd::fuse<double>({a, b, c}, node);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Fuse, ShapeMismatchThrows) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 2, 1e-4);
  TD a = TD::zeros({1, 2, 3, 3});
  TD b = TD::zeros({1, 2, 4, 4});
  EXPECT_THROW(frskd::fuse<double>({a, b}, node), frskd::ShapeError);
  EXPECT_THROW(frskd::fuse<double>({a}, node), frskd::ShapeError);
}

TEST(Fuse, WeightsAreDifferentiable) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 2, 1e-4);
  Rng rng(6);
  TD a = random_tensor(rng, {1, 1, 2, 2});
  TD b = random_tensor(rng, {1, 1, 2, 2});
  TD w0 = TD::create({1}, {0.8}, true);
  // Rebuild the fusion expression with a probe weight to check its gradient.
  const auto loss = [&](const TD& w) {
    TD e0 = relu(w);
    TD e1 = relu(node.raw[1]->tensor());
    TD num = add(mul(a, e0), mul(b, e1));
    TD den = add(add(e0, e1), TD::scalar(1e-4));
    return frskd::sum_all(square(div(num, den)));
  };
  EXPECT_LT(frskd::finite_diff_check(loss, w0, 1e-6), 1e-4);
}

TEST(Fuse, OutputBoundedByMaxInputMagnitude) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    ParamRegistry<double> reg;
    const std::size_t edges = 2 + rng.integer(2);
    FusionNode<double> node = FusionNode<double>::make(reg, "f", edges, 1e-4);
    for (auto& wp : node.raw) wp->mutable_values()[0] = rng.uniform(0.0, 4.0);
    std::vector<TD> inputs;
    double max_mag = 0.0;
    for (std::size_t k = 0; k < edges; ++k) {
      inputs.push_back(random_tensor(rng, {1, 1, 2, 2}, -5.0, 5.0));
      for (double v : inputs.back().values()) max_mag = std::max(max_mag, std::abs(v));
    }
    TD out = frskd::fuse<double>(inputs, node);
    for (double v : out.values()) EXPECT_LE(std::abs(v), max_mag);
  }
}

TEST(Fuse, EqualWeightsApproachArithmeticMean) {
  ParamRegistry<double> reg;
  FusionNode<double> node = FusionNode<double>::make(reg, "f", 3, 1e-12);
  Rng rng(8);
  std::vector<TD> inputs{random_tensor(rng, {1, 1, 2, 2}), random_tensor(rng, {1, 1, 2, 2}),
                         random_tensor(rng, {1, 1, 2, 2})};
  TD out = frskd::fuse<double>(inputs, node);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mean3 = (inputs[0].values()[i] + inputs[1].values()[i] + inputs[2].values()[i]) / 3.0;
    EXPECT_NEAR(out.values()[i], mean3, 1e-9);
  }
}

TEST(ChannelProject, IdentityWhenWidthsMatch) {
  ParamRegistry<double> reg;
  Rng rng(9);
  frskd::detail::ChannelProject<double> proj(reg, rng, "proj", 8, 8);
  EXPECT_EQ(reg.list().size(), 0u);  // zero added parameters
  TD x = random_tensor(rng, {1, 8, 4, 4});
  EXPECT_EQ(proj.forward(x).values(), x.values());
}

TEST(ChannelProject, ParameterCountClosedForm) {
  ParamRegistry<double> reg;
  Rng rng(10);
  frskd::detail::ChannelProject<double> proj(reg, rng, "proj", 256, 128);
  std::uint64_t total = 0;
  for (const auto& p : reg.list()) total += p->size();
  EXPECT_EQ(total, 256u * 128u + 128u);
}

TEST(ChannelProject, ConstantInputStaysConstant) {
  ParamRegistry<double> reg;
  Rng rng(11);
  frskd::detail::ChannelProject<double> proj(reg, rng, "proj", 4, 6);
  TD x = TD::full({1, 4, 3, 3}, 1.25);
  TD y = proj.forward(x);
  for (std::size_t c = 0; c < 6; ++c) {
    const double ref = y.values()[c * 9];
    for (std::size_t p = 1; p < 9; ++p) EXPECT_DOUBLE_EQ(y.values()[c * 9 + p], ref);
  }
}

TEST(TeacherForward, ThreeLevelTopologyAndShapes) {
  SelfTeacherConfig cfg = tiny_teacher_config();
  SelfTeacher<double> teacher(cfg, 12);
  // Exactly one top-down node (P_2) and three bottom-up nodes per layer.
  EXPECT_NE(teacher.registry().find("layer0/p2/conv/pointwise"), nullptr);
  EXPECT_EQ(teacher.registry().find("layer0/p3/conv/pointwise"), nullptr);
  for (int i = 1; i <= 3; ++i) {
    EXPECT_NE(teacher.registry().find("layer0/t" + std::to_string(i) + "/conv/pointwise"), nullptr);
  }
  Rng rng(13);
  auto F = random_pyramid(rng, cfg.backbone_channels, 16, 2);
  auto out = teacher.forward(F, Mode::eval);
  ASSERT_EQ(out.refined.size(), 3u);
  EXPECT_EQ(out.refined[0].shape(), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(out.refined[1].shape(), (Shape{2, 16, 8, 8}));
  EXPECT_EQ(out.refined[2].shape(), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 3}));
}

TEST(TeacherForward, FourLevelDiagonals) {
  SelfTeacherConfig cfg;
  cfg.backbone_channels = {4, 8, 16, 32};
  cfg.width = 2;
  cfg.classes = 5;
  SelfTeacher<double> teacher(cfg, 14);
  // P_3 receives L_4 through a d4->d3 projection; T_1 receives P_2 through d2->d1.
  auto p3 = teacher.registry().find("layer0/p3/project/weight");
  ASSERT_NE(p3, nullptr);
  EXPECT_EQ(p3->shape, (Shape{32, 64, 1, 1}));
  auto t1 = teacher.registry().find("layer0/t1/project/weight");
  ASSERT_NE(t1, nullptr);
  EXPECT_EQ(t1->shape, (Shape{8, 16, 1, 1}));
  // Interior bottom-up nodes take three edges, boundary nodes two.
  EXPECT_NE(teacher.registry().find("layer0/t2/w2"), nullptr);
  EXPECT_NE(teacher.registry().find("layer0/t3/w2"), nullptr);
  EXPECT_EQ(teacher.registry().find("layer0/t1/w2"), nullptr);
  EXPECT_EQ(teacher.registry().find("layer0/t4/w2"), nullptr);
  EXPECT_EQ(teacher.registry().find("layer0/p2/w2"), nullptr);

  Rng rng(15);
  auto F = random_pyramid(rng, cfg.backbone_channels, 16, 1);
  auto out = teacher.forward(F, Mode::eval);
  ASSERT_EQ(out.refined.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.refined[i].shape()[1], cfg.d(i));
    EXPECT_EQ(out.refined[i].shape()[2], F[i].shape()[2]);
  }
}

TEST(TeacherForward, ShapeContractOverRandomConfigs) {
  Rng rng(16);
  for (int trial = 0; trial < 8; ++trial) {
    SelfTeacherConfig cfg;
    const std::size_t n = 3 + rng.integer(2);
    std::size_t c = 2 + rng.integer(3);
    for (std::size_t i = 0; i < n; ++i) {
      cfg.backbone_channels.push_back(c);
      c *= 2;
    }
    cfg.width = 1 + rng.integer(3);
    if (rng.bernoulli(0.3)) {
      cfg.mode = SelfTeacherConfig::ChannelMode::uniform;
      cfg.uniform_channels = 4 + 4 * rng.integer(4);
    }
    cfg.classes = 2 + rng.integer(4);
    cfg.repeats = 1 + rng.integer(2);
    SelfTeacher<double> teacher(cfg, 20 + trial);
    const std::size_t extent = (std::size_t(1) << (n - 1)) * (1 + rng.integer(2));
    auto F = random_pyramid(rng, cfg.backbone_channels, extent, 1);
    auto out = teacher.forward(F, Mode::eval);
    std::size_t e = extent;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(out.refined[i].shape(), (Shape{1, cfg.d(i), e, e}));
      e /= 2;
    }
  }
}

TEST(TeacherForward, ZeroPyramidStaysFinite) {
  SelfTeacherConfig cfg = tiny_teacher_config();
  SelfTeacher<double> teacher(cfg, 17);
  FeaturePyramid<double> F;
  std::size_t e = 16;
  for (std::size_t c : cfg.backbone_channels) {
    F.push_back(TD::zeros({2, c, e, e}));
    e /= 2;
  }
  // Any non-finite intermediate would throw; reaching here means all guards held.
  auto out_train = teacher.forward(F, Mode::train);
  auto out_eval = teacher.forward(F, Mode::eval);
  EXPECT_EQ(out_train.refined.size(), 3u);
  EXPECT_EQ(out_eval.refined.size(), 3u);
}

TEST(TeacherForward, PyramidMismatchThrows) {
  SelfTeacherConfig cfg = tiny_teacher_config();
  SelfTeacher<double> teacher(cfg, 18);
  Rng rng(19);
  auto F = random_pyramid(rng, {4, 8}, 16, 1);
  EXPECT_THROW(teacher.forward(F, Mode::eval), frskd::ShapeError);
  auto Fbad = random_pyramid(rng, {4, 8, 8}, 16, 1);
  EXPECT_THROW(teacher.forward(Fbad, Mode::eval), frskd::ShapeError);
}

TEST(TeacherForward, GradientCheckOnTinyConfig) {
  SelfTeacherConfig cfg = tiny_teacher_config();
  SelfTeacher<double> teacher(cfg, 21);
  Rng rng(22);
  auto F = random_pyramid(rng, cfg.backbone_channels, 8, 1);
  // Fixed random projection scalarizes the logits.
  TD w = random_tensor(rng, {1, 3});

  const auto loss_value = [&]() {
    auto out = teacher.forward(F, Mode::train);
    return frskd::sum_all(mul(out.logits, w));
  };
  TD loss = loss_value();
  auto gm = frskd::backward(loss);

  Rng pick(23);
  double max_rel = 0.0;
  for (const auto& p : teacher.registry().list()) {
    if (!p->trainable) continue;
    const TD* g = gm.find(p->tensor());
    const std::size_t samples = std::min<std::size_t>(6, p->size());
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t j = pick.integer(p->size());
      const double analytic = g ? g->values()[j] : 0.0;
      const double eps = 1e-5;
      const double orig = p->mutable_values()[j];
      p->mutable_values()[j] = orig + eps;
      const double up = loss_value().scalar_value();
      p->mutable_values()[j] = orig - eps;
      const double down = loss_value().scalar_value();
      p->mutable_values()[j] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
  }
  EXPECT_LT(max_rel, 1e-3);
}

TEST(TeacherCost, ReferencePresetRatios) {
  BackboneConfig b = frskd::backbone_preset("wrn16-2");
  Backbone<double> cls(b, 1);
  const auto ccost = cls.count();

  SelfTeacherConfig tc = SelfTeacherConfig::for_backbone(b, 2, 2);
  SelfTeacher<double> scaled(tc, 1);
  const auto scost = scaled.count({32, 16, 8});
  const double param_ratio = static_cast<double>(scost.params) / ccost.params;
  const double flops_ratio = static_cast<double>(scost.flops) / ccost.flops;
  EXPECT_GE(param_ratio, 0.45);
  EXPECT_LE(param_ratio, 0.75);
  EXPECT_GE(flops_ratio, 0.45);
  EXPECT_LE(flops_ratio, 0.95);

  SelfTeacherConfig uc = tc;
  uc.mode = SelfTeacherConfig::ChannelMode::uniform;
  uc.uniform_channels = 256;  // w * c_n
  SelfTeacher<double> uniform(uc, 1);
  EXPECT_GT(uniform.count_params(), scaled.count_params());
}

TEST(TeacherCost, CountMatchesRegistryEnumeration) {
  for (std::size_t repeats : {std::size_t(1), std::size_t(2)}) {
    SelfTeacherConfig cfg = tiny_teacher_config();
    cfg.repeats = repeats;
    SelfTeacher<double> teacher(cfg, 30);
    std::uint64_t enumerated = 0;
    for (const auto& p : teacher.registry().list()) enumerated += p->size();
    EXPECT_EQ(teacher.count_params(), enumerated);
    EXPECT_EQ(teacher.count({8, 4, 2}).params, enumerated);
  }
}

TEST(TeacherCost, ConvFlopsScaleQuadratically) {
  // Doubling the input extent multiplies every spatial term by exactly 4;
  // only the constant-size head breaks the scaling.
  SelfTeacherConfig cfg = tiny_teacher_config();
  SelfTeacher<double> teacher(cfg, 31);
  const auto c1 = teacher.count({8, 4, 2});
  const auto c2 = teacher.count({16, 8, 4});
  const std::uint64_t head_flops = cfg.classes * 2ull * cfg.d(2) + cfg.classes;
  EXPECT_EQ(c2.flops - head_flops, 4 * (c1.flops - head_flops));

  frskd::Cost a, b4;
  frskd::ParamRegistry<double> reg;
  Rng rng(32);
  frskd::Conv2dLayer<double> conv(reg, rng, "c", 3, 8, 3, 1, 1, true);
  conv.count(a, 6, 6);
  conv.count(b4, 12, 12);
  EXPECT_EQ(b4.flops, 4 * a.flops);
}

TEST(TeacherCost, ScaledStrictlyCheaperThanUniformAtMatchedDeepWidth) {
  Rng rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    SelfTeacherConfig cfg;
    const std::size_t n = 3 + rng.integer(2);
    std::size_t c = 2 + rng.integer(4);
    for (std::size_t i = 0; i < n; ++i) {
      cfg.backbone_channels.push_back(c);
      if (i + 1 < n) c *= (i == 0 || rng.bernoulli(0.8)) ? 2 : 1;
    }
    if (cfg.backbone_channels.front() == cfg.backbone_channels.back()) cfg.backbone_channels.back() *= 2;
    cfg.width = 1 + rng.integer(3);
    cfg.classes = 4;
    cfg.repeats = 1 + rng.integer(2);
    SelfTeacher<double> scaled(cfg, 40 + trial);

    SelfTeacherConfig ucfg = cfg;
    ucfg.mode = SelfTeacherConfig::ChannelMode::uniform;
    ucfg.uniform_channels = cfg.width * cfg.backbone_channels.back();
    SelfTeacher<double> uniform(ucfg, 40 + trial);
    EXPECT_LT(scaled.count_params(), uniform.count_params());
  }
}
