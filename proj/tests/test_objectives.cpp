#include <gtest/gtest.h>

#include <cmath>

#include "mat/gradcheck.hpp"
#include "mat/objectives.hpp"

using mat::CounterRng;
using mat::Shape;
using TD = mat::Tensor<double>;

namespace {

TD log_tau(double tau) { return TD(Shape{1}, {std::log(tau)}); }

TD unit_rows(CounterRng& rng, std::size_t b, std::size_t d) {
  TD x(Shape{b, d});
  for (std::size_t r = 0; r < b; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      x[r * d + c] = rng.normal();
      ss += x[r * d + c] * x[r * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) x[r * d + c] /= std::sqrt(ss);
  }
  return x;
}

// Three 2-d unit rows per side, not symmetric under swapping sides.
const TD kV(Shape{3, 2}, {1.0, 0.0, 0.6, 0.8, 0.0, 1.0});
const TD kT(Shape{3, 2}, {0.8, 0.6, 0.0, 1.0, -0.6, 0.8});

}  // namespace

TEST(ContrastiveLoss, SingleItemBatchIsZero) {
  TD v(Shape{1, 2}, {0.6, 0.8});
  TD t(Shape{1, 2}, {1.0, 0.0});
  auto l = mat::contrastive_loss(v, t, log_tau(0.07));
  EXPECT_DOUBLE_EQ(l.cross.item(), 0.0);
}

TEST(ContrastiveLoss, OrthogonalPairs) {
  TD e(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto l = mat::contrastive_loss(e, e, log_tau(1.0));
  EXPECT_NEAR(l.cross.item(), 0.6265233750364457, 1e-12);
  EXPECT_NEAR(l.v2t.item(), l.t2v.item(), 1e-15);
  auto sharp = mat::contrastive_loss(e, e, log_tau(0.5));
  EXPECT_NEAR(sharp.cross.item(), 0.2538560220859452, 1e-12);
}

TEST(ContrastiveLoss, TemperatureMonotone) {
  TD e(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  double prev = 1e9;
  for (double tau : {2.0, 1.0, 0.5, 0.2, 0.07}) {
    const double l = mat::contrastive_loss(e, e, log_tau(tau)).cross.item();
    EXPECT_LT(l, prev) << tau;
    prev = l;
  }
}

TEST(ContrastiveLoss, HandExampleBothDirections) {
  auto l = mat::contrastive_loss(kV, kT, log_tau(0.5));
  EXPECT_NEAR(l.v2t.item(), 0.7963409824853468, 1e-12);
  EXPECT_NEAR(l.t2v.item(), 0.8172792756504643, 1e-12);
  EXPECT_NEAR(l.cross.item(), l.v2t.item() + l.t2v.item(), 1e-15);
}

TEST(ContrastiveLoss, SwapAndPermutationSymmetry) {
  auto l = mat::contrastive_loss(kV, kT, log_tau(0.5));
  auto swapped = mat::contrastive_loss(kT, kV, log_tau(0.5));
  EXPECT_NEAR(swapped.v2t.item(), l.t2v.item(), 1e-14);
  EXPECT_NEAR(swapped.t2v.item(), l.v2t.item(), 1e-14);
  const std::vector<std::size_t> perm{2, 0, 1};
  TD vp(Shape{3, 2}), tp(Shape{3, 2});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      vp[r * 2 + c] = kV[perm[r] * 2 + c];
      tp[r * 2 + c] = kT[perm[r] * 2 + c];
    }
  }
  EXPECT_NEAR(mat::contrastive_loss(vp, tp, log_tau(0.5)).cross.item(), l.cross.item(), 1e-14);
}

TEST(ContrastiveLoss, ExcludeSameClassNegatives) {
  const std::vector<std::size_t> classes{0, 1, 0};
  auto l = mat::contrastive_loss(kV, kT, log_tau(0.5), &classes, true);
  EXPECT_NEAR(l.v2t.item(), 0.700476976673445, 1e-12);
  EXPECT_NEAR(l.t2v.item(), 0.7198256245932834, 1e-12);
  auto kept = mat::contrastive_loss(kV, kT, log_tau(0.5), &classes, false);
  EXPECT_NEAR(kept.v2t.item(), 0.7963409824853468, 1e-12);
  const std::vector<std::size_t> short_classes{0, 1};
  EXPECT_THROW(mat::contrastive_loss(kV, kT, log_tau(0.5), &short_classes, true), mat::DimensionError);
}

TEST(ContrastiveLoss, RandomBatchNearLogB) {
  CounterRng rng(5);
  double acc = 0.0;
  const int reps = 10;
  for (int i = 0; i < reps; ++i) {
    auto v = unit_rows(rng, 32, 64);
    auto t = unit_rows(rng, 32, 64);
    acc += mat::contrastive_loss(v, t, log_tau(1.0)).cross.item();
  }
  EXPECT_NEAR(acc / reps, 2.0 * std::log(32.0), 0.2);
}

TEST(ContrastiveLoss, Contracts) {
  TD bad(Shape{2, 2}, {1.0, 0.0, 0.5, 0.5});
  TD e(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_THROW(mat::contrastive_loss(bad, e, log_tau(1.0)), mat::ContractError);
  EXPECT_THROW(mat::contrastive_loss(e, TD(Shape{3, 2}), log_tau(1.0)), mat::DimensionError);
  EXPECT_THROW(mat::contrastive_loss(e, e, TD(Shape{2})), mat::DimensionError);
}

TEST(ContrastiveLoss, TemperatureGradient) {
  auto lt = TD::parameter(Shape{1}, {std::log(0.5)});
  auto res = mat::check_gradients("contrastive_tau", {lt}, [](const std::vector<TD>& in) {
    return mat::contrastive_loss(kV, kT, in[0]).cross;
  });
  EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(FeatureLoss, TwoStepExample) {
  auto ant = TD::parameter(Shape{1, 2, 1}, {0.0, 9.0});
  auto fused = TD::parameter(Shape{1, 2, 1}, {3.0, 0.5});
  mat::Tape<double> tape;
  mat::TapeScope<double> scope(tape);
  auto l = mat::feature_loss(ant, fused);
  EXPECT_DOUBLE_EQ(l.item(), 0.25);
  tape.backward(l);
  ASSERT_TRUE(ant.has_grad());
  EXPECT_DOUBLE_EQ(ant.grad()[0], -1.0);
  EXPECT_DOUBLE_EQ(ant.grad()[1], 0.0);
  // The target side is detached.
  for (double g : fused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(FeatureLoss, MeanOverStepsAndChannels) {
  TD ant(Shape{2, 3, 2}, {0, 0, 1, 1, 7, 7, 0, 0, 0, 0, 7, 7});
  TD fused(Shape{2, 3, 2}, {9, 9, 1, 1, 2, 2, 9, 9, 0, 0, 0, 1});
  // Pairs (ant t, fused t+1): squared errors 1,1,1,1 | 0,0,0,1 over 8 entries.
  EXPECT_DOUBLE_EQ(mat::feature_loss(ant, fused).item(), 5.0 / 8.0);
}

TEST(FeatureLoss, SingleStepIsZero) {
  TD a(Shape{3, 1, 4}, 1.0);
  TD b(Shape{3, 1, 4}, -1.0);
  EXPECT_EQ(mat::feature_loss(a, b).item(), 0.0);
  EXPECT_THROW(mat::feature_loss(a, TD(Shape{3, 2, 4})), mat::DimensionError);
}

TEST(ClassificationLoss, HandValues) {
  TD logits(Shape{1, 3}, {1.0, 2.0, 3.0});
  EXPECT_NEAR(mat::classification_loss(logits, {0}).item(), 2.40760596444438, 1e-12);
  TD uniform(Shape{2, 24}, 0.3);
  EXPECT_NEAR(mat::classification_loss(uniform, {0, 23}).item(), std::log(24.0), 1e-12);
  EXPECT_ANY_THROW(mat::classification_loss(logits, {3}));
}

TEST(StageLoss, Arithmetic) {
  using mat::Stage;
  EXPECT_DOUBLE_EQ(mat::stage_loss<double>(Stage::kPretrain, 1.5, 0.25, std::nullopt), 1.75);
  EXPECT_DOUBLE_EQ(mat::stage_loss<double>(Stage::kFinetune, std::nullopt, std::nullopt, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(mat::stage_loss<double>(Stage::kFinetune, std::nullopt, 0.4, 2.0, 0.5), 2.2);
  EXPECT_DOUBLE_EQ(mat::stage_loss<double>(Stage::kFinetune, 9.0, 0.4, 2.0, 0.0), 2.0);
  EXPECT_THROW(mat::stage_loss<double>(Stage::kPretrain, 1.0, std::nullopt, std::nullopt), mat::ContractError);
  EXPECT_THROW(mat::stage_loss<double>(Stage::kFinetune, 1.0, 1.0, std::nullopt), mat::ContractError);
  EXPECT_THROW(mat::stage_loss<double>(Stage::kFinetune, std::nullopt, std::nullopt, 1.0, 0.3), mat::ContractError);
  mat::LossReport r;
  r.cross = 1.0;
  r.feat = 0.5;
  EXPECT_DOUBLE_EQ(mat::stage_loss(Stage::kPretrain, r), 1.5);
}

TEST(StageLoss, TensorForm) {
  auto cls = TD::scalar(2.0);
  auto feat = TD::scalar(0.4);
  auto l = mat::stage_loss<TD>(mat::Stage::kFinetune, std::nullopt, feat, cls, 0.5);
  EXPECT_DOUBLE_EQ(l.item(), 2.2);
}
