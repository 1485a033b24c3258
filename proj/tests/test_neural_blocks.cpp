#include <gtest/gtest.h>

#include <cmath>

#include "mat/gradcheck.hpp"
#include "mat/nn.hpp"

using mat::BoolMatrix;
using mat::CounterRng;
using mat::Shape;
using TD = mat::Tensor<double>;

namespace {

TD rnd(CounterRng& rng, Shape s) { return mat::random_tensor(rng, std::move(s), -1.0, 1.0); }

// Fresh init uses tiny weights; scale them up so attention is far from uniform.
void perturb(mat::ParamList<double>& params, CounterRng& rng, double sd) {
  for (auto& [name, t] : params) {
    for (auto& v : t.values()) v += rng.normal(0.0, sd);
  }
}

bool rows_equal_bitwise(const TD& a, const TD& b, std::size_t row, std::size_t d) {
  for (std::size_t c = 0; c < d; ++c) {
    if (a[row * d + c] != b[row * d + c]) return false;
  }
  return true;
}

}  // namespace

TEST(CausalMask, SmallCases) {
  auto m1 = mat::causal_mask(1);
  EXPECT_TRUE(m1(0, 0));
  auto m3 = mat::causal_mask(3);
  const bool expect3[3][3] = {{true, false, false}, {true, true, false}, {true, true, true}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(m3(i, j), expect3[i][j]) << i << "," << j;
  }
  auto e3 = mat::causal_mask(3, true);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(e3(i, j), j < i) << i << "," << j;
  }
}

TEST(MultiHeadAttention, SingleKeyIsValueProjection) {
  CounterRng rng(1);
  mat::AttentionParams<double> p(8, 2, rng);
  mat::ParamList<double> params;
  p.collect("a", params);
  perturb(params, rng, 0.3);
  auto q = rnd(rng, {2, 3, 8});
  auto kv = rnd(rng, {2, 1, 8});
  auto out = mat::mha_forward(p, q, kv, kv);
  auto ref = p.output(p.value(kv));
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out[(g * 3 + i) * 8 + c], ref[g * 8 + c], 1e-12);
    }
  }
}

TEST(MultiHeadAttention, WeightsAreRowStochastic) {
  CounterRng rng(2);
  mat::AttentionParams<double> p(8, 4, rng);
  mat::ParamList<double> params;
  p.collect("a", params);
  perturb(params, rng, 0.5);
  auto x = rnd(rng, {3, 6, 8});
  auto w = mat::attention_weights(p, x, mat::causal_mask(6));
  ASSERT_EQ(w.shape(), (Shape{3, 4, 6, 6}));
  for (std::size_t r = 0; r < 3 * 4 * 6; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GE(w[r * 6 + j], 0.0);
      total += w[r * 6 + j];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    const std::size_t i = r % 6;
    for (std::size_t j = i + 1; j < 6; ++j) EXPECT_EQ(w[r * 6 + j], 0.0);
  }
}

TEST(MultiHeadAttention, CausalOutputIgnoresFutureBitwise) {
  CounterRng rng(3);
  mat::EncoderBlockParams<double> p(8, 2, rng);
  mat::ParamList<double> params;
  p.collect("b", params);
  perturb(params, rng, 0.3);
  const std::size_t t = 7;
  auto x = rnd(rng, {1, t, 8});
  auto base = mat::encoder_block_forward(p, x, mat::causal_mask(t));
  for (std::size_t changed = 0; changed < t; ++changed) {
    auto y = x.clone();
    for (std::size_t c = 0; c < 8; ++c) y[changed * 8 + c] += 5.0;
    auto out = mat::encoder_block_forward(p, y, mat::causal_mask(t));
    for (std::size_t row = 0; row < changed; ++row) {
      EXPECT_TRUE(rows_equal_bitwise(base, out, row, 8)) << "row " << row << " moved when " << changed << " changed";
    }
    EXPECT_FALSE(rows_equal_bitwise(base, out, changed, 8));
  }
}

TEST(EncoderBlock, ZeroResidualBranchesAreIdentity) {
  CounterRng rng(4);
  mat::EncoderBlockParams<double> p(8, 2, rng);
  for (auto& v : p.attention.output.weight.values()) v = 0.0;
  for (auto& v : p.ff_out.weight.values()) v = 0.0;
  auto x = rnd(rng, {2, 5, 8});
  auto y = mat::encoder_block_forward(p, x);
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(EncoderBlock, PreservesShape) {
  CounterRng rng(5);
  mat::EncoderBlockParams<double> p(64, 4, rng);
  auto x = rnd(rng, {1, 16, 64});
  EXPECT_EQ(mat::encoder_block_forward(p, x).shape(), (Shape{1, 16, 64}));
  EXPECT_EQ(mat::encoder_block_forward(p, x, mat::causal_mask(16)).shape(), (Shape{1, 16, 64}));
}

TEST(EncoderBlock, PrefixMatchesFullRows) {
  CounterRng rng(6);
  mat::EncoderBlockParams<double> p(8, 2, rng);
  mat::ParamList<double> params;
  p.collect("b", params);
  perturb(params, rng, 0.3);
  auto x = rnd(rng, {3, 5, 8});
  auto full = mat::encoder_block_forward(p, x);
  auto pre = mat::encoder_block_prefix(p, x, 2);
  ASSERT_EQ(pre.shape(), (Shape{3, 2, 8}));
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(pre[(g * 2 + i) * 8 + c], full[(g * 5 + i) * 8 + c], 1e-12);
      }
    }
  }
}

TEST(EncoderBlock, UnmaskedIsPermutationEquivariant) {
  CounterRng rng(7);
  mat::EncoderBlockParams<double> p(8, 2, rng);
  mat::ParamList<double> params;
  p.collect("b", params);
  perturb(params, rng, 0.3);
  auto x = rnd(rng, {1, 4, 8});
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  TD xp(Shape{1, 4, 8});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 8; ++c) xp[i * 8 + c] = x[perm[i] * 8 + c];
  }
  auto y = mat::encoder_block_forward(p, x);
  auto yp = mat::encoder_block_forward(p, xp);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp[i * 8 + c], y[perm[i] * 8 + c], 1e-12);
  }
}

TEST(EncoderBlock, HeadCountMustDivideDim) {
  CounterRng rng(8);
  EXPECT_THROW(mat::EncoderBlockParams<double>(10, 4, rng), mat::ConfigError);
}

TEST(PositionalTable, AddsLeadingRows) {
  CounterRng rng(9);
  mat::PositionalTable<double> pos(6, 4, rng);
  TD x(Shape{2, 3, 4}, 1.0);
  auto y = pos.apply(x);
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(y[g * 12 + i], 1.0 + pos.table[i]);
  }
  EXPECT_THROW(pos.apply(TD(Shape{1, 7, 4})), mat::DimensionError);
}

TEST(Init, WeightStatistics) {
  CounterRng rng(10);
  mat::LinearParams<double> lin(64, 256, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : lin.weight.vec()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(lin.weight.numel());
  EXPECT_NEAR(s / n, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(s2 / n), mat::kInitStd, 0.001);
  for (double v : lin.bias.vec()) EXPECT_EQ(v, 0.0);
  mat::LayerNormParams<double> ln(5);
  for (double v : ln.gamma.vec()) EXPECT_EQ(v, 1.0);
  for (double v : ln.beta.vec()) EXPECT_EQ(v, 0.0);
}
