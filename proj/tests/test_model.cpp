#include <gtest/gtest.h>

#include <set>

#include "mat/model.hpp"

using mat::CounterRng;
using mat::Shape;
using TD = mat::Tensor<double>;
using Model = mat::Model<double>;

namespace {

constexpr std::size_t kRgbDim = 5;
constexpr std::size_t kBuckets = 32;

mat::ModelConfig small_config() {
  mat::ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.fuser_layers = 1;
  c.decoder_layers = 2;
  c.contrast_dim = 4;
  c.max_len = 6;
  c.num_classes = 3;
  c.text_buckets = kBuckets;
  c.modalities = {{"rgb", mat::ModalityKind::kDense, kRgbDim}, {"act_text", mat::ModalityKind::kText, 0}};
  return c;
}

Model make_model(mat::ModelConfig cfg = small_config(), std::uint64_t seed = 1) {
  Model m(std::move(cfg), seed);
  CounterRng rng(seed + 100);
  for (auto& [name, t] : m.parameters()) {
    if (name == "head.log_temperature") continue;
    for (auto& v : t.values()) v += rng.normal(0.0, 0.3);
  }
  return m;
}

// Owns the sparse features that ModelInput points into.
struct Batch {
  std::vector<mat::SparseVec> texts;
  std::vector<mat::SparseVec> descs;
  mat::ModelInput in;
};

Batch make_batch(std::size_t b, std::size_t t, std::uint64_t seed) {
  CounterRng rng(seed);
  Batch out;
  out.in.batch = b;
  out.in.steps = t;
  std::vector<float> rgb(b * t * kRgbDim);
  for (auto& v : rgb) v = static_cast<float>(rng.uniform() * 2.0 - 1.0);
  out.texts.resize(b * t);
  for (auto& s : out.texts) s = {{static_cast<std::uint32_t>(rng.uniform_int(kBuckets))}, {1.0}};
  out.descs.resize(b);
  for (auto& s : out.descs) s = {{static_cast<std::uint32_t>(rng.uniform_int(kBuckets))}, {1.0}};
  out.in.dense = {rgb, {}};
  out.in.text.assign(2, {});
  for (auto& s : out.texts) out.in.text[1].push_back(&s);
  for (auto& s : out.descs) out.in.descriptions.push_back(&s);
  out.in.present.assign(b * t * 2, 1);
  return out;
}

}  // namespace

TEST(Model, CausalOverTimeBitwise) {
  auto model = make_model();
  auto batch = make_batch(2, 5, 3);
  auto base = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  for (std::size_t step = 0; step < 5; ++step) {
    auto changed = batch;
    for (std::size_t c = 0; c < kRgbDim; ++c) changed.in.dense[0][step * kRgbDim + c] += 2.0f;
    auto out = mat::model_forward(model, changed.in, mat::Stage::kFinetune);
    for (std::size_t s = 0; s < 5; ++s) {
      bool same = true;
      for (std::size_t c = 0; c < 8; ++c) same = same && base.anticipated[s * 8 + c] == out.anticipated[s * 8 + c];
      EXPECT_EQ(same, s < step) << "step " << s << " after changing " << step;
    }
    // The other segment in the batch is untouched.
    for (std::size_t i = 40; i < 80; ++i) EXPECT_EQ(base.anticipated[i], out.anticipated[i]);
  }
}

TEST(Model, ExclusiveMaskDropsSelfAttention) {
  auto cfg = small_config();
  cfg.exclusive_mask = true;
  auto model = make_model(cfg);
  auto batch = make_batch(1, 4, 4);
  auto base = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  for (double v : base.anticipated.vec()) EXPECT_TRUE(std::isfinite(v));
  // Step 0 has no past to attend: only the residual path reaches the output,
  // so a one-step input gives the same first row.
  auto one = make_batch(1, 1, 4);
  one.in.dense[0].assign(batch.in.dense[0].begin(), batch.in.dense[0].begin() + kRgbDim);
  one.in.text[1] = {batch.in.text[1][0]};
  auto first = mat::model_forward(model, one.in, mat::Stage::kFinetune);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(first.anticipated[c], base.anticipated[c], 1e-12);
  auto changed = batch;
  for (std::size_t c = 0; c < kRgbDim; ++c) changed.in.dense[0][3 * kRgbDim + c] += 2.0f;
  auto out = mat::model_forward(model, changed.in, mat::Stage::kFinetune);
  for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(base.anticipated[i], out.anticipated[i]);
}

TEST(Model, PresenceMaskChangesOutput) {
  auto model = make_model();
  auto batch = make_batch(2, 3, 5);
  auto full = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  for (std::size_t i = 1; i < batch.in.present.size(); i += 2) batch.in.present[i] = 0;
  auto rgb_only = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  for (std::size_t i = 0; i < full.logits.numel(); ++i) {
    EXPECT_GT(std::abs(full.logits[i] - rgb_only.logits[i]), 1e-9) << i;
  }
  // Inputs of an absent modality are not read.
  batch.texts[0] = {{7}, {100.0}};
  auto again = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  EXPECT_EQ(again.logits.vec(), rgb_only.logits.vec());
}

TEST(Model, StageHeads) {
  auto model = make_model();
  auto batch = make_batch(3, 4, 6);
  auto pre = mat::model_forward(model, batch.in, mat::Stage::kPretrain);
  EXPECT_FALSE(pre.logits.defined());
  ASSERT_EQ(pre.video.shape(), (Shape{3, 4}));
  ASSERT_EQ(pre.text.shape(), (Shape{3, 4}));
  for (const auto* e : {&pre.video, &pre.text}) {
    for (std::size_t r = 0; r < 3; ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < 4; ++c) ss += (*e)[r * 4 + c] * (*e)[r * 4 + c];
      EXPECT_NEAR(ss, 1.0, 1e-9);
    }
  }
  auto fin = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  EXPECT_FALSE(fin.video.defined());
  EXPECT_EQ(fin.logits.shape(), (Shape{3, 3}));
  EXPECT_EQ(fin.anchor.shape(), (Shape{3, 8}));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(fin.anchor[c], fin.anticipated[3 * 8 + c]);

  batch.in.descriptions.pop_back();
  EXPECT_THROW(mat::model_forward(model, batch.in, mat::Stage::kPretrain), mat::DimensionError);
}

TEST(Model, AnchorOnFused) {
  auto cfg = small_config();
  cfg.anchor_on_fused = true;
  auto model = make_model(cfg);
  auto batch = make_batch(2, 3, 7);
  auto out = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.anchor[8 + c], out.fused[(3 + 2) * 8 + c]);
}

TEST(Model, BatchPermutationEquivariance) {
  auto model = make_model();
  auto batch = make_batch(3, 4, 8);
  auto out = mat::model_forward(model, batch.in, mat::Stage::kFinetune);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permuted = make_batch(3, 4, 8);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 4 * kRgbDim; ++i) {
      permuted.in.dense[0][b * 4 * kRgbDim + i] = batch.in.dense[0][perm[b] * 4 * kRgbDim + i];
    }
    for (std::size_t s = 0; s < 4; ++s) permuted.in.text[1][b * 4 + s] = batch.in.text[1][perm[b] * 4 + s];
  }
  auto pout = mat::model_forward(model, permuted.in, mat::Stage::kFinetune);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(pout.logits[b * 3 + c], out.logits[perm[b] * 3 + c], 1e-12);
  }
}

TEST(Model, InputValidation) {
  auto model = make_model();
  auto batch = make_batch(2, 3, 9);
  auto bad = batch;
  bad.in.dense[0].pop_back();
  EXPECT_THROW(mat::model_forward(model, bad.in, mat::Stage::kFinetune), mat::DimensionError);
  auto too_long = make_batch(1, 7, 9);
  EXPECT_THROW(mat::model_forward(model, too_long.in, mat::Stage::kFinetune), mat::DimensionError);
  auto fewer = batch;
  fewer.in.dense.pop_back();
  fewer.in.text.pop_back();
  EXPECT_THROW(mat::model_forward(model, fewer.in, mat::Stage::kFinetune), mat::ConfigError);
}

TEST(Model, ParameterNamesAreUnique) {
  auto model = make_model();
  auto params = model.parameters();
  std::set<std::string> names;
  std::set<const void*> storage;
  for (const auto& [name, t] : params) {
    EXPECT_TRUE(names.insert(name).second) << name;
    EXPECT_TRUE(storage.insert(t.impl().get()).second) << name;
  }
  EXPECT_TRUE(names.count("proj.rgb.weight"));
  EXPECT_TRUE(names.count("proj.act_text.table"));
  EXPECT_TRUE(names.count("head.log_temperature"));
  EXPECT_TRUE(names.count("classifier.weight"));
  EXPECT_NEAR(model.temperature(), 0.07, 1e-12);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto cfg = small_config();
  cfg.exclusive_mask = true;
  auto back = mat::ModelConfig::from_json(cfg.to_json());
  EXPECT_EQ(back, cfg);
  auto j = cfg.to_json();
  j["dropout"] = 0.1;
  EXPECT_THROW(mat::ModelConfig::from_json(j), mat::ConfigError);
  j = cfg.to_json();
  j["heads"] = 3;
  EXPECT_THROW(mat::ModelConfig::from_json(j), mat::ConfigError);
  j = cfg.to_json();
  j["modalities"] = mat::Json::array();
  EXPECT_THROW(mat::ModelConfig::from_json(j), mat::ConfigError);
  EXPECT_NO_THROW(mat::ModelConfig::from_json(j, false));
}
