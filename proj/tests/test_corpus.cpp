#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "mat/corpus.hpp"
#include "mat/synthworld.hpp"
#include "test_support.hpp"

using mat::CounterRng;
using mat::WindowConfig;
using Names = std::vector<std::string>;

namespace {

const std::string kHeader =
    "narration_id,video_id,participant_id,start_frame,stop_frame,verb_class,noun_class,action_class\n";

std::string write(const mat_test::TempDir& dir, const std::string& name, const std::string& text) {
  const auto path = dir.file(name);
  std::ofstream(path) << text;
  return path;
}

// Small exported corpus shared by the loading tests.
class SmallCorpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new mat_test::TempDir("corpus_small");
    mat::WorldConfig c;
    c.unlabeled_prob = 0.1;
    auto w = mat::build_world(c, 3);
    mat::export_corpus(w, 20, 80, dir_->path().string(), WindowConfig{});
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static mat::Corpus load(mat::CorpusOptions opt = {100000, 100000, 0}) {
    return mat::load_corpus(dir_->path().string(), WindowConfig{}, opt);
  }
  static mat_test::TempDir* dir_;
};
mat_test::TempDir* SmallCorpus::dir_ = nullptr;

mat::ModelConfig config_for(const mat::Corpus& c) {
  mat::ModelConfig cfg;
  cfg.modalities = c.modality_specs();
  cfg.num_classes = c.num_actions();
  return cfg;
}

}  // namespace

TEST(Annotations, ValidAndSkippedRows) {
  mat_test::TempDir dir("ann_valid");
  const auto path = write(dir, "a.csv", kHeader + "n0,V0000,P00,40,45,1,2,9\nn1,V0000,P00,16,20,1,2,9\n");
  auto t = mat::parse_annotations(path, WindowConfig{});
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.skipped, 1u);
  EXPECT_EQ(t.rows[0].narration_id, "n0");
  EXPECT_EQ(t.rows[0].start_frame, 40);
  EXPECT_EQ(t.rows[0].action, 9u);
  EXPECT_EQ(t.rows[0].line, 2u);
}

TEST(Annotations, ErrorCitesLine) {
  mat_test::TempDir dir("ann_line");
  std::string text = kHeader;
  for (int i = 0; i < 5; ++i) text += "n,V0000,P00,40,45,1,2,9\n";
  text += "n,V0000,P00,4x,45,1,2,9\n";  // line 7
  const auto path = write(dir, "a.csv", text);
  try {
    mat::parse_annotations(path, WindowConfig{});
    FAIL() << "expected DataError";
  } catch (const mat::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":7:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("start_frame"), std::string::npos) << msg;
  }
}

TEST(Annotations, MissingColumnIsNamed) {
  mat_test::TempDir dir("ann_col");
  const auto path =
      write(dir, "a.csv", "narration_id,video_id,participant_id,start_frame,stop_frame,verb_class,action_class\n");
  try {
    mat::parse_annotations(path, WindowConfig{});
    FAIL() << "expected FormatError";
  } catch (const mat::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("noun_class"), std::string::npos) << e.what();
  }
  EXPECT_THROW(mat::parse_annotations(dir.file("absent.csv"), WindowConfig{}), mat::IoError);
}

TEST(TopObjects, Examples) {
  EXPECT_EQ(mat::top_objects({{"knife", 0.9}, {"tap", 0.5}, {"bowl", 0.2}, {"cup", 0.14}}),
            (Names{"knife", "tap", "bowl"}));
  std::map<std::string, double> seven{{"a", 0.3}, {"b", 0.9}, {"c", 0.5}, {"d", 0.5},
                                      {"e", 0.2}, {"f", 0.15}, {"g", 0.8}};
  EXPECT_EQ(mat::top_objects(seven), (Names{"b", "g", "c", "d", "a"}));
  EXPECT_EQ(mat::top_objects({{"x", 0.1}, {"y", 0.149}}), Names{});
  EXPECT_EQ(mat::top_objects({}), Names{});
}

TEST(CorruptActions, KeepProbabilities) {
  std::vector<int> labels(100000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int(i % 24);
  CounterRng rng(1);
  EXPECT_EQ(mat::corrupt_actions(labels, 1.0, rng, 24), labels);
  auto half = mat::corrupt_actions(labels, 0.5, rng, 24);
  std::size_t same = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) same += half[i] == labels[i];
  EXPECT_NEAR(double(same) / double(labels.size()), 0.5 + 0.5 / 24.0, 0.01);
  auto none = mat::corrupt_actions(labels, 0.0, rng, 24);
  std::vector<double> hist(24, 0.0);
  same = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    same += none[i] == labels[i];
    hist[std::size_t(none[i])] += 1.0;
  }
  EXPECT_NEAR(double(same) / double(labels.size()), 1.0 / 24.0, 0.005);
  for (double h : hist) EXPECT_NEAR(h / double(labels.size()), 1.0 / 24.0, 0.005);
  CounterRng r1(9), r2(9);
  EXPECT_EQ(mat::corrupt_actions(labels, 0.3, r1, 24), mat::corrupt_actions(labels, 0.3, r2, 24));
  EXPECT_THROW(mat::corrupt_actions(labels, 1.5, rng, 24), mat::ConfigError);
}

TEST(MakeBatches, SizesAndOrder) {
  std::vector<std::size_t> classes(10, 0);
  CounterRng rng(1);
  auto b = mat::make_batches(classes, 3, rng, false, false);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(b[3], (std::vector<std::size_t>{9}));
  auto shuffled = mat::make_batches(classes, 3, rng, true, false);
  std::vector<std::size_t> flat;
  for (const auto& x : shuffled) flat.insert(flat.end(), x.begin(), x.end());
  std::sort(flat.begin(), flat.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(flat[i], i);
  EXPECT_THROW(mat::make_batches(classes, 0, rng, false, false), mat::ConfigError);
}

TEST(MakeBatches, DedupOnDefaultCorpus) {
  mat_test::TempDir dir("corpus_default");
  mat::WorldConfig c;
  mat::export_corpus(mat::build_world(c, 7), c.videos, c.frames_per_video, dir.path().string(), WindowConfig{});
  auto corpus = mat::load_corpus(dir.path().string(), WindowConfig{}, {100000, 100000, 0});
  std::vector<std::size_t> classes;
  for (const auto& s : corpus.train) classes.push_back(s.action);
  CounterRng rng(3);
  auto batches = mat::make_batches(classes, 16, rng, true, true);
  std::size_t duplicates = 0;
  std::size_t covered = 0;
  for (const auto& b : batches) {
    std::set<std::size_t> seen;
    for (auto i : b) duplicates += !seen.insert(classes[i]).second;
    covered += b.size();
    EXPECT_LE(b.size(), 16u);
  }
  EXPECT_EQ(duplicates, 0u);
  EXPECT_EQ(covered, classes.size());
}

TEST(FeatureFiles, RoundTripAndErrors) {
  mat_test::TempDir dir("afb");
  mat::FeatureMatrix m{3, 2, {1.5f, -0.0f, 3e-38f, 7.0f, -2.25f, 1e10f}};
  mat::write_features(dir.file("x.afb"), m);
  EXPECT_EQ(mat::read_features(dir.file("x.afb")), m);
  const auto bytes = mat::encode_features(m);
  EXPECT_EQ(bytes.substr(0, 4), "AFB1");
  EXPECT_EQ(bytes.size(), 12u + 24u);
  EXPECT_THROW(mat::decode_features("XFB1" + bytes.substr(4), "x"), mat::FormatError);
  EXPECT_THROW(mat::decode_features(bytes.substr(0, bytes.size() - 2), "x"), mat::IntegrityError);
}

TEST_F(SmallCorpus, LoadsSplitsAndFrequencies) {
  auto c = load();
  EXPECT_EQ(c.videos.size(), 20u);
  EXPECT_FALSE(c.train.empty());
  EXPECT_FALSE(c.eval.empty());
  for (const auto& s : c.train) EXPECT_FALSE(s.unseen);
  for (const auto& s : c.eval) EXPECT_EQ(s.unseen, s.participant == "P08" || s.participant == "P09") << s.participant;
  std::size_t total = 0;
  for (auto f : c.train_frequency) total += f;
  EXPECT_EQ(total, c.train.size());
  EXPECT_EQ(c.dense_dims.at("rgb"), 32u);
  EXPECT_EQ(c.modality_specs().size(), 6u);

  auto capped = load({10, 5, 0});
  EXPECT_EQ(capped.train.size(), 10u);
  EXPECT_EQ(capped.eval.size(), 5u);
  EXPECT_THROW(mat::load_corpus(dir_->file("nope"), WindowConfig{}), mat::IoError);
}

TEST_F(SmallCorpus, SelectModalities) {
  auto c = load();
  auto cfg = config_for(c);
  mat::TextCache cache;
  CounterRng rng(1);
  std::vector<const mat::Segment*> segs{&c.train[0], &c.train[1]};
  const auto full = mat::build_input(c, segs, cfg, {}, rng, cache);
  const std::size_t m = cfg.modalities.size();
  auto count_present = [&](const mat::ModelInput& in) {
    std::vector<std::size_t> per_row(in.batch * in.steps, 0);
    for (std::size_t r = 0; r < per_row.size(); ++r) {
      for (std::size_t j = 0; j < m; ++j) per_row[r] += in.present[r * m + j];
    }
    return per_row;
  };
  for (auto n : count_present(full)) EXPECT_EQ(n, m);

  auto all = full;
  mat::select_modalities(all, cfg, mat::modality_names());
  EXPECT_EQ(all.present, full.present);

  auto three = full;
  mat::select_modalities(three, cfg, {"flow", "obj_text", "act_text"});
  for (auto n : count_present(three)) EXPECT_EQ(n, 3u);
  EXPECT_EQ(three.present[cfg.modality_index("flow")], 1);
  EXPECT_EQ(three.present[cfg.modality_index("rgb")], 0);

  auto rgb = full;
  mat::select_modalities(rgb, cfg, {"rgb"});
  for (auto n : count_present(rgb)) EXPECT_EQ(n, 1u);

  auto empty = full;
  EXPECT_THROW(mat::select_modalities(empty, cfg, {}), mat::ConfigError);
  EXPECT_THROW(mat::select_modalities(empty, cfg, {"depth"}), mat::ConfigError);
}

TEST_F(SmallCorpus, BuildInputContents) {
  auto c = load();
  auto cfg = config_for(c);
  mat::TextCache cache;
  CounterRng rng(2);
  const auto& seg = c.train[3];
  mat::BatchOptions opt;
  opt.with_descriptions = true;
  opt.description_mode = mat::SampleMode::kEval;
  auto in = mat::build_input(c, {&seg}, cfg, opt, rng, cache);
  ASSERT_EQ(in.batch, 1u);
  ASSERT_EQ(in.steps, 16u);
  const auto rgb = cfg.modality_index("rgb");
  const auto& fm = c.videos[seg.video].features.at("rgb");
  ASSERT_EQ(in.dense[rgb].size(), 16u * 32u);
  for (std::size_t i = 0; i < 16 * 32; ++i) ASSERT_EQ(in.dense[rgb][i], fm.values[seg.first_frame * 32 + i]);

  const auto act = cfg.modality_index("act_text");
  const auto& labels = c.videos[seg.video].labels;
  for (std::size_t t = 0; t < 16; ++t) {
    const int l = labels[seg.first_frame + t];
    const auto expect = mat::render_action_prompt(
        {l < 0 ? std::nullopt : std::optional<std::string>(c.vocab.action_name(std::size_t(l)))});
    EXPECT_EQ(in.text[act][t], cache.get(expect)) << t;
  }
  ASSERT_EQ(in.descriptions.size(), 1u);
  EXPECT_EQ(in.descriptions[0], cache.get(c.descriptions.at(seg.action).front()));

  // Some frame in the corpus is unlabeled and renders as "no action".
  bool any_missing = false;
  for (const auto& v : c.videos) any_missing = any_missing || std::count(v.labels.begin(), v.labels.end(), -1) > 0;
  EXPECT_TRUE(any_missing);
}

TEST_F(SmallCorpus, CorruptionOnlyTouchesActionText) {
  auto c = load();
  auto cfg = config_for(c);
  mat::TextCache cache;
  std::vector<const mat::Segment*> segs;
  for (std::size_t i = 0; i < 8; ++i) segs.push_back(&c.train[i]);
  CounterRng r1(5), r2(5);
  auto clean = mat::build_input(c, segs, cfg, {}, r1, cache);
  mat::BatchOptions noisy;
  noisy.action_keep_prob = 0.0;
  auto corrupted = mat::build_input(c, segs, cfg, noisy, r2, cache);
  const auto act = cfg.modality_index("act_text");
  const auto obj = cfg.modality_index("obj_text");
  EXPECT_NE(clean.text[act], corrupted.text[act]);
  EXPECT_EQ(clean.text[obj], corrupted.text[obj]);
  EXPECT_EQ(clean.dense, corrupted.dense);
}
