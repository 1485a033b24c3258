#include <gtest/gtest.h>

#include <cmath>

#include "metric_fixtures.hpp"

using mat::MetricsReport;
using mat_test::default_layout;
using mat_test::Fixture;
using mat_test::ties;
using mat_test::tiny;

namespace {

// Expected cell: count, top1, top5, class-mean top1, class-mean recall@5.
void expect_cell(const MetricsReport& r, const std::string& task, const std::string& split, std::size_t n,
                 double t1, double t5, double cm1, double cm5) {
  const auto& c = r.at(task, split);
  SCOPED_TRACE(task + "/" + split);
  EXPECT_EQ(c.count, n);
  ASSERT_TRUE(c.top1 && c.top5 && c.class_mean_top1 && c.class_mean_recall5);
  EXPECT_NEAR(*c.top1, t1, 1e-12);
  EXPECT_NEAR(*c.top5, t5, 1e-12);
  EXPECT_NEAR(*c.class_mean_top1, cm1, 1e-12);
  EXPECT_NEAR(*c.class_mean_recall5, cm5, 1e-12);
}

MetricsReport report_of(const Fixture& f) { return mat::build_report(f.preds, f.vocab, f.train_freq); }

}  // namespace

// Reference values below come from an independent brute-force script.

TEST(Report, TinyFixture) {
  const auto r = report_of(tiny());
  expect_cell(r, "verb", "overall", 3, 2.0 / 3, 1, 3.0 / 4, 1);
  expect_cell(r, "verb", "unseen", 1, 0, 1, 0, 1);
  expect_cell(r, "verb", "tail", 2, 1.0 / 2, 1, 1.0 / 2, 1);
  expect_cell(r, "noun", "overall", 3, 1.0 / 3, 1, 1.0 / 4, 1);
  expect_cell(r, "noun", "unseen", 1, 0, 1, 0, 1);
  expect_cell(r, "noun", "tail", 1, 0, 1, 0, 1);
  expect_cell(r, "action", "overall", 3, 1.0 / 3, 1, 1.0 / 3, 1);
  expect_cell(r, "action", "unseen", 1, 0, 1, 0, 1);
  const auto& empty = r.at("action", "tail");
  EXPECT_EQ(empty.count, 0u);
  EXPECT_FALSE(empty.top1.has_value());
  EXPECT_FALSE(empty.class_mean_recall5.has_value());
}

TEST(Report, TiesFixture) {
  const auto r = report_of(ties());
  expect_cell(r, "verb", "overall", 6, 2.0 / 3, 1, 2.0 / 3, 1);
  expect_cell(r, "verb", "unseen", 2, 1.0 / 2, 1, 1.0 / 2, 1);
  expect_cell(r, "verb", "tail", 2, 1.0 / 2, 1, 1.0 / 2, 1);
  expect_cell(r, "noun", "overall", 6, 1.0 / 2, 1, 3.0 / 8, 1);
  expect_cell(r, "noun", "unseen", 2, 1, 1, 1, 1);
  expect_cell(r, "noun", "tail", 2, 0, 1, 0, 1);
  expect_cell(r, "action", "overall", 6, 1.0 / 3, 1, 3.0 / 10, 1);
  expect_cell(r, "action", "unseen", 2, 1.0 / 2, 1, 1.0 / 2, 1);
  expect_cell(r, "action", "tail", 1, 0, 1, 0, 1);
}

TEST(Report, DefaultLayoutFixture) {
  const auto r = report_of(default_layout());
  expect_cell(r, "verb", "overall", 7, 0, 6.0 / 7, 0, 5.0 / 6);
  expect_cell(r, "verb", "unseen", 3, 0, 2.0 / 3, 0, 2.0 / 3);
  expect_cell(r, "verb", "tail", 2, 0, 1, 0, 1);
  expect_cell(r, "noun", "overall", 7, 2.0 / 7, 1, 1.0 / 6, 1);
  expect_cell(r, "noun", "unseen", 3, 1.0 / 3, 1, 1.0 / 3, 1);
  expect_cell(r, "noun", "tail", 4, 1.0 / 2, 1, 1.0 / 2, 1);
  expect_cell(r, "action", "overall", 7, 0, 2.0 / 7, 0, 1.0 / 4);
  expect_cell(r, "action", "unseen", 3, 0, 1.0 / 3, 0, 1.0 / 3);
  expect_cell(r, "action", "tail", 1, 0, 0, 0, 0);
}

TEST(Marginals, SumOfSoftmax) {
  const auto t = tiny();
  auto vn = mat::derive_verb_noun(t.preds[0].scores, t.vocab);
  EXPECT_NEAR(vn.verb[0], 0.73105857863000479, 1e-15);
  EXPECT_NEAR(vn.verb[1], 0.2689414213699951, 1e-15);
  EXPECT_NEAR(vn.noun[0], 0.73105857863000479, 1e-15);
  EXPECT_NEAR(vn.noun[1], 0.2689414213699951, 1e-15);

  const auto ti = ties();
  auto vt = mat::derive_verb_noun(ti.preds[0].scores, ti.vocab);
  EXPECT_NEAR(vt.verb[0], 0.4, 1e-15);
  EXPECT_NEAR(vt.verb[1], 0.4, 1e-15);
  EXPECT_NEAR(vt.verb[2], 0.2, 1e-15);
  EXPECT_NEAR(vt.noun[0], 0.6, 1e-15);
  EXPECT_NEAR(vt.noun[1], 0.4, 1e-15);

  const auto d = default_layout();
  auto vd = mat::derive_verb_noun(d.preds[0].scores, d.vocab);
  const double verb_ref[6] = {0.32695446001019174, 0.12237123773493024, 0.042935378728850115,
                              0.33263951186090274, 0.11671045979664027, 0.058388951868485126};
  const double noun_ref[4] = {0.063459615470023212, 0.17323401877302319, 0.42880146100394895, 0.33450490475300493};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(vd.verb[i], verb_ref[i], 1e-14);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(vd.noun[i], noun_ref[i], 1e-14);

  auto mx = mat::derive_verb_noun(t.preds[0].scores, t.vocab, mat::Marginal::kMax);
  EXPECT_GT(mx.verb[0], mx.verb[1]);
}

TEST(TopK, TiesAndContracts) {
  const std::vector<double> s{1, 3, 3, 2};
  EXPECT_TRUE(mat::topk_hit(s, 1, 1));
  EXPECT_FALSE(mat::topk_hit(s, 2, 1));
  EXPECT_TRUE(mat::topk_hit(s, 2, 2));
  EXPECT_EQ(mat::rank_of(s, 0), 3u);
  EXPECT_THROW(mat::topk_hit(s, 0, 0), mat::ContractError);
  EXPECT_THROW(mat::topk_hit(s, 0, 5), mat::ContractError);
  EXPECT_THROW(mat::topk_hit(s, 4, 1), mat::DataError);
  EXPECT_THROW(mat::topk_accuracy({}, {}, 1), mat::ContractError);
  EXPECT_THROW(mat::topk_accuracy({s}, {0, 1}, 1), mat::DimensionError);
}

TEST(TopK, UniformScorerIsFiveOverC) {
  mat::CounterRng rng(3);
  std::vector<std::vector<double>> scores;
  std::vector<std::size_t> targets;
  for (int i = 0; i < 24000; ++i) {
    scores.emplace_back(24, 0.5);
    targets.push_back(rng.uniform_int(24));
  }
  EXPECT_NEAR(mat::topk_accuracy(scores, targets, 5), 5.0 / 24.0, 0.01);
  EXPECT_NEAR(mat::topk_accuracy(scores, targets, 1), 1.0 / 24.0, 0.005);
}

TEST(TailClasses, LowestFrequenciesStableOrder) {
  auto t = mat::tail_classes({5, 1, 3, 2, 9, 1, 0, 7, 4, 8});
  EXPECT_EQ(t, (std::vector<bool>{false, true, false, false, false, false, true, false, false, false}));
  auto t3 = mat::tail_classes({4, 4, 4});
  EXPECT_EQ(t3, (std::vector<bool>{true, false, false}));
}

TEST(Report, MonotoneTransformInvariance) {
  auto d = default_layout();
  const auto base = report_of(d);
  for (auto& p : d.preds) {
    for (auto& s : p.scores) s = std::exp(0.3 * s) - 7.0;
  }
  const auto moved = report_of(d);
  for (const auto& split : mat::report_splits()) EXPECT_EQ(base.at("action", split), moved.at("action", split));
}

TEST(Report, Invariants) {
  for (const auto& f : {tiny(), ties(), default_layout()}) {
    const auto r = report_of(f);
    for (const auto& task : mat::report_tasks()) {
      EXPECT_EQ(r.at(task, "overall").count, f.preds.size());
      for (const auto& split : mat::report_splits()) {
        const auto& c = r.at(task, split);
        if (!c.top1) continue;
        for (double v : {*c.top1, *c.top5, *c.class_mean_top1, *c.class_mean_recall5}) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
        EXPECT_GE(*c.top5, *c.top1);
        EXPECT_GE(*c.class_mean_recall5, *c.class_mean_top1);
      }
    }
  }
}

TEST(Report, JsonAndCsv) {
  const auto r = report_of(tiny());
  const auto back = MetricsReport::from_json(mat::Json::parse(r.to_json().dump()));
  EXPECT_EQ(back, r);
  auto j = r.to_json();
  j["verb"]["overall"]["extra"] = 1;
  EXPECT_THROW(MetricsReport::from_json(j), mat::FormatError);
  j = r.to_json();
  j.erase("noun");
  EXPECT_THROW(MetricsReport::from_json(j), mat::FormatError);

  const auto csv = r.to_csv();
  EXPECT_EQ(csv.rfind("task,split,metric,value\n", 0), 0u);
  EXPECT_NE(csv.find("action,tail,top1,\n"), std::string::npos);
  EXPECT_NE(csv.find("verb,overall,count,3\n"), std::string::npos);

  const auto row = mat::summary_values(r);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), long(mat::summary_columns().size() - 1));
  EXPECT_EQ(row.substr(row.rfind(',') + 1), "3");
}

TEST(Report, RejectsBadInput) {
  auto t = tiny();
  EXPECT_THROW(mat::build_report({}, t.vocab, t.train_freq), mat::ContractError);
  EXPECT_THROW(mat::build_report(t.preds, t.vocab, {1, 2}), mat::DimensionError);
  t.preds[0].target = 9;
  EXPECT_THROW(mat::build_report(t.preds, t.vocab, t.train_freq), mat::DataError);
  t = tiny();
  t.preds[1].scores.pop_back();
  EXPECT_THROW(mat::build_report(t.preds, t.vocab, t.train_freq), mat::DimensionError);
}
