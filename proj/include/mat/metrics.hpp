#pragma once

// Top-k, class-mean and Recall@5 metrics over overall/unseen/tail splits,
// with verb and noun scores derived from action logits.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mat/json_util.hpp"
#include "mat/synthworld.hpp"

namespace mat {

struct Prediction {
  std::string segment_id;
  std::vector<double> scores;  // C action logits
  std::size_t target = 0;
  std::string participant;
  bool unseen = false;
};

enum class Marginal { kSum, kMax };

struct VerbNounScores {
  std::vector<double> verb;
  std::vector<double> noun;
};

inline std::vector<double> softmax_probs(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - mx);
  for (auto& x : p) x /= total;
  return p;
}

/// Softmax over actions, then each verb (noun) collects the probability of
/// its actions: summed (default) or the maximum.
inline VerbNounScores derive_verb_noun(std::span<const double> logits, const ActionVocab& vocab,
                                       Marginal mode = Marginal::kSum) {
  if (logits.size() != vocab.num_actions()) throw DimensionError("derive_verb_noun: score count != action count");
  const auto p = softmax_probs(logits);
  VerbNounScores out{std::vector<double>(vocab.verbs.size(), 0.0), std::vector<double>(vocab.nouns.size(), 0.0)};
  for (std::size_t a = 0; a < p.size(); ++a) {
    auto& v = out.verb[vocab.verb_of(a)];
    auto& n = out.noun[vocab.noun_of(a)];
    if (mode == Marginal::kSum) {
      v += p[a];
      n += p[a];
    } else {
      v = std::max(v, p[a]);
      n = std::max(n, p[a]);
    }
  }
  return out;
}

/// Position of `target` when classes are ordered by descending score, ties
/// by ascending id.
inline std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  std::size_t rank = 0;
  const double st = scores[target];
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] > st || (scores[c] == st && c < target)) ++rank;
  }
  return rank;
}

inline bool topk_hit(std::span<const double> scores, std::size_t target, std::size_t k) {
  if (k == 0 || k > scores.size()) {
    throw ContractError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  if (target >= scores.size()) throw DataError("topk: target class out of range");
  return rank_of(scores, target) < k;
}

inline double topk_accuracy(const std::vector<std::vector<double>>& scores, const std::vector<std::size_t>& targets,
                            std::size_t k) {
  if (scores.size() != targets.size()) throw DimensionError("topk_accuracy: scores/targets length mismatch");
  if (scores.empty()) throw ContractError("topk_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += topk_hit(scores[i], targets[i], k);
  return double(hits) / double(scores.size());
}

/// Unweighted mean over classes (with at least one selected sample) of the
/// per-class hit rate. Empty selection -> nullopt.
inline std::optional<double> class_mean_metric(const std::vector<bool>& hits, const std::vector<std::size_t>& targets,
                                               const std::vector<bool>& selected) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_class;  // hits, count
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (!selected.empty() && !selected[i]) continue;
    auto& [h, n] = per_class[targets[i]];
    h += hits[i];
    ++n;
  }
  if (per_class.empty()) return std::nullopt;
  double total = 0.0;
  for (const auto& [c, hn] : per_class) total += double(hn.first) / double(hn.second);
  return total / double(per_class.size());
}

/// The ceil(0.2 * C) classes with the lowest training frequency, ties by
/// ascending id.
inline std::vector<bool> tail_classes(const std::vector<std::size_t>& train_frequency, double fraction = 0.2) {
  const std::size_t c = train_frequency.size();
  const auto n_tail = static_cast<std::size_t>(std::ceil(fraction * double(c) - 1e-12));
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < c; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return train_frequency[a] < train_frequency[b]; });
  std::vector<bool> tail(c, false);
  for (std::size_t i = 0; i < n_tail && i < c; ++i) tail[order[i]] = true;
  return tail;
}

struct SplitMasks {
  std::vector<bool> overall;
  std::vector<bool> unseen;
  std::vector<bool> tail;
};

/// unseen: held-out participants; tail: target among the tail classes of
/// this task. `targets` and `train_frequency` are per task (verb/noun/action).
inline SplitMasks split_masks(const std::vector<std::size_t>& targets, const std::vector<bool>& unseen,
                              const std::vector<std::size_t>& train_frequency) {
  const auto tail = tail_classes(train_frequency);
  SplitMasks m;
  m.overall.assign(targets.size(), true);
  m.unseen = unseen;
  m.tail.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) m.tail[i] = tail.at(targets[i]);
  return m;
}

struct MetricCell {
  std::optional<double> top1;
  std::optional<double> top5;
  std::optional<double> class_mean_top1;
  std::optional<double> class_mean_recall5;
  std::size_t count = 0;

  bool operator==(const MetricCell&) const = default;
};

inline const std::vector<std::string>& report_tasks() {
  static const std::vector<std::string> v{"verb", "noun", "action"};
  return v;
}

inline const std::vector<std::string>& report_splits() {
  static const std::vector<std::string> v{"overall", "unseen", "tail"};
  return v;
}

struct MetricsReport {
  std::map<std::string, std::map<std::string, MetricCell>> cells;  // task -> split -> cell

  const MetricCell& at(const std::string& task, const std::string& split) const { return cells.at(task).at(split); }

  Json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    Json j = Json::object();
    for (const auto& [task, splits] : cells) {
      for (const auto& [split, c] : splits) {
        j[task][split] = {{"top1", opt(c.top1)},
                          {"top5", opt(c.top5)},
                          {"class_mean_top1", opt(c.class_mean_top1)},
                          {"class_mean_recall5", opt(c.class_mean_recall5)},
                          {"count", c.count}};
      }
    }
    return j;
  }

  static MetricsReport from_json(const Json& j) {
    auto opt = [](const Json& v) -> std::optional<double> {
      if (v.is_null()) return std::nullopt;
      return v.get<double>();
    };
    MetricsReport r;
    try {
      for (const auto& task : report_tasks()) {
        for (const auto& split : report_splits()) {
          const auto& c = j.at(task).at(split);
          require_known_keys(c, {"top1", "top5", "class_mean_top1", "class_mean_recall5", "count"}, "report cell");
          MetricCell cell;
          cell.top1 = opt(c.at("top1"));
          cell.top5 = opt(c.at("top5"));
          cell.class_mean_top1 = opt(c.at("class_mean_top1"));
          cell.class_mean_recall5 = opt(c.at("class_mean_recall5"));
          cell.count = c.at("count").get<std::size_t>();
          r.cells[task][split] = cell;
        }
      }
    } catch (const Json::exception& e) {
      throw FormatError(std::string("metrics report: ") + e.what());
    } catch (const ConfigError& e) {
      throw FormatError(std::string("metrics report: ") + e.what());
    }
    return r;
  }

  /// task,split,metric,value (empty value when absent)
  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "task,split,metric,value\n";
    for (const auto& task : report_tasks()) {
      for (const auto& split : report_splits()) {
        const auto& c = at(task, split);
        const std::pair<const char*, std::optional<double>> rows[] = {{"top1", c.top1},
                                                                     {"top5", c.top5},
                                                                     {"class_mean_top1", c.class_mean_top1},
                                                                     {"class_mean_recall5", c.class_mean_recall5}};
        for (const auto& [name, v] : rows) {
          out << task << ',' << split << ',' << name << ',';
          if (v) out << *v;
          out << '\n';
        }
        out << task << ',' << split << ",count," << c.count << '\n';
      }
    }
    return out.str();
  }

  bool operator==(const MetricsReport&) const = default;
};

/// Fills one cell from per-sample hit flags under a selection mask.
inline MetricCell metric_cell(const std::vector<bool>& hit1, const std::vector<bool>& hit5,
                              const std::vector<std::size_t>& targets, const std::vector<bool>& selected) {
  MetricCell cell;
  std::size_t n = 0, h1 = 0, h5 = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!selected[i]) continue;
    ++n;
    h1 += hit1[i];
    h5 += hit5[i];
  }
  cell.count = n;
  if (n == 0) return cell;
  cell.top1 = double(h1) / double(n);
  cell.top5 = double(h5) / double(n);
  cell.class_mean_top1 = class_mean_metric(hit1, targets, selected);
  cell.class_mean_recall5 = class_mean_metric(hit5, targets, selected);
  return cell;
}

/// Full report. For tasks with fewer than five classes, "top5" uses k = C.
inline MetricsReport build_report(const std::vector<Prediction>& preds, const ActionVocab& vocab,
                                  const std::vector<std::size_t>& action_train_frequency,
                                  Marginal mode = Marginal::kSum) {
  if (preds.empty()) throw ContractError("build_report: no predictions");
  if (action_train_frequency.size() != vocab.num_actions()) throw DimensionError("build_report: frequency table size");
  std::vector<std::size_t> verb_freq(vocab.verbs.size(), 0), noun_freq(vocab.nouns.size(), 0);
  for (std::size_t a = 0; a < vocab.num_actions(); ++a) {
    verb_freq[vocab.verb_of(a)] += action_train_frequency[a];
    noun_freq[vocab.noun_of(a)] += action_train_frequency[a];
  }
  std::vector<bool> unseen;
  for (const auto& p : preds) unseen.push_back(p.unseen);
  MetricsReport report;
  for (const auto& task : report_tasks()) {
    std::vector<std::size_t> targets;
    std::vector<bool> hit1, hit5;
    for (const auto& p : preds) {
      if (p.target >= vocab.num_actions()) throw DataError("build_report: target out of range for " + p.segment_id);
      std::vector<double> scores;
      std::size_t target = p.target;
      if (task == "action") {
        scores = p.scores;
      } else {
        const auto vn = derive_verb_noun(p.scores, vocab, mode);
        scores = task == "verb" ? vn.verb : vn.noun;
        target = task == "verb" ? vocab.verb_of(p.target) : vocab.noun_of(p.target);
      }
      targets.push_back(target);
      hit1.push_back(topk_hit(scores, target, 1));
      hit5.push_back(topk_hit(scores, target, std::min<std::size_t>(5, scores.size())));
    }
    const auto& freq = task == "action" ? action_train_frequency : task == "verb" ? verb_freq : noun_freq;
    const auto masks = split_masks(targets, unseen, freq);
    report.cells[task]["overall"] = metric_cell(hit1, hit5, targets, masks.overall);
    report.cells[task]["unseen"] = metric_cell(hit1, hit5, targets, masks.unseen);
    report.cells[task]["tail"] = metric_cell(hit1, hit5, targets, masks.tail);
  }
  return report;
}

/// Column names of the one-row-per-run summaries (ablation and sweep CSVs).
inline const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> v{
      "top1_action", "top5_action", "cm_top1_action", "cm_recall5_action", "top1_verb", "top5_verb",
      "cm_recall5_verb", "top1_noun", "top5_noun", "cm_recall5_noun", "count"};
  return v;
}

/// Overall-split values in summary_columns() order.
inline std::string summary_values(const MetricsReport& r) {
  std::ostringstream out;
  out.precision(9);
  auto put = [&](const std::optional<double>& v) {
    if (v) out << *v;
    out << ',';
  };
  const auto& a = r.at("action", "overall");
  const auto& v = r.at("verb", "overall");
  const auto& n = r.at("noun", "overall");
  put(a.top1);
  put(a.top5);
  put(a.class_mean_top1);
  put(a.class_mean_recall5);
  put(v.top1);
  put(v.top5);
  put(v.class_mean_recall5);
  put(n.top1);
  put(n.top5);
  put(n.class_mean_recall5);
  out << a.count;
  return out.str();
}

}  // namespace mat
