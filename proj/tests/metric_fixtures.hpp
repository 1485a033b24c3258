#pragma once

// Hand-built prediction sets for the metric tests: a 2x2 vocabulary, a
// tie-heavy 3x2 one and the default 6x4 layout.

#include <string>
#include <utility>
#include <vector>

#include "mat/metrics.hpp"

namespace mat_test {

struct Fixture {
  mat::ActionVocab vocab;
  std::vector<mat::Prediction> preds;
  std::vector<std::size_t> train_freq;
};

inline Fixture make_fixture(std::size_t verbs, std::size_t nouns, std::vector<std::pair<std::size_t, std::size_t>> pairs,
                     std::vector<std::vector<double>> scores, std::vector<std::size_t> targets,
                     std::vector<bool> unseen, std::vector<std::size_t> train_freq) {
  Fixture f;
  for (std::size_t v = 0; v < verbs; ++v) f.vocab.verbs.push_back("v" + std::to_string(v));
  for (std::size_t n = 0; n < nouns; ++n) f.vocab.nouns.push_back("n" + std::to_string(n));
  f.vocab.actions = std::move(pairs);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    f.preds.push_back({"s" + std::to_string(i), scores[i], targets[i], "P00", static_cast<bool>(unseen[i])});
  }
  f.train_freq = std::move(train_freq);
  return f;
}

inline Fixture tiny() {
  return make_fixture(2, 2, {{0, 0}, {0, 1}, {1, 0}, {1, 1}}, {{2, 1, 1, 0}, {0, 0, 0, 0}, {1, 3, 3, 2}}, {0, 3, 2},
                      {false, true, false}, {5, 1, 3, 2});
}

inline Fixture ties() {
  return make_fixture(3, 2, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}},
                      {{1, 1, 1, 1, 1}, {0, 2, 2, 1, 0}, {3, 0, 3, 0, 3}, {0, 0, 0, 0, 1}, {5, 4, 3, 2, 1}, {1, 2, 3, 4, 5}},
                      {4, 2, 0, 4, 1, 3}, {true, false, false, true, false, false}, {4, 4, 1, 0, 2});
}

inline Fixture default_layout() {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t v = 0; v < 6; ++v) {
    for (std::size_t n = 0; n < 4; ++n) pairs.emplace_back(v, n);
  }
  std::vector<std::vector<double>> scores(7, std::vector<double>(24));
  for (std::size_t s = 0; s < 7; ++s) {
    for (std::size_t a = 0; a < 24; ++a) scores[s][a] = double((7 * a + 3 * s) % 11);
  }
  std::vector<std::size_t> freq(24);
  for (std::size_t a = 0; a < 24; ++a) freq[a] = (a * 5) % 7;
  return make_fixture(6, 4, pairs, scores, {23, 0, 5, 17, 9, 9, 12}, {false, false, true, true, false, true, false},
                      freq);
}

}  // namespace mat_test
