#pragma once

// Synthetic anticipation world: a sparse Markov chain over verb-noun actions
// with dwell times, Gaussian per-modality emissions, noisy object detections,
// corpus export and the label oracle.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mat/io.hpp"
#include "mat/json_util.hpp"
#include "mat/rng.hpp"
#include "mat/text.hpp"

namespace mat {

struct ActionVocab {
  std::vector<std::string> verbs;
  std::vector<std::string> nouns;
  std::vector<std::pair<std::size_t, std::size_t>> actions;  // (verb id, noun id)

  std::size_t num_actions() const { return actions.size(); }
  std::size_t verb_of(std::size_t a) const { return actions.at(a).first; }
  std::size_t noun_of(std::size_t a) const { return actions.at(a).second; }
  std::string action_name(std::size_t a) const { return verbs[verb_of(a)] + " " + nouns[noun_of(a)]; }

  void validate() const {
    if (verbs.empty() || nouns.empty() || actions.empty()) throw ConfigError("vocab: empty verb, noun or action list");
    std::vector<bool> vseen(verbs.size()), nseen(nouns.size());
    for (const auto& [v, n] : actions) {
      if (v >= verbs.size() || n >= nouns.size()) throw DataError("vocab: action refers to unknown verb/noun");
      vseen[v] = true;
      nseen[n] = true;
    }
    if (std::find(vseen.begin(), vseen.end(), false) != vseen.end() ||
        std::find(nseen.begin(), nseen.end(), false) != nseen.end()) {
      throw DataError("vocab: every verb and noun must appear in at least one action");
    }
  }

  /// kind,id,name,verb_id,noun_id
  std::string to_csv() const {
    std::ostringstream out;
    out << "kind,id,name,verb_id,noun_id\n";
    for (std::size_t i = 0; i < verbs.size(); ++i) out << "verb," << i << ',' << verbs[i] << ",,\n";
    for (std::size_t i = 0; i < nouns.size(); ++i) out << "noun," << i << ',' << nouns[i] << ",,\n";
    for (std::size_t a = 0; a < actions.size(); ++a) {
      out << "action," << a << ',' << action_name(a) << ',' << verb_of(a) << ',' << noun_of(a) << '\n';
    }
    return out.str();
  }

  static ActionVocab from_csv(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.empty()) throw FormatError(path + ": empty vocabulary file");
    const auto col = header_index(lines[0], {"kind", "id", "name", "verb_id", "noun_id"}, path);
    ActionVocab v;
    std::map<std::size_t, std::string> verbs, nouns;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> actions;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
      if (lines[ln].empty()) continue;
      const auto f = split_fields(lines[ln]);
      if (f.size() < col.size()) throw FormatError(path + ":" + std::to_string(ln + 1) + ": too few fields");
      const auto& kind = f[col.at("kind")];
      const auto id = static_cast<std::size_t>(parse_int_field(f[col.at("id")], path, ln + 1, "id"));
      if (kind == "verb") {
        verbs[id] = f[col.at("name")];
      } else if (kind == "noun") {
        nouns[id] = f[col.at("name")];
      } else if (kind == "action") {
        actions[id] = {static_cast<std::size_t>(parse_int_field(f[col.at("verb_id")], path, ln + 1, "verb_id")),
                       static_cast<std::size_t>(parse_int_field(f[col.at("noun_id")], path, ln + 1, "noun_id"))};
      } else {
        throw FormatError(path + ":" + std::to_string(ln + 1) + ": unknown kind '" + kind + "'");
      }
    }
    auto dense = [&](const auto& m, auto& out, const char* what) {
      std::size_t expect = 0;
      for (const auto& [id, val] : m) {
        if (id != expect++) throw FormatError(path + ": " + what + " ids are not dense from 0");
        out.push_back(val);
      }
    };
    dense(verbs, v.verbs, "verb");
    dense(nouns, v.nouns, "noun");
    dense(actions, v.actions, "action");
    v.validate();
    return v;
  }

  bool operator==(const ActionVocab&) const = default;
};

enum class Informs { kVerb, kNoun, kAction };

inline std::string informs_name(Informs i) {
  return i == Informs::kVerb ? "verb" : i == Informs::kNoun ? "noun" : "action";
}

inline Informs parse_informs(const std::string& s) {
  if (s == "verb") return Informs::kVerb;
  if (s == "noun") return Informs::kNoun;
  if (s == "action") return Informs::kAction;
  throw ConfigError("informs must be verb, noun or action, got '" + s + "'");
}

struct EmissionConfig {
  std::string modality;
  Informs informs = Informs::kAction;
  std::size_t dim = 16;
  double sigma = 1.0;

  bool operator==(const EmissionConfig&) const = default;
};

struct WorldConfig {
  std::vector<std::string> verbs{"take", "put", "wash", "open", "close", "cut"};
  std::vector<std::string> nouns{"plate", "cup", "knife", "pan"};
  std::size_t num_actions = 24;
  /// Nonzero successors per transition row (s_P).
  std::size_t successors = 3;
  double dirichlet_alpha = 0.5;
  std::size_t dwell_min = 3;
  std::size_t dwell_max = 8;
  std::vector<EmissionConfig> emissions{{"rgb", Informs::kAction, 32, 2.5},
                                        {"flow", Informs::kVerb, 16, 2.0},
                                        {"audio", Informs::kVerb, 16, 3.0},
                                        {"obj_feat", Informs::kNoun, 16, 2.0}};
  double p_hit = 0.8;
  double distractor_rate = 0.5;
  std::size_t participants = 10;
  std::vector<std::size_t> held_out{8, 9};
  /// Probability that a frame's action annotation is missing (-1).
  double unlabeled_prob = 0.0;
  std::size_t descriptions_per_action = 10;
  std::size_t videos = 100;
  std::size_t frames_per_video = 300;

  void validate() const {
    if (verbs.empty() || nouns.empty()) throw ConfigError("world: need at least one verb and one noun");
    if (num_actions > verbs.size() * nouns.size()) {
      throw ConfigError("world: " + std::to_string(num_actions) + " actions exceed |verbs x nouns| = " +
                        std::to_string(verbs.size() * nouns.size()));
    }
    if (num_actions < std::max(verbs.size(), nouns.size())) {
      throw ConfigError("world: too few actions to cover every verb and noun");
    }
    if (successors == 0 || successors >= num_actions) {
      throw ConfigError("world: successors must be in [1, num_actions - 1]");
    }
    if (!(dirichlet_alpha > 0.0)) throw ConfigError("world: dirichlet_alpha must be positive");
    if (dwell_min == 0 || dwell_min > dwell_max) throw ConfigError("world: need 1 <= dwell_min <= dwell_max");
    if (p_hit < 0.0 || p_hit > 1.0) throw ConfigError("world: p_hit must lie in [0, 1]");
    if (distractor_rate < 0.0) throw ConfigError("world: distractor_rate must be non-negative");
    if (unlabeled_prob < 0.0 || unlabeled_prob > 1.0) throw ConfigError("world: unlabeled_prob must lie in [0, 1]");
    if (participants == 0) throw ConfigError("world: participants must be positive");
    for (auto h : held_out) {
      if (h >= participants) throw ConfigError("world: held-out participant out of range");
    }
    if (descriptions_per_action == 0) throw ConfigError("world: descriptions_per_action must be positive");
    for (const auto& e : emissions) {
      if (e.dim == 0) throw ConfigError("world: emission '" + e.modality + "' has zero dim");
      if (e.sigma < 0.0) throw ConfigError("world: emission '" + e.modality + "' has negative sigma");
      if (is_text_modality(e.modality)) throw ConfigError("world: '" + e.modality + "' is a text modality");
    }
  }

  Json to_json() const {
    Json em = Json::array();
    for (const auto& e : emissions) {
      em.push_back({{"modality", e.modality}, {"informs", informs_name(e.informs)}, {"dim", e.dim}, {"sigma", e.sigma}});
    }
    return {{"verbs", verbs},
            {"nouns", nouns},
            {"num_actions", num_actions},
            {"successors", successors},
            {"dirichlet_alpha", dirichlet_alpha},
            {"dwell_min", dwell_min},
            {"dwell_max", dwell_max},
            {"emissions", em},
            {"p_hit", p_hit},
            {"distractor_rate", distractor_rate},
            {"participants", participants},
            {"held_out", held_out},
            {"unlabeled_prob", unlabeled_prob},
            {"descriptions_per_action", descriptions_per_action},
            {"videos", videos},
            {"frames_per_video", frames_per_video}};
  }

  static WorldConfig from_json(const Json& j) {
    constexpr std::string_view ctx = "world";
    require_known_keys(j,
                       {"verbs", "nouns", "num_actions", "successors", "dirichlet_alpha", "dwell_min",
                        "dwell_max", "emissions", "p_hit", "distractor_rate", "participants", "held_out",
                        "unlabeled_prob", "descriptions_per_action", "videos", "frames_per_video"},
                       ctx);
    WorldConfig c;
    read_opt(j, "verbs", c.verbs, ctx);
    read_opt(j, "nouns", c.nouns, ctx);
    read_opt(j, "num_actions", c.num_actions, ctx);
    read_opt(j, "successors", c.successors, ctx);
    read_opt(j, "dirichlet_alpha", c.dirichlet_alpha, ctx);
    read_opt(j, "dwell_min", c.dwell_min, ctx);
    read_opt(j, "dwell_max", c.dwell_max, ctx);
    read_opt(j, "p_hit", c.p_hit, ctx);
    read_opt(j, "distractor_rate", c.distractor_rate, ctx);
    read_opt(j, "participants", c.participants, ctx);
    read_opt(j, "held_out", c.held_out, ctx);
    read_opt(j, "unlabeled_prob", c.unlabeled_prob, ctx);
    read_opt(j, "descriptions_per_action", c.descriptions_per_action, ctx);
    read_opt(j, "videos", c.videos, ctx);
    read_opt(j, "frames_per_video", c.frames_per_video, ctx);
    if (auto it = j.find("emissions"); it != j.end()) {
      if (!it->is_array()) throw ConfigError("world.emissions: expected an array");
      c.emissions.clear();
      for (const auto& e : *it) {
        require_known_keys(e, {"modality", "informs", "dim", "sigma"}, "world.emissions[]");
        EmissionConfig ec;
        std::string informs = "action";
        read_opt(e, "modality", ec.modality, "world.emissions[]");
        read_opt(e, "informs", informs, "world.emissions[]");
        read_opt(e, "dim", ec.dim, "world.emissions[]");
        read_opt(e, "sigma", ec.sigma, "world.emissions[]");
        ec.informs = parse_informs(informs);
        c.emissions.push_back(std::move(ec));
      }
    }
    c.validate();
    return c;
  }

  bool operator==(const WorldConfig&) const = default;
};

struct Emission {
  EmissionConfig config;
  std::vector<double> means;  // [classes, dim]

  bool operator==(const Emission&) const = default;
};

struct WorldSpec {
  WorldConfig config;
  std::uint64_t seed = 0;
  ActionVocab vocab;
  std::vector<double> transition;  // [C, C] row-stochastic
  std::vector<double> initial;     // [C]
  std::vector<Emission> emissions;

  std::size_t num_actions() const { return vocab.num_actions(); }
  double p(std::size_t from, std::size_t to) const { return transition[from * num_actions() + to]; }

  std::size_t classes_of(Informs i) const {
    return i == Informs::kVerb ? vocab.verbs.size() : i == Informs::kNoun ? vocab.nouns.size() : num_actions();
  }

  std::size_t informed_class(Informs i, std::size_t action) const {
    return i == Informs::kVerb ? vocab.verb_of(action) : i == Informs::kNoun ? vocab.noun_of(action) : action;
  }

  /// argmax_b P(b | a), ties to the lowest id.
  std::size_t most_likely_successor(std::size_t a) const {
    std::size_t best = 0;
    for (std::size_t b = 1; b < num_actions(); ++b) {
      if (p(a, b) > p(a, best)) best = b;
    }
    return best;
  }

  Json to_json() const {
    Json em = Json::array();
    for (const auto& e : emissions) em.push_back({{"modality", e.config.modality}, {"means", e.means}});
    Json actions = Json::array();
    for (const auto& [v, n] : vocab.actions) actions.push_back({v, n});
    return {{"config", config.to_json()}, {"seed", seed}, {"actions", actions},
            {"transition", transition}, {"initial", initial}, {"emission_means", em}};
  }

  static WorldSpec from_json(const Json& j) {
    try {
      WorldSpec w;
      w.config = WorldConfig::from_json(j.at("config"));
      w.seed = j.at("seed").get<std::uint64_t>();
      w.vocab.verbs = w.config.verbs;
      w.vocab.nouns = w.config.nouns;
      for (const auto& a : j.at("actions")) w.vocab.actions.emplace_back(a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>());
      w.vocab.validate();
      w.transition = j.at("transition").get<std::vector<double>>();
      w.initial = j.at("initial").get<std::vector<double>>();
      const auto& em = j.at("emission_means");
      if (em.size() != w.config.emissions.size()) throw FormatError("world: emission count mismatch");
      for (std::size_t i = 0; i < em.size(); ++i) {
        Emission e;
        e.config = w.config.emissions[i];
        if (em[i].at("modality").get<std::string>() != e.config.modality) throw FormatError("world: emission order mismatch");
        e.means = em[i].at("means").get<std::vector<double>>();
        if (e.means.size() != w.classes_of(e.config.informs) * e.config.dim) throw FormatError("world: emission means have wrong size");
        w.emissions.push_back(std::move(e));
      }
      const auto c = w.num_actions();
      if (w.transition.size() != c * c || w.initial.size() != c) throw FormatError("world: transition has wrong size");
      return w;
    } catch (const Json::exception& e) {
      throw FormatError(std::string("world: ") + e.what());
    }
  }

  bool operator==(const WorldSpec&) const = default;
};

namespace detail {
inline ActionVocab choose_actions(const WorldConfig& cfg, CounterRng& rng) {
  ActionVocab v;
  v.verbs = cfg.verbs;
  v.nouns = cfg.nouns;
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t a = 0; a < cfg.verbs.size(); ++a) {
    for (std::size_t b = 0; b < cfg.nouns.size(); ++b) all.emplace_back(a, b);
  }
  if (cfg.num_actions == all.size()) {
    v.actions = all;
    return v;
  }
  for (int attempt = 0; attempt < 10000; ++attempt) {
    auto pool = all;
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(cfg.num_actions);
    std::sort(pool.begin(), pool.end());
    v.actions = pool;
    try {
      v.validate();
      return v;
    } catch (const DataError&) {
    }
  }
  throw ConfigError("world: could not draw an action subset covering every verb and noun");
}
}  // namespace detail

/// Deterministic in (config, seed). Each transition row has s_P distinct
/// successors (never itself) with Dirichlet weights; the ring successor
/// (a + 1) mod C is always among them, which keeps the chain irreducible.
inline WorldSpec build_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  WorldSpec w;
  w.config = config;
  w.seed = seed;
  CounterRng root(seed);
  auto vocab_rng = root.derive(1);
  auto trans_rng = root.derive(2);
  auto emis_rng = root.derive(3);
  w.vocab = detail::choose_actions(config, vocab_rng);
  const std::size_t c = w.num_actions();
  w.transition.assign(c * c, 0.0);
  for (std::size_t a = 0; a < c; ++a) {
    std::vector<std::size_t> succ{(a + 1) % c};
    std::vector<std::size_t> others;
    for (std::size_t b = 0; b < c; ++b) {
      if (b != a && b != succ[0]) others.push_back(b);
    }
    trans_rng.shuffle(others.begin(), others.end());
    for (std::size_t i = 0; i + 1 < config.successors; ++i) succ.push_back(others[i]);
    const auto weights = trans_rng.dirichlet(succ.size(), config.dirichlet_alpha);
    double total = 0.0;
    for (std::size_t i = 0; i < succ.size(); ++i) {
      w.transition[a * c + succ[i]] = weights[i];
      total += weights[i];
    }
    for (std::size_t i = 0; i < succ.size(); ++i) w.transition[a * c + succ[i]] /= total;
  }
  w.initial.assign(c, 1.0 / double(c));
  for (const auto& ec : config.emissions) {
    Emission e;
    e.config = ec;
    e.means.resize(w.classes_of(ec.informs) * ec.dim);
    for (auto& m : e.means) m = emis_rng.normal();
    w.emissions.push_back(std::move(e));
  }
  return w;
}

struct Episode {
  std::string video_id;
  std::size_t participant = 0;
  std::vector<int> actions;  // true per-frame action
  std::vector<int> labels;   // annotated per-frame action, -1 when missing
  std::vector<std::vector<std::string>> objects;
  std::vector<FeatureMatrix> features;  // one per world emission, frames x dim
};

inline std::string video_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "V%04zu", index);
  return buf;
}

/// Detector scores for one frame: the active noun is seen with prob p_hit,
/// Poisson(lambda) distractors score in [0.15, 0.6), everything else below
/// the 0.15 threshold.
inline std::map<std::string, double> object_scores(const WorldSpec& w, std::size_t action, CounterRng& rng) {
  const auto& nouns = w.vocab.nouns;
  std::map<std::string, double> scores;
  for (const auto& n : nouns) scores[n] = rng.uniform(0.0, 0.15);
  const auto active = w.vocab.noun_of(action);
  const std::size_t distractors = rng.poisson(w.config.distractor_rate);
  for (std::size_t i = 0; i < distractors && nouns.size() > 1; ++i) {
    auto pick = rng.uniform_int(nouns.size() - 1);
    if (pick >= active) ++pick;
    scores[nouns[pick]] = std::max(scores[nouns[pick]], rng.uniform(0.15, 0.6));
  }
  if (rng.bernoulli(w.config.p_hit)) scores[nouns[active]] = rng.uniform(0.6, 1.0);
  return scores;
}

/// Samples an action chain with uniform dwell in [dwell_min, dwell_max] and
/// emits features and object lists per frame.
inline Episode generate_episode(const WorldSpec& w, std::size_t length, CounterRng& rng,
                                std::size_t video_index = 0) {
  Episode ep;
  ep.video_id = video_name(video_index);
  ep.participant = video_index % w.config.participants;
  const std::size_t c = w.num_actions();
  auto chain_rng = rng.derive(1);
  auto label_rng = rng.derive(2);
  auto object_rng = rng.derive(3);
  std::size_t action = chain_rng.categorical(w.initial);
  while (ep.actions.size() < length) {
    const auto span = w.config.dwell_max - w.config.dwell_min + 1;
    const std::size_t dwell = w.config.dwell_min + chain_rng.uniform_int(span);
    for (std::size_t i = 0; i < dwell && ep.actions.size() < length; ++i) ep.actions.push_back(int(action));
    action = chain_rng.categorical(std::span<const double>(w.transition.data() + action * c, c));
  }
  for (std::size_t f = 0; f < length; ++f) {
    const bool missing = w.config.unlabeled_prob > 0.0 && label_rng.bernoulli(w.config.unlabeled_prob);
    ep.labels.push_back(missing ? -1 : ep.actions[f]);
    ep.objects.push_back(top_objects(object_scores(w, std::size_t(ep.actions[f]), object_rng)));
  }
  for (std::size_t m = 0; m < w.emissions.size(); ++m) {
    const auto& e = w.emissions[m];
    auto noise_rng = rng.derive(10 + m);
    FeatureMatrix fm;
    fm.rows = length;
    fm.dim = e.config.dim;
    fm.values.resize(length * fm.dim);
    for (std::size_t f = 0; f < length; ++f) {
      const auto cls = w.informed_class(e.config.informs, std::size_t(ep.actions[f]));
      for (std::size_t k = 0; k < fm.dim; ++k) {
        fm.values[f * fm.dim + k] =
            static_cast<float>(e.means[cls * fm.dim + k] + e.config.sigma * noise_rng.normal());
      }
    }
    ep.features.push_back(std::move(fm));
  }
  return ep;
}

/// One anticipation segment as found in an episode.
struct SegmentStart {
  std::size_t start_frame = 0;
  std::size_t stop_frame = 0;
  std::size_t action = 0;
  std::size_t last_observed = 0;  // true action at the last observed frame
};

/// Every action start with a complete observation window.
inline std::vector<SegmentStart> eligible_segments(const Episode& ep, const WindowConfig& win) {
  std::vector<SegmentStart> out;
  const auto min_start = static_cast<std::size_t>(win.min_start_frame());
  for (std::size_t f = std::max<std::size_t>(1, min_start); f < ep.actions.size(); ++f) {
    if (ep.actions[f] == ep.actions[f - 1]) continue;
    SegmentStart s;
    s.start_frame = f;
    s.action = std::size_t(ep.actions[f]);
    s.stop_frame = f;
    while (s.stop_frame + 1 < ep.actions.size() && ep.actions[s.stop_frame + 1] == ep.actions[f]) ++s.stop_frame;
    s.last_observed = std::size_t(ep.actions[std::size_t(win.end_frame((long long)f)) - 1]);
    out.push_back(s);
  }
  return out;
}

struct OracleResult {
  double label_oracle_top1 = 0.0;
  double chance = 0.0;
  std::size_t count = 0;
};

/// Accuracy of predicting argmax_b P(b | last observed action), and 1/C.
inline OracleResult oracle_accuracy(const WorldSpec& w,
                                    const std::vector<std::pair<std::size_t, std::size_t>>& last_and_target) {
  OracleResult r;
  r.chance = 1.0 / double(w.num_actions());
  r.count = last_and_target.size();
  if (last_and_target.empty()) return r;
  std::size_t hits = 0;
  for (const auto& [a, target] : last_and_target) hits += w.most_likely_successor(a) == target;
  r.label_oracle_top1 = double(hits) / double(last_and_target.size());
  return r;
}

inline bool is_held_out(const WorldConfig& cfg, std::size_t participant) {
  return std::find(cfg.held_out.begin(), cfg.held_out.end(), participant) != cfg.held_out.end();
}

/// Held-out participants are eval-only. Seen participants also contribute
/// the videos of every tenth pass over the participant list (indices 90-99
/// for ten participants) to eval.
inline bool is_eval_video(const WorldConfig& cfg, std::size_t video_index) {
  const auto participant = video_index % cfg.participants;
  return is_held_out(cfg, participant) || (video_index / cfg.participants) % 10 == 9;
}

inline std::string participant_name(std::size_t p) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "P%02zu", p);
  return buf;
}

struct ExportSummary {
  std::size_t videos = 0;
  std::size_t segments = 0;
  std::size_t train_segments = 0;
  std::size_t eval_segments = 0;
  OracleResult eval_oracle;
};

/// Writes annotations.csv, splits.csv, vocab.csv, descriptions.json,
/// world.json, features/<video>_<modality>.afb and frames/<video>.csv.
inline ExportSummary export_corpus(const WorldSpec& w, std::size_t n_videos, std::size_t frames,
                                   const std::string& out_dir, const WindowConfig& win) {
  namespace fs = std::filesystem;
  win.validate();
  if (frames < std::size_t(win.min_start_frame())) {
    throw ConfigError("export: " + std::to_string(frames) + " frames cannot hold one observation window");
  }
  const fs::path root(out_dir);
  ensure_dir(root / "features");
  ensure_dir(root / "frames");
  CounterRng video_root = CounterRng(w.seed).derive(100);

  std::ostringstream ann, splits;
  ann << "narration_id,video_id,participant_id,start_frame,stop_frame,verb_class,noun_class,action_class\n";
  splits << "video_id,participant_id,split\n";
  ExportSummary summary;
  summary.videos = n_videos;
  std::vector<std::pair<std::size_t, std::size_t>> eval_pairs;
  for (std::size_t v = 0; v < n_videos; ++v) {
    auto rng = video_root.derive(v);
    const auto ep = generate_episode(w, frames, rng, v);
    const bool eval = is_eval_video(w.config, v);
    splits << ep.video_id << ',' << participant_name(ep.participant) << ',' << (eval ? "eval" : "train") << '\n';
    for (std::size_t m = 0; m < w.emissions.size(); ++m) {
      write_features((root / "features" / (ep.video_id + "_" + w.emissions[m].config.modality + ".afb")).string(),
                     ep.features[m]);
    }
    std::ostringstream fr;
    fr << "frame_idx,action_class,objects\n";
    for (std::size_t f = 0; f < frames; ++f) {
      fr << f << ',' << ep.labels[f] << ',' << detail::join(ep.objects[f], "|") << '\n';
    }
    write_text((root / "frames" / (ep.video_id + ".csv")).string(), fr.str());
    const auto segs = eligible_segments(ep, win);
    for (std::size_t k = 0; k < segs.size(); ++k) {
      const auto& s = segs[k];
      ann << ep.video_id << '_' << k << ',' << ep.video_id << ',' << participant_name(ep.participant) << ','
          << s.start_frame << ',' << s.stop_frame << ',' << w.vocab.verb_of(s.action) << ','
          << w.vocab.noun_of(s.action) << ',' << s.action << '\n';
      if (eval) {
        eval_pairs.emplace_back(s.last_observed, s.action);
        ++summary.eval_segments;
      } else {
        ++summary.train_segments;
      }
    }
    summary.segments += segs.size();
  }
  write_text((root / "annotations.csv").string(), ann.str());
  write_text((root / "splits.csv").string(), splits.str());
  write_text((root / "vocab.csv").string(), w.vocab.to_csv());
  write_text((root / "world.json").string(), w.to_json().dump(1) + "\n");

  std::vector<std::string> verbs_of, nouns_of;
  for (std::size_t a = 0; a < w.num_actions(); ++a) {
    verbs_of.push_back(w.vocab.verbs[w.vocab.verb_of(a)]);
    nouns_of.push_back(w.vocab.nouns[w.vocab.noun_of(a)]);
  }
  auto desc_rng = CounterRng(w.seed).derive(200);
  generate_description_bank(verbs_of, nouns_of, w.config.descriptions_per_action, desc_rng)
      .save((root / "descriptions.json").string());
  summary.eval_oracle = oracle_accuracy(w, eval_pairs);
  return summary;
}

inline WorldSpec load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return WorldSpec::from_json(j);
}

/// Stationary distribution by power iteration.
inline std::vector<double> stationary_distribution(const WorldSpec& w, std::size_t iterations = 20000) {
  const std::size_t c = w.num_actions();
  std::vector<double> pi(c, 1.0 / double(c)), next(c);
  for (std::size_t it = 0; it < iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = 0; b < c; ++b) next[b] += 0.5 * pi[a] * w.p(a, b);
    }
    for (std::size_t a = 0; a < c; ++a) next[a] += 0.5 * pi[a];  // lazy chain, same fixed point
    pi.swap(next);
  }
  return pi;
}

}  // namespace mat
