#pragma once

// Corpus loading, segment windows, label corruption, modality selection and
// batch assembly.

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mat/io.hpp"
#include "mat/log.hpp"
#include "mat/model.hpp"
#include "mat/synthworld.hpp"
#include "mat/text.hpp"

namespace mat {

struct SegmentDescriptor {
  std::string narration_id;
  std::string video_id;
  std::string participant_id;
  long long start_frame = 0;
  long long stop_frame = 0;
  std::size_t verb = 0;
  std::size_t noun = 0;
  std::size_t action = 0;
  std::size_t line = 0;
};

struct AnnotationTable {
  std::vector<SegmentDescriptor> rows;
  std::size_t skipped = 0;  // rows without enough history
};

inline const std::vector<std::string>& annotation_columns() {
  static const std::vector<std::string> cols{"narration_id", "video_id",   "participant_id", "start_frame",
                                             "stop_frame",   "verb_class", "noun_class",     "action_class"};
  return cols;
}

/// Parses an EK-style annotation CSV. Rows whose observation window would
/// start before frame 0 are skipped and counted.
inline AnnotationTable parse_annotations(const std::string& path, const WindowConfig& win) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw FormatError(path + ": empty annotation file");
  const auto col = header_index(lines[0], annotation_columns(), path);
  AnnotationTable table;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t ln = i + 1;
    if (lines[i].empty()) continue;
    const auto f = split_fields(lines[i]);
    if (f.size() < col.size()) {
      throw FormatError(path + ":" + std::to_string(ln) + ": expected " + std::to_string(col.size()) + " fields");
    }
    SegmentDescriptor d;
    d.line = ln;
    d.narration_id = f[col.at("narration_id")];
    d.video_id = f[col.at("video_id")];
    d.participant_id = f[col.at("participant_id")];
    d.start_frame = parse_int_field(f[col.at("start_frame")], path, ln, "start_frame");
    d.stop_frame = parse_int_field(f[col.at("stop_frame")], path, ln, "stop_frame");
    const auto verb = parse_int_field(f[col.at("verb_class")], path, ln, "verb_class");
    const auto noun = parse_int_field(f[col.at("noun_class")], path, ln, "noun_class");
    const auto action = parse_int_field(f[col.at("action_class")], path, ln, "action_class");
    if (verb < 0 || noun < 0 || action < 0) throw DataError(path + ":" + std::to_string(ln) + ": negative class id");
    d.verb = std::size_t(verb);
    d.noun = std::size_t(noun);
    d.action = std::size_t(action);
    if (win.first_frame(d.start_frame) < 0) {
      ++table.skipped;
      continue;
    }
    table.rows.push_back(std::move(d));
  }
  if (table.skipped) log_info("skipped " + std::to_string(table.skipped) + " annotation rows with insufficient history");
  return table;
}

/// Each label is kept with probability p, otherwise replaced by a uniform
/// draw over all C actions. Expected preserved fraction: p + (1 - p) / C.
inline std::vector<int> corrupt_actions(const std::vector<int>& labels, double keep_prob, CounterRng& rng,
                                        std::size_t num_actions) {
  if (keep_prob < 0.0 || keep_prob > 1.0) throw ConfigError("corrupt_actions: p must lie in [0, 1]");
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = rng.bernoulli(keep_prob) ? labels[i] : int(rng.uniform_int(num_actions));
  }
  return out;
}

/// Per-video frame data.
struct VideoData {
  std::string id;
  std::string participant;
  std::vector<int> labels;
  std::vector<std::vector<std::string>> objects;
  std::map<std::string, FeatureMatrix> features;  // dense modality -> frames x dim
  std::size_t frames = 0;
};

struct Segment {
  std::string narration_id;
  std::size_t video = 0;  // index into Corpus::videos
  std::size_t first_frame = 0;
  std::size_t action = 0;
  std::size_t verb = 0;
  std::size_t noun = 0;
  std::string participant;
  bool unseen = false;
};

struct CorpusOptions {
  std::size_t max_train = 2000;
  std::size_t max_eval = 500;
  std::uint64_t subsample_seed = 0;
};

struct Corpus {
  std::string root;
  WindowConfig window;
  ActionVocab vocab;
  DescriptionBank descriptions;
  std::vector<VideoData> videos;
  std::vector<Segment> train;
  std::vector<Segment> eval;
  std::map<std::string, std::size_t> dense_dims;  // modality -> native dim
  std::vector<std::size_t> train_frequency;       // per action class
  std::size_t skipped = 0;

  std::size_t num_actions() const { return vocab.num_actions(); }

  /// Registry of every modality this corpus can feed, in canonical order.
  std::vector<ModalitySpec> modality_specs() const {
    std::vector<ModalitySpec> out;
    for (const auto& name : modality_names()) {
      if (is_text_modality(name)) {
        out.push_back({name, ModalityKind::kText, 0});
      } else if (auto it = dense_dims.find(name); it != dense_dims.end()) {
        out.push_back({name, ModalityKind::kDense, it->second});
      }
    }
    return out;
  }
};

namespace detail {
inline std::vector<std::size_t> subsample(std::size_t n, std::size_t cap, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n <= cap) return idx;
  CounterRng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}
}  // namespace detail

/// Loads a corpus directory written by export_corpus (or any directory with
/// the same files). Segments are capped to the requested counts by a seeded
/// subsample. Eval segments whose participant never appears in training are
/// marked unseen.
inline Corpus load_corpus(const std::string& dir, const WindowConfig& window, const CorpusOptions& opt = {}) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("corpus directory not found: " + dir);
  Corpus c;
  c.root = dir;
  c.window = window;
  c.vocab = ActionVocab::from_csv((root / "vocab.csv").string());
  c.descriptions = DescriptionBank::load((root / "descriptions.json").string());
  c.descriptions.require_complete(c.vocab.num_actions());

  std::map<std::string, std::string> split_of;
  const auto split_path = (root / "splits.csv").string();
  const auto split_lines = read_lines(split_path);
  if (split_lines.empty()) throw FormatError(split_path + ": empty file");
  const auto scol = header_index(split_lines[0], {"video_id", "participant_id", "split"}, split_path);
  std::set<std::string> train_participants;
  for (std::size_t i = 1; i < split_lines.size(); ++i) {
    if (split_lines[i].empty()) continue;
    const auto f = split_fields(split_lines[i]);
    if (f.size() < scol.size()) throw FormatError(split_path + ":" + std::to_string(i + 1) + ": too few fields");
    const auto& split = f[scol.at("split")];
    if (split != "train" && split != "eval") {
      throw FormatError(split_path + ":" + std::to_string(i + 1) + ": split must be train or eval");
    }
    split_of[f[scol.at("video_id")]] = split;
    if (split == "train") train_participants.insert(f[scol.at("participant_id")]);
  }

  const auto table = parse_annotations((root / "annotations.csv").string(), window);
  c.skipped = table.skipped;
  std::map<std::string, std::size_t> video_index;
  auto video_of = [&](const SegmentDescriptor& d) -> std::size_t {
    if (auto it = video_index.find(d.video_id); it != video_index.end()) return it->second;
    VideoData v;
    v.id = d.video_id;
    v.participant = d.participant_id;
    const auto frames_path = (root / "frames" / (d.video_id + ".csv")).string();
    const auto lines = read_lines(frames_path);
    if (lines.empty()) throw FormatError(frames_path + ": empty file");
    const auto fcol = header_index(lines[0], {"frame_idx", "action_class", "objects"}, frames_path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto f = split_fields(lines[i]);
      if (f.size() < fcol.size()) throw FormatError(frames_path + ":" + std::to_string(i + 1) + ": too few fields");
      const auto idx = parse_int_field(f[fcol.at("frame_idx")], frames_path, i + 1, "frame_idx");
      if (idx != static_cast<long long>(v.labels.size())) {
        throw FormatError(frames_path + ":" + std::to_string(i + 1) + ": frame indices must be consecutive from 0");
      }
      const auto label = parse_int_field(f[fcol.at("action_class")], frames_path, i + 1, "action_class");
      if (label < -1 || label >= static_cast<long long>(c.vocab.num_actions())) {
        throw DataError(frames_path + ":" + std::to_string(i + 1) + ": action_class out of range");
      }
      v.labels.push_back(int(label));
      const auto& obj = f[fcol.at("objects")];
      v.objects.push_back(obj.empty() ? std::vector<std::string>{} : split_fields(obj, '|'));
    }
    v.frames = v.labels.size();
    for (const auto& name : modality_names()) {
      if (is_text_modality(name)) continue;
      const auto fpath = root / "features" / (d.video_id + "_" + name + ".afb");
      if (!fs::exists(fpath)) continue;
      auto fm = read_features(fpath.string());
      if (fm.rows != v.frames) {
        throw DataError(fpath.string() + ": " + std::to_string(fm.rows) + " rows but " + std::to_string(v.frames) +
                        " annotated frames");
      }
      if (auto it = c.dense_dims.find(name); it == c.dense_dims.end()) {
        c.dense_dims[name] = fm.dim;
      } else if (it->second != fm.dim) {
        throw DataError(fpath.string() + ": dimension differs from other videos");
      }
      v.features.emplace(name, std::move(fm));
    }
    c.videos.push_back(std::move(v));
    video_index[d.video_id] = c.videos.size() - 1;
    return c.videos.size() - 1;
  };

  std::vector<Segment> train, eval;
  for (const auto& d : table.rows) {
    if (d.action >= c.vocab.num_actions() || d.verb != c.vocab.verb_of(d.action) || d.noun != c.vocab.noun_of(d.action)) {
      throw DataError("annotations.csv:" + std::to_string(d.line) + ": class ids inconsistent with vocabulary");
    }
    auto it = split_of.find(d.video_id);
    if (it == split_of.end()) throw DataError("annotations.csv:" + std::to_string(d.line) + ": video not in splits.csv");
    Segment s;
    s.narration_id = d.narration_id;
    s.video = video_of(d);
    s.first_frame = static_cast<std::size_t>(window.first_frame(d.start_frame));
    if (s.first_frame + window.frames() > c.videos[s.video].frames) {
      throw DataError("annotations.csv:" + std::to_string(d.line) + ": window runs past the end of the video");
    }
    s.action = d.action;
    s.verb = d.verb;
    s.noun = d.noun;
    s.participant = d.participant_id;
    s.unseen = it->second == "eval" && !train_participants.count(d.participant_id);
    (it->second == "train" ? train : eval).push_back(std::move(s));
  }
  for (auto i : detail::subsample(train.size(), opt.max_train, opt.subsample_seed)) c.train.push_back(train[i]);
  for (auto i : detail::subsample(eval.size(), opt.max_eval, opt.subsample_seed + 1)) c.eval.push_back(eval[i]);
  for (const auto& v : c.videos) {
    for (const auto& [name, dim] : c.dense_dims) {
      if (!v.features.count(name)) throw DataError("video " + v.id + " lacks features for " + name);
    }
  }
  c.train_frequency.assign(c.vocab.num_actions(), 0);
  for (const auto& s : c.train) ++c.train_frequency[s.action];
  return c;
}

/// Last observed true label (from the frame annotations) for each segment.
inline std::vector<std::pair<std::size_t, std::size_t>> last_observed_pairs(const Corpus& c,
                                                                            const std::vector<Segment>& segs) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& s : segs) {
    const int label = c.videos[s.video].labels[s.first_frame + c.window.frames() - 1];
    if (label >= 0) out.emplace_back(std::size_t(label), s.action);
  }
  return out;
}

/// Index batches covering every segment once. With dedup_classes, a batch
/// never holds two segments of the same target class; when the remaining
/// pool cannot fill a batch with distinct classes, the batch is closed early.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& classes, std::size_t batch,
                                                          CounterRng& rng, bool shuffle, bool dedup_classes) {
  if (batch == 0) throw ConfigError("make_batches: batch size must be positive");
  std::vector<std::size_t> order(classes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  if (!dedup_classes) {
    for (std::size_t i = 0; i < order.size(); i += batch) {
      out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch));
    }
    return out;
  }
  std::vector<std::size_t> pool = order;
  std::size_t short_batches = 0;
  while (!pool.empty()) {
    std::vector<std::size_t> cur;
    std::set<std::size_t> used;
    std::vector<std::size_t> rest;
    for (auto i : pool) {
      if (cur.size() < batch && !used.count(classes[i])) {
        used.insert(classes[i]);
        cur.push_back(i);
      } else {
        rest.push_back(i);
      }
    }
    if (cur.size() < batch && !rest.empty()) ++short_batches;
    out.push_back(std::move(cur));
    pool = std::move(rest);
  }
  if (short_batches) log_debug("make_batches: " + std::to_string(short_batches) + " batches closed early to keep classes distinct");
  return out;
}

/// Interned hashed text features; references stay valid for the cache's life.
class TextCache {
 public:
  explicit TextCache(std::size_t buckets = kDefaultBuckets) : buckets_(buckets) {}

  const SparseVec* get(const std::string& text) {
    auto it = cache_.find(text);
    if (it == cache_.end()) it = cache_.emplace(text, embed_text(text, buckets_)).first;
    return &it->second.vec;
  }

  std::size_t buckets() const { return buckets_; }
  std::size_t size() const { return cache_.size(); }

 private:
  std::size_t buckets_;
  std::unordered_map<std::string, TextFeature> cache_;
};

struct BatchOptions {
  /// Keep probability for action-text labels (1 = clean).
  double action_keep_prob = 1.0;
  /// Additive Gaussian noise on dense features (training augmentation).
  double augment_sigma = 0.0;
  bool with_descriptions = false;
  SampleMode description_mode = SampleMode::kTrain;
  /// Present modality names; empty means all registered modalities.
  std::vector<std::string> present;
};

/// Marks modalities outside `keep` absent; fusion substitutes missing tokens.
inline void select_modalities(ModelInput& in, const ModelConfig& cfg, const std::vector<std::string>& keep) {
  if (keep.empty()) throw ConfigError("select_modalities: empty modality mask");
  std::vector<bool> on(cfg.modalities.size(), false);
  for (const auto& name : keep) on[cfg.modality_index(name)] = true;
  const std::size_t m = cfg.modalities.size();
  for (std::size_t r = 0; r < in.batch * in.steps; ++r) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!on[j]) in.present[r * m + j] = 0;
    }
  }
}

/// Assembles the model input for a list of segments.
inline ModelInput build_input(const Corpus& c, const std::vector<const Segment*>& segs, const ModelConfig& cfg,
                              const BatchOptions& opt, CounterRng& rng, TextCache& cache) {
  if (segs.empty()) throw ContractError("build_input: empty batch");
  ModelInput in;
  in.batch = segs.size();
  in.steps = c.window.frames();
  const std::size_t rows = in.batch * in.steps;
  const std::size_t m = cfg.modalities.size();
  in.dense.resize(m);
  in.text.resize(m);
  in.present.assign(rows * m, 1);
  auto noise_rng = rng.derive(1);
  auto corrupt_rng = rng.derive(2);
  auto desc_rng = rng.derive(3);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& spec = cfg.modalities[j];
    if (spec.kind == ModalityKind::kDense) {
      auto it = c.dense_dims.find(spec.name);
      if (it == c.dense_dims.end()) throw ConfigError("modality '" + spec.name + "' is not present in the corpus");
      if (it->second != spec.input_dim) {
        throw ConfigError("modality '" + spec.name + "' has dim " + std::to_string(it->second) + " in the corpus, " +
                          std::to_string(spec.input_dim) + " in the model");
      }
      auto& dst = in.dense[j];
      dst.reserve(rows * spec.input_dim);
      for (const auto* s : segs) {
        const auto& fm = c.videos[s->video].features.at(spec.name);
        const float* begin = fm.row(s->first_frame);
        dst.insert(dst.end(), begin, begin + in.steps * fm.dim);
      }
      if (opt.augment_sigma > 0.0) {
        for (auto& v : dst) v += static_cast<float>(opt.augment_sigma * noise_rng.normal());
      }
    } else if (spec.name == "act_text") {
      for (const auto* s : segs) {
        const auto& labels = c.videos[s->video].labels;
        std::vector<int> frame_labels(labels.begin() + long(s->first_frame), labels.begin() + long(s->first_frame + in.steps));
        if (opt.action_keep_prob < 1.0) frame_labels = corrupt_actions(frame_labels, opt.action_keep_prob, corrupt_rng, c.num_actions());
        for (int l : frame_labels) {
          std::optional<std::string> name;
          if (l >= 0) name = c.vocab.action_name(std::size_t(l));
          in.text[j].push_back(cache.get(render_action_prompt({name})));
        }
      }
    } else if (spec.name == "obj_text") {
      for (const auto* s : segs) {
        const auto& objects = c.videos[s->video].objects;
        for (std::size_t t = 0; t < in.steps; ++t) in.text[j].push_back(cache.get(render_object_prompt(objects[s->first_frame + t])));
      }
    } else {
      throw ConfigError("modality '" + spec.name + "' has no text source");
    }
  }
  if (!opt.present.empty()) select_modalities(in, cfg, opt.present);
  if (opt.with_descriptions) {
    for (const auto* s : segs) {
      in.descriptions.push_back(cache.get(sample_description(c.descriptions, s->action, desc_rng, opt.description_mode)));
    }
  }
  return in;
}

}  // namespace mat
