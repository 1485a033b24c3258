#pragma once

// Two-stage training: contrastive pre-training (L_cross + L_feat) and
// fine-tuning (L_cls + beta * L_feat) in full or frozen-trunk mode.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mat/checkpoint.hpp"
#include "mat/corpus.hpp"
#include "mat/log.hpp"
#include "mat/metrics.hpp"
#include "mat/objectives.hpp"
#include "mat/optim.hpp"

namespace mat {

enum class FinetuneMode { kFull, kFrozen };

inline std::string mode_name(FinetuneMode m) { return m == FinetuneMode::kFrozen ? "frozen" : "full"; }

inline FinetuneMode parse_mode(const std::string& s) {
  if (s == "full") return FinetuneMode::kFull;
  if (s == "frozen") return FinetuneMode::kFrozen;
  throw ConfigError("mode must be frozen or full, got '" + s + "'");
}

struct StageConfig {
  Stage stage = Stage::kPretrain;
  std::size_t epochs = 30;
  double warmup = 6;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  std::size_t batch = 16;
  FinetuneMode mode = FinetuneMode::kFull;
  double beta = 0.0;
  std::uint64_t seed = 1;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 5.0;
  /// Batches never repeat a target class.
  bool dedup_classes = false;
  /// Same-class pairs are dropped from contrastive denominators.
  bool exclude_same_class = false;
  double augment_sigma = 0.0;
  /// Keep probability for action-text labels seen during training.
  double action_keep_prob = 1.0;

  /// Desk-scale defaults: E=30, W=6, B=16.
  static StageConfig desk(Stage s) {
    StageConfig c;
    c.stage = s;
    return c;
  }

  /// Long schedule: lr 1e-3, wd 1e-6, momentum 0.9, E=50, W=20.
  static StageConfig long_schedule(Stage s) {
    StageConfig c;
    c.stage = s;
    c.epochs = 50;
    c.warmup = 20;
    c.base_lr = 1e-3;
    return c;
  }

  LrSchedule schedule() const { return {base_lr, warmup, double(epochs)}; }

  void validate() const {
    if (epochs == 0) throw ConfigError("stage: epochs must be positive");
    if (warmup < 0 || warmup > double(epochs)) throw ConfigError("stage: need 0 <= warmup <= epochs");
    if (!(base_lr >= 0.0)) throw ConfigError("stage: base_lr must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("stage: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("stage: weight_decay must be non-negative");
    if (batch == 0) throw ConfigError("stage: batch must be positive");
    if (mode == FinetuneMode::kFrozen && stage != Stage::kFinetune) {
      throw ConfigError("stage: frozen mode exists only for finetune");
    }
    if (mode == FinetuneMode::kFrozen && beta != 0.0) {
      throw ConfigError("stage: frozen mode trains the classifier only, beta must be 0");
    }
    if (action_keep_prob < 0.0 || action_keep_prob > 1.0) throw ConfigError("stage: action_keep_prob must lie in [0, 1]");
    if (augment_sigma < 0.0) throw ConfigError("stage: augment_sigma must be non-negative");
  }

  Json to_json() const {
    return {{"epochs", epochs},         {"warmup", warmup},
            {"base_lr", base_lr},       {"momentum", momentum},
            {"weight_decay", weight_decay}, {"batch", batch},
            {"mode", mode_name(mode)},  {"beta", beta},
            {"seed", seed},             {"clip_norm", clip_norm},
            {"dedup_classes", dedup_classes}, {"exclude_same_class", exclude_same_class},
            {"augment_sigma", augment_sigma}, {"action_keep_prob", action_keep_prob}};
  }

  /// Starts from `base` (a preset) and overrides the keys present.
  static StageConfig from_json(const Json& j, StageConfig base) {
    const std::string ctx = stage_name(base.stage);
    require_known_keys(j,
                       {"preset", "epochs", "warmup", "base_lr", "momentum", "weight_decay", "batch", "mode", "beta",
                        "seed", "clip_norm", "dedup_classes", "exclude_same_class", "augment_sigma",
                        "action_keep_prob"},
                       ctx);
    StageConfig c = base;
    if (auto it = j.find("preset"); it != j.end()) {
      const auto preset = it->get<std::string>();
      if (preset == "desk") {
        c = desk(base.stage);
      } else if (preset == "long") {
        c = long_schedule(base.stage);
      } else {
        throw ConfigError(ctx + ".preset must be desk or long");
      }
    }
    read_opt(j, "epochs", c.epochs, ctx);
    read_opt(j, "warmup", c.warmup, ctx);
    read_opt(j, "base_lr", c.base_lr, ctx);
    read_opt(j, "momentum", c.momentum, ctx);
    read_opt(j, "weight_decay", c.weight_decay, ctx);
    read_opt(j, "batch", c.batch, ctx);
    std::string mode = mode_name(c.mode);
    read_opt(j, "mode", mode, ctx);
    c.mode = parse_mode(mode);
    read_opt(j, "beta", c.beta, ctx);
    read_opt(j, "seed", c.seed, ctx);
    read_opt(j, "clip_norm", c.clip_norm, ctx);
    read_opt(j, "dedup_classes", c.dedup_classes, ctx);
    read_opt(j, "exclude_same_class", c.exclude_same_class, ctx);
    read_opt(j, "augment_sigma", c.augment_sigma, ctx);
    read_opt(j, "action_keep_prob", c.action_keep_prob, ctx);
    c.validate();
    return c;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::optional<double> loss_cross;
  std::optional<double> loss_feat;
  std::optional<double> loss_cls;
  double total = 0.0;
  double seconds = 0.0;
};

struct RunLog {
  std::vector<EpochLog> epochs;
  std::string checkpoint;

  /// epoch,lr,loss_cross,loss_feat,loss_cls,total,seconds
  std::string to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "epoch,lr,loss_cross,loss_feat,loss_cls,total,seconds\n";
    auto opt = [&](const std::optional<double>& v) {
      if (v) out << *v;
    };
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.lr << ',';
      opt(e.loss_cross);
      out << ',';
      opt(e.loss_feat);
      out << ',';
      opt(e.loss_cls);
      out << ',' << e.total << ',' << e.seconds << '\n';
    }
    return out.str();
  }
};

struct TrainOptions {
  /// Present modalities (empty = all registered).
  std::vector<std::string> present;
  /// Written after the final epoch (and as last-good on numeric failure).
  std::string checkpoint_out;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Model config wired to a corpus: its modalities (all, or a subset),
/// class count and the architecture fields of `arch`.
inline ModelConfig model_config_for(const Corpus& c, const ModelConfig& arch,
                                    const std::vector<std::string>& modalities = {}) {
  ModelConfig cfg = arch;
  cfg.modalities.clear();
  for (const auto& spec : c.modality_specs()) {
    if (modalities.empty() || std::find(modalities.begin(), modalities.end(), spec.name) != modalities.end()) {
      cfg.modalities.push_back(spec);
    }
  }
  for (const auto& name : modalities) {
    const bool known = std::any_of(cfg.modalities.begin(), cfg.modalities.end(),
                                   [&](const ModalitySpec& s) { return s.name == name; });
    if (!known) throw ConfigError("modality '" + name + "' is not available in this corpus");
  }
  cfg.num_classes = c.num_actions();
  cfg.max_len = std::max(cfg.max_len, c.window.frames());
  cfg.validate();
  return cfg;
}

/// A model (e.g. from a checkpoint) can run on a corpus only when every
/// registered modality exists there with the same feature dim and the class
/// counts agree.
inline void require_compatible(const ModelConfig& cfg, const Corpus& c) {
  std::vector<std::string> problems;
  if (cfg.num_classes != c.num_actions()) {
    problems.push_back("num_classes " + std::to_string(cfg.num_classes) + " != corpus actions " +
                       std::to_string(c.num_actions()));
  }
  for (const auto& m : cfg.modalities) {
    if (m.kind == ModalityKind::kText) continue;
    auto it = c.dense_dims.find(m.name);
    if (it == c.dense_dims.end()) {
      problems.push_back("modality '" + m.name + "' missing from corpus");
    } else if (it->second != m.input_dim) {
      problems.push_back("modality '" + m.name + "' dim " + std::to_string(m.input_dim) + " != corpus dim " +
                         std::to_string(it->second));
    }
  }
  if (c.window.frames() > cfg.max_len) {
    problems.push_back("window of " + std::to_string(c.window.frames()) + " frames exceeds max_len " +
                       std::to_string(cfg.max_len));
  }
  if (!problems.empty()) {
    std::string msg = "model does not match corpus " + c.root + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
}

namespace detail {

/// Names of parameters each stage optimises. Pre-training never touches the
/// classifier; full fine-tuning never touches the contrastive heads; frozen
/// fine-tuning trains the classifier only.
inline bool stage_trains(const StageConfig& sc, const std::string& name) {
  const bool classifier = name.rfind("classifier.", 0) == 0;
  const bool head = name.rfind("head.", 0) == 0;
  if (sc.stage == Stage::kPretrain) return !classifier;
  if (sc.mode == FinetuneMode::kFrozen) return classifier;
  return !head;
}

struct Trainable {
  std::vector<std::string> names;
  std::vector<Tensor<float>> params;
};

inline Trainable trainable(const Model<float>& model, const StageConfig& sc) {
  Trainable t;
  for (auto& [name, p] : model.parameters()) {
    if (stage_trains(sc, name)) {
      t.names.push_back(name);
      t.params.push_back(p);
    }
  }
  return t;
}

inline std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.push_back(p.vec());
  return out;
}

inline void restore(std::vector<Tensor<float>>& params, const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(snap[i].begin(), snap[i].end(), params[i].values().begin());
}

inline std::vector<std::size_t> targets_of(const std::vector<Segment>& segs) {
  std::vector<std::size_t> out;
  for (const auto& s : segs) out.push_back(s.action);
  return out;
}

struct StepLosses {
  std::optional<double> cross, feat, cls;
  double total = 0.0;
};

/// One optimisation step on a batch; returns the scalar losses.
inline StepLosses train_step(Model<float>& model, const Corpus& corpus, const std::vector<const Segment*>& segs,
                             const StageConfig& sc, const TrainOptions& opt, Trainable& tr, OptimizerState<float>& state,
                             CounterRng& rng, TextCache& cache) {
  BatchOptions bo;
  bo.action_keep_prob = sc.action_keep_prob;
  bo.augment_sigma = sc.augment_sigma;
  bo.with_descriptions = sc.stage == Stage::kPretrain;
  bo.description_mode = SampleMode::kTrain;
  bo.present = opt.present;
  const auto input = build_input(corpus, segs, model.config, bo, rng, cache);
  std::vector<std::size_t> targets;
  for (const auto* s : segs) targets.push_back(s->action);

  Tape<float> tape;
  TapeScope<float> scope(tape);
  const auto out = model_forward(model, input, sc.stage);
  StepLosses r;
  Tensor<float> total;
  const auto feat = feature_loss(out.anticipated, out.fused);
  r.feat = feat.item();
  if (sc.stage == Stage::kPretrain) {
    const auto c = contrastive_loss(out.video, out.text, model.log_temperature, &targets, sc.exclude_same_class);
    r.cross = c.cross.item();
    total = stage_loss<Tensor<float>>(Stage::kPretrain, c.cross, feat, std::nullopt);
  } else {
    const auto cls = classification_loss(out.logits, targets);
    r.cls = cls.item();
    total = stage_loss<Tensor<float>>(Stage::kFinetune, std::nullopt, feat, cls, sc.beta);
  }
  r.total = total.item();
  if (!std::isfinite(r.total)) throw NumericError("non-finite " + stage_name(sc.stage) + " loss");
  for (auto& p : tr.params) p.zero_grad();
  tape.backward(total);
  if (sc.clip_norm > 0.0) clip_grad_norm<float>(tr.params, sc.clip_norm);
  sgd_momentum_step<float>(tr.params, state, tr.names);
  return r;
}

}  // namespace detail

/// Forward pass without a tape; returns [N, d] anchors (z^_T or z_T).
inline std::vector<float> compute_anchors(const Model<float>& model, const Corpus& corpus, const std::vector<Segment>& segs,
                                          const BatchOptions& bo, std::uint64_t seed, std::size_t batch = 64) {
  NoTapeScope<float> no_tape;
  TextCache cache(model.config.text_buckets);
  CounterRng rng(seed);
  std::vector<float> out;
  out.reserve(segs.size() * model.config.dim);
  for (std::size_t i = 0; i < segs.size(); i += batch) {
    std::vector<const Segment*> chunk;
    for (std::size_t j = i; j < std::min(segs.size(), i + batch); ++j) chunk.push_back(&segs[j]);
    auto brng = rng.derive(i);
    const auto in = build_input(corpus, chunk, model.config, bo, brng, cache);
    auto tokens = project_modalities(model, in);
    auto fused = fuse_sequence(model.fuser, tokens, in.present, model.config.missing_tokens);
    auto anchor = model.config.anchor_on_fused ? last_step(fused) : last_step(anticipate(model, fused));
    out.insert(out.end(), anchor.vec().begin(), anchor.vec().end());
  }
  return out;
}

namespace detail {

inline RunLog run_stage(Model<float>& model, const Corpus& corpus, const StageConfig& sc, const TrainOptions& opt) {
  sc.validate();
  require_compatible(model.config, corpus);
  if (corpus.train.empty()) throw DataError("training split is empty");
  if (sc.stage == Stage::kPretrain) corpus.descriptions.require_complete(corpus.num_actions());
  auto tr = trainable(model, sc);
  OptimizerState<float> state(std::span<const Tensor<float>>(tr.params), sc.momentum, sc.weight_decay);
  const auto schedule = sc.schedule();
  CounterRng root(sc.seed);
  TextCache cache(model.config.text_buckets);
  const auto classes = targets_of(corpus.train);
  const bool frozen = sc.stage == Stage::kFinetune && sc.mode == FinetuneMode::kFrozen;

  std::vector<float> anchors;  // frozen mode: trunk features, computed once
  if (frozen) {
    BatchOptions bo;
    bo.action_keep_prob = sc.action_keep_prob;
    bo.present = opt.present;
    anchors = compute_anchors(model, corpus, corpus.train, bo, root.derive(7).key());
  }

  RunLog log;
  for (std::size_t e = 0; e < sc.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto good = snapshot(tr.params);
    auto epoch_rng = root.derive(1000 + e);
    auto batch_rng = epoch_rng.derive(0);
    const auto batches = make_batches(classes, sc.batch, batch_rng, /*shuffle=*/true, sc.dedup_classes);
    double sum_cross = 0, sum_feat = 0, sum_cls = 0, sum_total = 0;
    std::size_t seen = 0;
    try {
      for (std::size_t b = 0; b < batches.size(); ++b) {
        state.lr = lr_at(schedule, double(e) + double(b) / double(batches.size()));
        const double w = double(batches[b].size());
        if (frozen) {
          const std::size_t d = model.config.dim;
          std::vector<float> x;
          std::vector<std::size_t> targets;
          for (auto i : batches[b]) {
            x.insert(x.end(), anchors.begin() + long(i * d), anchors.begin() + long((i + 1) * d));
            targets.push_back(classes[i]);
          }
          Tape<float> tape;
          TapeScope<float> scope(tape);
          const Tensor<float> feats(Shape{batches[b].size(), d}, std::move(x));
          auto loss = classification_loss(classify(model, feats), targets);
          const double v = loss.item();
          if (!std::isfinite(v)) throw NumericError("non-finite finetune loss");
          for (auto& p : tr.params) p.zero_grad();
          tape.backward(loss);
          if (sc.clip_norm > 0.0) clip_grad_norm<float>(tr.params, sc.clip_norm);
          sgd_momentum_step<float>(tr.params, state, tr.names);
          sum_cls += v * w;
          sum_total += v * w;
        } else {
          std::vector<const Segment*> segs;
          for (auto i : batches[b]) segs.push_back(&corpus.train[i]);
          auto step_rng = epoch_rng.derive(1 + b);
          const auto r = train_step(model, corpus, segs, sc, opt, tr, state, step_rng, cache);
          if (r.cross) sum_cross += *r.cross * w;
          if (r.feat) sum_feat += *r.feat * w;
          if (r.cls) sum_cls += *r.cls * w;
          sum_total += r.total * w;
        }
        seen += batches[b].size();
      }
    } catch (const NumericError& err) {
      restore(tr.params, good);
      if (!opt.checkpoint_out.empty()) {
        save_checkpoint(model, opt.checkpoint_out);
        log_error("numeric failure in epoch " + std::to_string(e) + "; last good parameters saved to " +
                  opt.checkpoint_out);
      }
      throw NumericError(std::string(err.what()) + " (epoch " + std::to_string(e) + ")");
    }
    for (auto& p : tr.params) p.zero_grad();
    EpochLog el;
    el.epoch = e;
    el.lr = lr_at(schedule, double(e));
    const double n = double(seen);
    if (sc.stage == Stage::kPretrain) {
      el.loss_cross = sum_cross / n;
      el.loss_feat = sum_feat / n;
    } else {
      el.loss_cls = sum_cls / n;
      if (!frozen) el.loss_feat = sum_feat / n;
    }
    el.total = sum_total / n;
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_info(stage_name(sc.stage) + " epoch " + std::to_string(e + 1) + "/" + std::to_string(sc.epochs) +
             " lr=" + std::to_string(el.lr) + " loss=" + std::to_string(el.total));
    if (opt.on_epoch) opt.on_epoch(el);
    log.epochs.push_back(el);
  }
  if (!opt.checkpoint_out.empty()) {
    save_checkpoint(model, opt.checkpoint_out);
    log.checkpoint = opt.checkpoint_out;
  }
  return log;
}

}  // namespace detail

/// Stage 1: contrastive pre-training against sampled action descriptions.
inline RunLog pretrain(Model<float>& model, const Corpus& corpus, const StageConfig& sc, const TrainOptions& opt = {}) {
  if (sc.stage != Stage::kPretrain) throw ConfigError("pretrain: stage config is not a pretrain config");
  return detail::run_stage(model, corpus, sc, opt);
}

/// Stage 2: action classification, full or frozen trunk.
inline RunLog finetune(Model<float>& model, const Corpus& corpus, const StageConfig& sc, const TrainOptions& opt = {}) {
  if (sc.stage != Stage::kFinetune) throw ConfigError("finetune: stage config is not a finetune config");
  return detail::run_stage(model, corpus, sc, opt);
}

struct EvalOptions {
  std::vector<std::string> present;
  double action_keep_prob = 1.0;
  std::uint64_t seed = 1;
  std::size_t batch = 64;
};

/// Action logits for each segment, deterministic in the seed.
inline std::vector<Prediction> predict(const Model<float>& model, const Corpus& corpus, const std::vector<Segment>& segs,
                                       const EvalOptions& eo = {}) {
  require_compatible(model.config, corpus);
  if (segs.empty()) throw DataError("predict: no segments");
  BatchOptions bo;
  bo.present = eo.present;
  bo.action_keep_prob = eo.action_keep_prob;
  const auto anchors = compute_anchors(model, corpus, segs, bo, eo.seed, eo.batch);
  const std::size_t d = model.config.dim;
  NoTapeScope<float> no_tape;
  const Tensor<float> feats(Shape{segs.size(), d}, anchors);
  const auto logits = classify(model, feats);
  const std::size_t c = model.config.num_classes;
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    Prediction p;
    p.segment_id = segs[i].narration_id;
    p.scores.assign(logits.vec().begin() + long(i * c), logits.vec().begin() + long((i + 1) * c));
    p.target = segs[i].action;
    p.participant = segs[i].participant;
    p.unseen = segs[i].unseen;
    out.push_back(std::move(p));
  }
  return out;
}

inline MetricsReport evaluate(const Model<float>& model, const Corpus& corpus, const EvalOptions& eo = {}) {
  if (corpus.eval.empty()) throw DataError("eval split is empty");
  return build_report(predict(model, corpus, corpus.eval, eo), corpus.vocab, corpus.train_frequency);
}

}  // namespace mat
