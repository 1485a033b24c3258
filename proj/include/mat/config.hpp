#pragma once

// Experiment configuration: one JSON file describing the world, window,
// model architecture, corpus limits, both training stages and the harness
// settings. Validated as a whole; unknown keys are rejected at every level.

#include <string>
#include <vector>

#include "mat/corpus.hpp"
#include "mat/synthworld.hpp"
#include "mat/trainer.hpp"

namespace mat {

struct ExperimentConfig {
  WorldConfig world;
  std::uint64_t world_seed = 7;
  WindowConfig window;
  /// Architecture only; modalities and class count come from the corpus.
  ModelConfig model;
  std::uint64_t model_seed = 1;
  CorpusOptions corpus;
  StageConfig pretrain = StageConfig::desk(Stage::kPretrain);
  StageConfig finetune = StageConfig::desk(Stage::kFinetune);
  /// Modalities the model registers (empty = every modality of the corpus).
  std::vector<std::string> modalities;
  /// Keep probability for action-text labels at evaluation.
  double corruption_p = 1.0;
  std::vector<double> p_list{0.0, 0.2, 0.5, 0.8, 1.0};
  std::vector<std::vector<std::string>> ablation_sets{{"rgb"}, {"rgb", "act_text"}, {"flow", "obj_text", "act_text"}};
  std::uint64_t eval_seed = 1;
  std::string output_dir = "runs";

  void validate() const {
    world.validate();
    window.validate();
    if (model.dim == 0 || model.heads == 0 || model.dim % model.heads != 0) {
      throw ConfigError("model: dim must be a positive multiple of heads");
    }
    if (model.fusion_tokens == 0 || model.contrast_dim == 0 || model.text_buckets == 0) {
      throw ConfigError("model: zero-sized dimension");
    }
    if (model.max_len < window.frames()) {
      throw ConfigError("model.max_len " + std::to_string(model.max_len) + " is shorter than the " +
                        std::to_string(window.frames()) + "-frame observation window");
    }
    if (corpus.max_train == 0 || corpus.max_eval == 0) throw ConfigError("corpus: limits must be positive");
    pretrain.validate();
    finetune.validate();
    auto check_names = [](const std::vector<std::string>& names, const std::string& ctx) {
      const auto& known = modality_names();
      for (const auto& n : names) {
        if (std::find(known.begin(), known.end(), n) == known.end()) {
          throw ConfigError(ctx + ": unknown modality '" + n + "'");
        }
      }
    };
    check_names(modalities, "modalities");
    if (corruption_p < 0.0 || corruption_p > 1.0) throw ConfigError("corruption_p must lie in [0, 1]");
    for (double p : p_list) {
      if (p < 0.0 || p > 1.0) throw ConfigError("p_list: values must lie in [0, 1]");
    }
    for (const auto& set : ablation_sets) {
      if (set.empty()) throw ConfigError("ablation_sets: empty modality set");
      check_names(set, "ablation_sets");
    }
  }

  Json to_json() const {
    Json arch = model.to_json();
    arch.erase("modalities");
    arch.erase("num_classes");
    return {{"world", world.to_json()},
            {"world_seed", world_seed},
            {"window", window.to_json()},
            {"model", arch},
            {"model_seed", model_seed},
            {"corpus",
             {{"max_train", corpus.max_train}, {"max_eval", corpus.max_eval}, {"subsample_seed", corpus.subsample_seed}}},
            {"pretrain", pretrain.to_json()},
            {"finetune", finetune.to_json()},
            {"modalities", modalities},
            {"corruption_p", corruption_p},
            {"p_list", p_list},
            {"ablation_sets", ablation_sets},
            {"eval_seed", eval_seed},
            {"output_dir", output_dir}};
  }

  static ExperimentConfig from_json(const Json& j) {
    constexpr std::string_view ctx = "config";
    require_known_keys(j,
                       {"world", "world_seed", "window", "model", "model_seed", "corpus", "pretrain", "finetune",
                        "modalities", "corruption_p", "p_list", "ablation_sets", "eval_seed", "output_dir"},
                       ctx);
    ExperimentConfig c;
    if (auto it = j.find("world"); it != j.end()) c.world = WorldConfig::from_json(*it);
    read_opt(j, "world_seed", c.world_seed, ctx);
    if (auto it = j.find("window"); it != j.end()) c.window = WindowConfig::from_json(*it);
    if (auto it = j.find("model"); it != j.end()) {
      if (it->contains("modalities") || it->contains("num_classes")) {
        throw ConfigError("model: modalities and num_classes are taken from the corpus; use the top-level "
                          "'modalities' key to choose a subset");
      }
      c.model = ModelConfig::from_json(*it, /*complete=*/false);
    }
    read_opt(j, "model_seed", c.model_seed, ctx);
    if (auto it = j.find("corpus"); it != j.end()) {
      require_known_keys(*it, {"max_train", "max_eval", "subsample_seed"}, "corpus");
      read_opt(*it, "max_train", c.corpus.max_train, "corpus");
      read_opt(*it, "max_eval", c.corpus.max_eval, "corpus");
      read_opt(*it, "subsample_seed", c.corpus.subsample_seed, "corpus");
    }
    if (auto it = j.find("pretrain"); it != j.end()) c.pretrain = StageConfig::from_json(*it, c.pretrain);
    if (auto it = j.find("finetune"); it != j.end()) c.finetune = StageConfig::from_json(*it, c.finetune);
    read_opt(j, "modalities", c.modalities, ctx);
    read_opt(j, "corruption_p", c.corruption_p, ctx);
    read_opt(j, "p_list", c.p_list, ctx);
    read_opt(j, "ablation_sets", c.ablation_sets, ctx);
    read_opt(j, "eval_seed", c.eval_seed, ctx);
    read_opt(j, "output_dir", c.output_dir, ctx);
    c.validate();
    return c;
  }
};

inline ExperimentConfig load_experiment(const std::string& path) {
  const auto text = detail::read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  try {
    return ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace mat
