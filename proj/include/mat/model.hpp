#pragma once

// The anticipation model: per-modality projectors, the fuser, a causal
// decoder over fused features, contrastive heads and the action classifier.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mat/fusion.hpp"
#include "mat/json_util.hpp"
#include "mat/nn.hpp"
#include "mat/text.hpp"

namespace mat {

enum class ModalityKind { kDense, kText };

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::kDense;
  std::size_t input_dim = 0;  // ignored for text (uses the bucket count)

  bool operator==(const ModalitySpec&) const = default;
};

/// Canonical modality names, in registry order.
inline const std::vector<std::string>& modality_names() {
  static const std::vector<std::string> names{"rgb", "flow", "audio", "obj_feat", "obj_text", "act_text"};
  return names;
}

inline bool is_text_modality(std::string_view name) { return name == "obj_text" || name == "act_text"; }

enum class Stage { kPretrain, kFinetune };

inline std::string stage_name(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t fuser_layers = 2;
  std::size_t decoder_layers = 4;
  std::size_t contrast_dim = 64;
  std::size_t fusion_tokens = 1;
  std::size_t max_len = 32;
  std::size_t num_classes = 24;
  std::size_t text_buckets = kDefaultBuckets;
  std::vector<ModalitySpec> modalities;
  /// Decoder position t attends only to positions < t.
  bool exclusive_mask = false;
  /// Contrastive/classifier anchor is the fused z_T instead of decoded z^_T.
  bool anchor_on_fused = false;
  bool missing_tokens = true;
  double init_temperature = 0.07;

  std::size_t modality_index(std::string_view name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i) {
      if (modalities[i].name == name) return i;
    }
    throw ConfigError("modality '" + std::string(name) + "' is not registered");
  }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("model: dim must be a positive multiple of heads");
    if (fusion_tokens == 0) throw ConfigError("model: fusion_tokens must be >= 1");
    if (modalities.empty()) throw ConfigError("model: no modalities registered");
    if (num_classes == 0) throw ConfigError("model: num_classes must be >= 1");
    if (contrast_dim == 0 || max_len == 0 || text_buckets == 0) throw ConfigError("model: zero-sized dimension");
    if (!(init_temperature > 0.0)) throw ConfigError("model: init_temperature must be positive");
    for (const auto& m : modalities) {
      if (m.kind == ModalityKind::kDense && m.input_dim == 0) {
        throw ConfigError("model: dense modality '" + m.name + "' has zero input dim");
      }
    }
  }

  Json to_json() const {
    Json mods = Json::array();
    for (const auto& m : modalities) {
      mods.push_back({{"name", m.name},
                      {"kind", m.kind == ModalityKind::kText ? "text" : "dense"},
                      {"input_dim", m.input_dim}});
    }
    return {{"dim", dim},
            {"heads", heads},
            {"fuser_layers", fuser_layers},
            {"decoder_layers", decoder_layers},
            {"contrast_dim", contrast_dim},
            {"fusion_tokens", fusion_tokens},
            {"max_len", max_len},
            {"num_classes", num_classes},
            {"text_buckets", text_buckets},
            {"modalities", mods},
            {"exclusive_mask", exclusive_mask},
            {"anchor_on_fused", anchor_on_fused},
            {"missing_tokens", missing_tokens},
            {"init_temperature", init_temperature}};
  }

  /// `complete` = false accepts an architecture-only section (modalities and
  /// class count filled in later from a corpus).
  static ModelConfig from_json(const Json& j, bool complete = true) {
    constexpr std::string_view ctx = "model";
    require_known_keys(j,
                       {"dim", "heads", "fuser_layers", "decoder_layers", "contrast_dim",
                        "fusion_tokens", "max_len", "num_classes", "text_buckets", "modalities",
                        "exclusive_mask", "anchor_on_fused", "missing_tokens", "init_temperature"},
                       ctx);
    ModelConfig c;
    read_opt(j, "dim", c.dim, ctx);
    read_opt(j, "heads", c.heads, ctx);
    read_opt(j, "fuser_layers", c.fuser_layers, ctx);
    read_opt(j, "decoder_layers", c.decoder_layers, ctx);
    read_opt(j, "contrast_dim", c.contrast_dim, ctx);
    read_opt(j, "fusion_tokens", c.fusion_tokens, ctx);
    read_opt(j, "max_len", c.max_len, ctx);
    read_opt(j, "num_classes", c.num_classes, ctx);
    read_opt(j, "text_buckets", c.text_buckets, ctx);
    read_opt(j, "exclusive_mask", c.exclusive_mask, ctx);
    read_opt(j, "anchor_on_fused", c.anchor_on_fused, ctx);
    read_opt(j, "missing_tokens", c.missing_tokens, ctx);
    read_opt(j, "init_temperature", c.init_temperature, ctx);
    if (auto it = j.find("modalities"); it != j.end()) {
      if (!it->is_array()) throw ConfigError("model.modalities: expected an array");
      for (const auto& m : *it) {
        require_known_keys(m, {"name", "kind", "input_dim"}, "model.modalities[]");
        ModalitySpec spec;
        read_opt(m, "name", spec.name, "model.modalities[]");
        std::string kind = "dense";
        read_opt(m, "kind", kind, "model.modalities[]");
        if (kind != "dense" && kind != "text") throw ConfigError("model.modalities[].kind must be dense or text");
        spec.kind = kind == "text" ? ModalityKind::kText : ModalityKind::kDense;
        read_opt(m, "input_dim", spec.input_dim, "model.modalities[]");
        c.modalities.push_back(std::move(spec));
      }
    }
    if (complete) {
      c.validate();
    } else if (c.dim == 0 || c.heads == 0 || c.dim % c.heads != 0) {
      throw ConfigError("model: dim must be a positive multiple of heads");
    }
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Sparse-input linear map (hashed text -> d): table [H, d] plus bias.
template <class T>
struct TextProjector {
  Tensor<T> table;
  Tensor<T> bias;

  TextProjector() = default;
  TextProjector(std::size_t buckets, std::size_t out, CounterRng& rng)
      : table(normal_param<T>(rng, Shape{buckets, out})), bias(constant_param<T>(Shape{out}, T{0})) {}

  Tensor<T> operator()(const std::vector<const SparseVec*>& bags) const {
    return add(embedding_bag(table, bags), bias);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".table", table);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Maps one modality's native features to the model dim.
template <class T>
struct ModalityProjector {
  ModalityKind kind = ModalityKind::kDense;
  LinearParams<T> dense;
  TextProjector<T> text;

  void collect(const std::string& prefix, ParamList<T>& out) const {
    if (kind == ModalityKind::kDense) {
      dense.collect(prefix, out);
    } else {
      text.collect(prefix, out);
    }
  }
};

/// Model-level view of a batch: B segments x T steps x M modalities.
struct ModelInput {
  std::size_t batch = 0;
  std::size_t steps = 0;
  /// Per modality (config order): dense rows [B*T*D] row-major, empty for text.
  std::vector<std::vector<float>> dense;
  /// Per modality: B*T sparse hashed features, empty for dense.
  std::vector<std::vector<const SparseVec*>> text;
  /// [B*T*M]; 0 = modality absent at that step.
  std::vector<std::uint8_t> present;
  /// B description features (pretrain text side).
  std::vector<const SparseVec*> descriptions;
};

template <class T>
struct ForwardOutput {
  Tensor<T> fused;        // z   [B, T, d]
  Tensor<T> anticipated;  // z^  [B, T, d]
  Tensor<T> anchor;       // [B, d]
  Tensor<T> video;        // [B, d_c] unit rows (pretrain)
  Tensor<T> text;         // [B, d_c] unit rows (pretrain)
  Tensor<T> logits;       // [B, C] (finetune)
};

template <class T>
struct Model {
  ModelConfig config;
  std::vector<ModalityProjector<T>> projectors;
  FuserParams<T> fuser;
  std::vector<EncoderBlockParams<T>> decoder;
  PositionalTable<T> positions;
  LinearParams<T> video_head;
  TextProjector<T> text_head;
  Tensor<T> log_temperature;  // [1]
  LinearParams<T> classifier;

  Model() = default;

  Model(ModelConfig cfg, std::uint64_t seed) : config(std::move(cfg)) {
    config.validate();
    CounterRng rng(seed);
    const auto d = config.dim;
    for (const auto& m : config.modalities) {
      ModalityProjector<T> p;
      p.kind = m.kind;
      if (m.kind == ModalityKind::kDense) {
        p.dense = LinearParams<T>(m.input_dim, d, rng);
      } else {
        p.text = TextProjector<T>(config.text_buckets, d, rng);
      }
      projectors.push_back(std::move(p));
    }
    fuser = FuserParams<T>(d, config.heads, config.fuser_layers, config.modalities.size(),
                           config.fusion_tokens, rng);
    for (std::size_t l = 0; l < config.decoder_layers; ++l) decoder.emplace_back(d, config.heads, rng);
    positions = PositionalTable<T>(config.max_len, d, rng);
    video_head = LinearParams<T>(d, config.contrast_dim, rng);
    text_head = TextProjector<T>(config.text_buckets, config.contrast_dim, rng);
    log_temperature = constant_param<T>(Shape{1}, static_cast<T>(std::log(config.init_temperature)));
    classifier = LinearParams<T>(d, config.num_classes, rng);
  }

  /// Every learnable tensor exactly once, in a fixed order.
  ParamList<T> parameters() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < projectors.size(); ++i) {
      projectors[i].collect("proj." + config.modalities[i].name, out);
    }
    fuser.collect("fuser", out);
    for (std::size_t l = 0; l < decoder.size(); ++l) decoder[l].collect("decoder.block" + std::to_string(l), out);
    positions.collect("decoder.positions", out);
    video_head.collect("head.video", out);
    text_head.collect("head.text", out);
    out.emplace_back("head.log_temperature", log_temperature);
    classifier.collect("classifier", out);
    return out;
  }

  ParamList<T> classifier_parameters() const {
    ParamList<T> out;
    classifier.collect("classifier", out);
    return out;
  }

  T temperature() const { return std::exp(log_temperature[0]); }
};

/// Per-modality projection to the model dim: [B, T, M, d].
template <class T>
Tensor<T> project_modalities(const Model<T>& model, const ModelInput& in) {
  const auto& cfg = model.config;
  const std::size_t rows = in.batch * in.steps;
  if (rows == 0) throw ContractError("project_modalities: empty batch");
  if (in.dense.size() != cfg.modalities.size() || in.text.size() != cfg.modalities.size()) {
    throw ConfigError("project_modalities: input carries " + std::to_string(in.dense.size()) +
                      " modalities, model registers " + std::to_string(cfg.modalities.size()));
  }
  std::vector<Tensor<T>> parts;
  parts.reserve(cfg.modalities.size());
  for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
    const auto& spec = cfg.modalities[m];
    Tensor<T> projected;
    if (spec.kind == ModalityKind::kDense) {
      if (in.dense[m].size() != rows * spec.input_dim) {
        throw DimensionError("project_modalities: modality '" + spec.name + "' expects " +
                             std::to_string(spec.input_dim) + "-dim rows");
      }
      std::vector<T> vals(in.dense[m].begin(), in.dense[m].end());
      Tensor<T> x(Shape{rows, spec.input_dim}, std::move(vals));
      projected = model.projectors[m].dense(x);
    } else {
      if (in.text[m].size() != rows) {
        throw DimensionError("project_modalities: modality '" + spec.name + "' needs one text feature per step");
      }
      projected = model.projectors[m].text(in.text[m]);
    }
    parts.push_back(reshape(projected, Shape{rows, 1, cfg.dim}));
  }
  auto stacked = parts.size() == 1 ? parts[0] : concat(parts, 1);
  return reshape(stacked, Shape{in.batch, in.steps, cfg.modalities.size(), cfg.dim});
}

/// Causal decoder over fused features: z [B, T, d] -> z^ [B, T, d], where
/// z^_t depends only on z_1..z_t.
template <class T>
Tensor<T> anticipate(const Model<T>& model, const Tensor<T>& fused) {
  const std::size_t steps = fused.dim(1);
  auto x = model.positions.apply(fused);
  const auto mask = causal_mask(steps, model.config.exclusive_mask);
  for (const auto& block : model.decoder) {
    x = encoder_block_forward(block, x, mask, model.config.exclusive_mask);
  }
  return x;
}

/// Unit-norm video-side contrastive embedding of the anchor [B, d].
template <class T>
Tensor<T> video_embedding(const Model<T>& model, const Tensor<T>& anchor) {
  return l2_normalize(model.video_head(anchor), -1, static_cast<T>(1e-12));
}

/// Unit-norm text-side contrastive embedding of hashed descriptions.
template <class T>
Tensor<T> text_embedding(const Model<T>& model, const std::vector<const SparseVec*>& features) {
  return l2_normalize(model.text_head(features), -1, static_cast<T>(1e-12));
}

template <class T>
Tensor<T> classify(const Model<T>& model, const Tensor<T>& anchor) {
  return model.classifier(anchor);
}

/// Last-position slice of [B, T, d] -> [B, d].
template <class T>
Tensor<T> last_step(const Tensor<T>& seq) {
  const std::size_t steps = seq.dim(1);
  return reshape(slice(seq, 1, steps - 1, steps), Shape{seq.dim(0), seq.dim(2)});
}

/// project -> fuse -> anticipate -> stage heads.
template <class T>
ForwardOutput<T> model_forward(const Model<T>& model, const ModelInput& in, Stage stage) {
  ForwardOutput<T> out;
  auto tokens = project_modalities(model, in);
  out.fused = fuse_sequence(model.fuser, tokens, in.present, model.config.missing_tokens);
  out.anticipated = anticipate(model, out.fused);
  out.anchor = last_step(model.config.anchor_on_fused ? out.fused : out.anticipated);
  if (stage == Stage::kPretrain) {
    out.video = video_embedding(model, out.anchor);
    if (!in.descriptions.empty()) {
      if (in.descriptions.size() != in.batch) throw DimensionError("model_forward: one description per segment required");
      out.text = text_embedding(model, in.descriptions);
    }
  } else {
    out.logits = classify(model, out.anchor);
  }
  return out;
}

}  // namespace mat
