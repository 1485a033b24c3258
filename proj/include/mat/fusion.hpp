#pragma once

#include <string>
#include <vector>

#include "mat/nn.hpp"

namespace mat {

/// Self-attention fuser: L encoder blocks shared across time steps, learnable
/// fusion tokens, per-modality type embeddings and missing-modality tokens.
template <class T>
struct FuserParams {
  std::vector<EncoderBlockParams<T>> blocks;
  Tensor<T> fusion_tokens;    // [n_fuse, d]
  Tensor<T> type_embeddings;  // [M, d]
  Tensor<T> missing_tokens;   // [M, d]

  FuserParams() = default;
  FuserParams(std::size_t d, std::size_t heads, std::size_t layers, std::size_t modalities,
              std::size_t n_fuse, CounterRng& rng)
      : fusion_tokens(normal_param<T>(rng, Shape{n_fuse == 0 ? 1 : n_fuse, d})),
        type_embeddings(normal_param<T>(rng, Shape{modalities, d})),
        missing_tokens(normal_param<T>(rng, Shape{modalities, d})) {
    if (n_fuse == 0) throw ConfigError("fuser: need at least one fusion token");
    if (modalities == 0) throw ConfigError("fuser: need at least one modality");
    for (std::size_t l = 0; l < layers; ++l) blocks.emplace_back(d, heads, rng);
  }

  std::size_t dim() const { return fusion_tokens.dim(1); }
  std::size_t n_fuse() const { return fusion_tokens.dim(0); }
  std::size_t modalities() const { return type_embeddings.dim(0); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(prefix + ".block" + std::to_string(l), out);
    out.emplace_back(prefix + ".fusion_tokens", fusion_tokens);
    out.emplace_back(prefix + ".type_embeddings", type_embeddings);
    out.emplace_back(prefix + ".missing_tokens", missing_tokens);
  }
};

/// Runs the blocks over [fusion tokens ; typed modality tokens] per group
/// (typed: [G, M, d], type embeddings already added) and returns the mean of
/// the fusion-token outputs, [G, d].
template <class T>
Tensor<T> fuse_typed_tokens(const FuserParams<T>& p, const Tensor<T>& typed) {
  const std::size_t groups = typed.dim(0);
  auto seq = concat<T>({expand(p.fusion_tokens, groups), typed}, 1);
  if (p.blocks.empty()) return mean(slice(seq, 1, 0, p.n_fuse()), 1);
  for (std::size_t l = 0; l + 1 < p.blocks.size(); ++l) seq = encoder_block_forward(p.blocks[l], seq);
  // Only the fusion-token rows of the last layer are read.
  return mean(encoder_block_prefix(p.blocks.back(), seq, p.n_fuse()), 1);
}

/// One fused vector per group from projected modality tokens [G, M, d].
/// present[g*M + m] == 0 marks an absent modality; it is replaced by its
/// learned missing token, or by zeros when `use_missing_tokens` is off (then
/// a group with no present modality is a contract violation).
template <class T>
Tensor<T> fuse_step(const FuserParams<T>& p, const Tensor<T>& tokens,
                    const std::vector<std::uint8_t>& present, bool use_missing_tokens = true) {
  if (tokens.rank() != 3 || tokens.dim(1) != p.modalities() || tokens.dim(2) != p.dim()) {
    throw DimensionError("fuse_step: tokens " + shape_str(tokens.shape()) + " do not match " +
                         std::to_string(p.modalities()) + " modalities of dim " +
                         std::to_string(p.dim()));
  }
  const std::size_t groups = tokens.dim(0);
  const std::size_t m = p.modalities();
  if (present.size() != groups * m) throw DimensionError("fuse_step: presence mask length mismatch");
  bool all_present = true;
  for (std::size_t g = 0; g < groups; ++g) {
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      any = any || present[g * m + j] != 0;
      all_present = all_present && present[g * m + j] != 0;
    }
    if (!any && !use_missing_tokens) {
      throw ContractError("fuse_step: no modality present and missing tokens disabled");
    }
  }
  Tensor<T> filled = tokens;
  if (!all_present) {
    const Tensor<T> fill = use_missing_tokens ? p.missing_tokens : Tensor<T>(Shape{m, p.dim()});
    filled = select_rows(tokens, fill, present);
  }
  return fuse_typed_tokens(p, add(filled, p.type_embeddings));
}

/// Applies fuse_step independently at every time step: tokens [B, T, M, d]
/// -> [B, T, d]. No attention crosses time steps.
template <class T>
Tensor<T> fuse_sequence(const FuserParams<T>& p, const Tensor<T>& tokens,
                        const std::vector<std::uint8_t>& present, bool use_missing_tokens = true) {
  if (tokens.rank() != 4) throw DimensionError("fuse_sequence: expected [B, T, M, d] tokens");
  const std::size_t b = tokens.dim(0);
  const std::size_t t = tokens.dim(1);
  auto flat = reshape(tokens, Shape{b * t, tokens.dim(2), tokens.dim(3)});
  auto fused = fuse_step(p, flat, present, use_missing_tokens);
  return reshape(fused, Shape{b, t, p.dim()});
}

}  // namespace mat
