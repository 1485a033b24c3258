#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mat/ops.hpp"
#include "mat/rng.hpp"

namespace mat {

/// Named parameter handles, in registration order.
template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

inline constexpr double kInitStd = 0.02;

template <class T>
Tensor<T> normal_param(CounterRng& rng, Shape shape, double stddev = kInitStd) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> constant_param(Shape shape, T value) {
  std::vector<T> v(shape_numel(shape), value);
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  LinearParams() = default;
  LinearParams(std::size_t in, std::size_t out, CounterRng& rng)
      : weight(normal_param<T>(rng, Shape{out, in})), bias(constant_param<T>(Shape{out}, T{0})) {}

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  static constexpr double kEps = 1e-5;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t d)
      : gamma(constant_param<T>(Shape{d}, T{1})), beta(constant_param<T>(Shape{d}, T{0})) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta, static_cast<T>(kEps));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

/// Query/key/value/output projections for k heads over model dim d.
template <class T>
struct AttentionParams {
  LinearParams<T> query;
  LinearParams<T> key;
  LinearParams<T> value;
  LinearParams<T> output;
  std::size_t heads = 1;

  AttentionParams() = default;
  AttentionParams(std::size_t d, std::size_t k, CounterRng& rng)
      : query(d, d, rng), key(d, d, rng), value(d, d, rng), output(d, d, rng), heads(k) {
    if (k == 0 || d % k != 0) {
      throw ConfigError("attention: model dim " + std::to_string(d) +
                        " not divisible by head count " + std::to_string(k));
    }
  }

  std::size_t dim() const { return query.out_dim(); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    output.collect(prefix + ".output", out);
  }
};

/// Lower-triangular mask: position t attends positions 0..t. With
/// `exclusive`, the diagonal is dropped (strictly past positions).
inline BoolMatrix causal_mask(std::size_t length, bool exclusive = false) {
  BoolMatrix m(length, length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) m.set(i, j, exclusive ? j < i : j <= i);
  }
  return m;
}

namespace detail {
/// [G, S, d] -> [G, heads, S, d/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t g = x.dim(0);
  const std::size_t s = x.dim(1);
  const std::size_t d = x.dim(2);
  return permute(reshape(x, Shape{g, s, heads, d / heads}), {0, 2, 1, 3});
}

template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t g = x.dim(0);
  const std::size_t h = x.dim(1);
  const std::size_t s = x.dim(2);
  const std::size_t dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), Shape{g, s, h * dh});
}
}  // namespace detail

/// Multi-head scaled dot-product attention over batched sequences
/// [G, S, d]. Scores are q.k / sqrt(d/heads). `mask` is [len_q, len_k];
/// a query with no allowed key yields a zero row only when zero_fill_empty.
template <class T>
Tensor<T> mha_forward(const AttentionParams<T>& p, const Tensor<T>& q_seq, const Tensor<T>& k_seq,
                      const Tensor<T>& v_seq, const std::optional<BoolMatrix>& mask = std::nullopt,
                      bool zero_fill_empty = false) {
  if (q_seq.rank() != 3 || k_seq.rank() != 3 || v_seq.rank() != 3) {
    throw DimensionError("mha_forward: expected [groups, length, dim] inputs");
  }
  if (k_seq.shape() != v_seq.shape() || q_seq.dim(0) != k_seq.dim(0) ||
      q_seq.dim(2) != p.dim() || k_seq.dim(2) != p.dim()) {
    detail::shape_error("mha_forward", q_seq.shape(), k_seq.shape());
  }
  const BoolMatrix full(q_seq.dim(1), k_seq.dim(1), true);
  auto ctx = attention(p.query(q_seq), p.key(k_seq), p.value(v_seq), p.heads, mask ? *mask : full,
                       zero_fill_empty);
  return p.output(ctx);
}

/// Self-attention weights only ([G, heads, S, S]); used by tests.
template <class T>
Tensor<T> attention_weights(const AttentionParams<T>& p, const Tensor<T>& x,
                            const std::optional<BoolMatrix>& mask = std::nullopt,
                            bool zero_fill_empty = false) {
  const std::size_t dh = p.dim() / p.heads;
  auto q = detail::split_heads(p.query(x), p.heads);
  auto k = detail::split_heads(p.key(x), p.heads);
  auto scores = scale(matmul(q, k, true), static_cast<T>(1.0 / std::sqrt(double(dh))));
  const BoolMatrix full(x.dim(1), x.dim(1), true);
  return masked_softmax(scores, mask ? *mask : full, zero_fill_empty);
}

/// Pre-norm encoder block: x + MHA(LN(x)), then x + FF(LN(x)) with a GELU
/// feed-forward of hidden width 4d.
template <class T>
struct EncoderBlockParams {
  LayerNormParams<T> norm1;
  AttentionParams<T> attention;
  LayerNormParams<T> norm2;
  LinearParams<T> ff_in;
  LinearParams<T> ff_out;

  EncoderBlockParams() = default;
  EncoderBlockParams(std::size_t d, std::size_t heads, CounterRng& rng)
      : norm1(d), attention(d, heads, rng), norm2(d), ff_in(d, 4 * d, rng), ff_out(4 * d, d, rng) {}

  void collect(const std::string& prefix, ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    attention.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
  }
};

template <class T>
Tensor<T> encoder_block_forward(const EncoderBlockParams<T>& p, const Tensor<T>& x,
                                const std::optional<BoolMatrix>& mask = std::nullopt,
                                bool zero_fill_empty = false) {
  auto h = p.norm1(x);
  auto y = add(x, mha_forward(p.attention, h, h, h, mask, zero_fill_empty));
  auto f = p.ff_out(gelu(p.ff_in(p.norm2(y))));
  return add(y, f);
}

/// Outputs of encoder_block_forward (unmasked) at positions [0, rows) only.
/// Every position still serves as a key; the skipped rows are simply never
/// computed.
template <class T>
Tensor<T> encoder_block_prefix(const EncoderBlockParams<T>& p, const Tensor<T>& x, std::size_t rows) {
  auto h = p.norm1(x);
  auto hq = slice(h, 1, 0, rows);
  auto y = add(slice(x, 1, 0, rows), mha_forward(p.attention, hq, h, h));
  auto f = p.ff_out(gelu(p.ff_in(p.norm2(y))));
  return add(y, f);
}

/// Learned absolute position table [max_len, d].
template <class T>
struct PositionalTable {
  Tensor<T> table;

  PositionalTable() = default;
  PositionalTable(std::size_t max_len, std::size_t d, CounterRng& rng)
      : table(normal_param<T>(rng, Shape{max_len, d})) {}

  std::size_t max_len() const { return table.dim(0); }

  /// x [..., S, d] + table[0:S].
  Tensor<T> apply(const Tensor<T>& x) const {
    const std::size_t s = x.dim(-2);
    if (s > max_len()) {
      throw DimensionError("positional table has " + std::to_string(max_len()) +
                           " rows, sequence needs " + std::to_string(s));
    }
    return add(x, slice(table, 0, 0, s));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix, table);
  }
};

}  // namespace mat
