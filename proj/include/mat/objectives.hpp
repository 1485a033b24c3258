#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mat/model.hpp"

namespace mat {

template <class T>
struct ContrastiveLoss {
  Tensor<T> v2t;
  Tensor<T> t2v;
  Tensor<T> cross;
};

namespace detail {
template <class T>
void require_unit_rows(const Tensor<T>& x, const char* what) {
  const std::size_t cols = x.dim(1);
  const double tol = sizeof(T) == 4 ? 1e-4 : 1e-9;
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += double(x[r * cols + c]) * double(x[r * cols + c]);
    if (std::abs(std::sqrt(ss) - 1.0) > tol) {
      throw ContractError(std::string("contrastive_loss: ") + what + " row " + std::to_string(r) +
                          " is not unit-norm (norm " + std::to_string(std::sqrt(ss)) + ")");
    }
  }
}
}  // namespace detail

/// Symmetric InfoNCE over a batch of paired unit vectors, similarity
/// (v.t) / tau with tau = exp(log_tau). Row i of v is paired with row i of t.
/// With `classes` and `exclude_same_class`, off-diagonal pairs sharing a
/// class are removed from the denominators instead of acting as negatives.
template <class T>
ContrastiveLoss<T> contrastive_loss(const Tensor<T>& v, const Tensor<T>& t, const Tensor<T>& log_tau,
                                    const std::vector<std::size_t>* classes = nullptr,
                                    bool exclude_same_class = false) {
  if (v.rank() != 2 || t.rank() != 2) throw DimensionError("contrastive_loss: expected [B, d] embeddings");
  if (v.shape() != t.shape()) detail::shape_error("contrastive_loss", v.shape(), t.shape());
  if (log_tau.numel() != 1) throw DimensionError("contrastive_loss: temperature must be a scalar");
  const std::size_t b = v.dim(0);
  detail::require_unit_rows(v, "video");
  detail::require_unit_rows(t, "text");
  auto logits = mul(matmul(v, t, /*transpose_b=*/true), exp(scale(log_tau, T{-1})));
  if (exclude_same_class && classes) {
    if (classes->size() != b) throw DimensionError("contrastive_loss: one class id per row required");
    Tensor<T> mask(Shape{b, b});
    bool any = false;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        if (i != j && (*classes)[i] == (*classes)[j]) {
          mask[i * b + j] = static_cast<T>(-1e9);
          any = true;
        }
      }
    }
    if (any) logits = add(logits, mask);
  }
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  ContrastiveLoss<T> out;
  out.v2t = cross_entropy_with_logits(logits, diag);
  out.t2v = cross_entropy_with_logits(transpose(logits), diag);
  out.cross = add(out.v2t, out.t2v);
  return out;
}

/// Mean squared error between z^_t and the detached z_{t+1}, t < T. A
/// single-step sequence has nothing to predict and yields 0.
template <class T>
Tensor<T> feature_loss(const Tensor<T>& anticipated, const Tensor<T>& fused) {
  if (anticipated.shape() != fused.shape() || anticipated.rank() != 3) {
    detail::shape_error("feature_loss", anticipated.shape(), fused.shape());
  }
  const std::size_t steps = fused.dim(1);
  if (steps < 2) return Tensor<T>::scalar(T{0});
  return mse(slice(anticipated, 1, 0, steps - 1), detach(slice(fused, 1, 1, steps)));
}

template <class T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  return cross_entropy_with_logits(logits, targets);
}

/// Scalar summary of one step or epoch; absent terms stay empty.
struct LossReport {
  std::optional<double> v2t;
  std::optional<double> t2v;
  std::optional<double> cross;
  std::optional<double> feat;
  std::optional<double> cls;
  double total = 0.0;
};

namespace detail {
inline double loss_plus(double a, double b) { return a + b; }
inline double loss_times(double a, double w) { return a * w; }
template <class T>
Tensor<T> loss_plus(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> loss_times(const Tensor<T>& a, double w) { return scale(a, static_cast<T>(w)); }
}  // namespace detail

/// Pretrain: L_cross + L_feat. Finetune: L_cls + beta * L_feat (the feature
/// term is only required when beta != 0). Works on doubles and on tensors.
template <class V>
V stage_loss(Stage stage, const std::optional<V>& cross, const std::optional<V>& feat,
             const std::optional<V>& cls, double beta = 0.0) {
  if (stage == Stage::kPretrain) {
    if (!cross || !feat) throw ContractError("stage_loss: pretrain needs L_cross and L_feat");
    return detail::loss_plus(*cross, *feat);
  }
  if (!cls) throw ContractError("stage_loss: finetune needs L_cls");
  if (beta == 0.0) return *cls;
  if (!feat) throw ContractError("stage_loss: finetune with beta != 0 needs L_feat");
  return detail::loss_plus(*cls, detail::loss_times(*feat, beta));
}

inline double stage_loss(Stage stage, const LossReport& r, double beta = 0.0) {
  return stage_loss<double>(stage, r.cross, r.feat, r.cls, beta);
}

}  // namespace mat
