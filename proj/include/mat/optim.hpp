#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mat/errors.hpp"
#include "mat/tensor.hpp"

namespace mat {

/// Velocity buffers for SGD with momentum; one buffer per optimized tensor.
template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr = 0.0;

  OptimizerState() = default;
  OptimizerState(std::span<const Tensor<T>> params, double momentum_, double weight_decay_,
                 double lr_ = 0.0)
      : momentum(momentum_), weight_decay(weight_decay_), lr(lr_) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.emplace_back(p.numel(), T{0});
  }
};

/// One parameter's update: v <- mu*v + (g + lambda*theta); theta <- theta - lr*v.
template <class T>
void sgd_momentum_update(std::span<T> theta, std::span<const T> grad, std::span<T> velocity,
                         double momentum, double weight_decay, double lr) {
  const T mu = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  const T eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad.empty() ? T{0} : grad[i];
    velocity[i] = mu * velocity[i] + (g + wd * theta[i]);
    theta[i] -= eta * velocity[i];
  }
}

/// Applies the update to every parameter in place. Parameters without a
/// materialized gradient are treated as having zero gradient. Throws
/// NumericError naming the first parameter with a non-finite gradient,
/// before touching any value.
template <class T>
void sgd_momentum_step(std::span<Tensor<T>> params, OptimizerState<T>& state,
                       std::span<const std::string> names = {}) {
  if (state.velocity.size() != params.size()) {
    throw ContractError("sgd_momentum_step: " + std::to_string(params.size()) +
                        " parameters but " + std::to_string(state.velocity.size()) +
                        " velocity buffers");
  }
  if (state.lr < 0.0) throw ContractError("sgd_momentum_step: negative learning rate");
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (T g : params[p].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " +
                           (p < names.size() ? names[p] : std::to_string(p)));
      }
    }
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.velocity[p].size() != params[p].numel()) {
      throw DimensionError("sgd_momentum_step: velocity/parameter size mismatch");
    }
    sgd_momentum_update<T>(params[p].values(), params[p].grad(), state.velocity[p],
                           state.momentum, state.weight_decay, state.lr);
  }
}

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns
/// the norm before clipping.
template <class T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= f;
    }
  }
  return norm;
}

/// Linear warmup from 0 to base_lr over [0, W), cosine decay to 0 over [W, E].
struct LrSchedule {
  double base_lr = 1e-3;
  double warmup_epochs = 20;
  double total_epochs = 50;
};

/// Epoch may be fractional (per-iteration schedules).
inline double lr_at(const LrSchedule& s, double epoch) {
  if (s.warmup_epochs < 0 || s.warmup_epochs > s.total_epochs) {
    throw ConfigError("lr schedule: need 0 <= warmup <= total epochs");
  }
  if (epoch < 0 || epoch > s.total_epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(s.total_epochs) + "]");
  }
  if (epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
  const double span = s.total_epochs - s.warmup_epochs;
  if (span <= 0.0) return s.base_lr;
  const double progress = (epoch - s.warmup_epochs) / span;
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mat
