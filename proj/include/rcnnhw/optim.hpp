// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcnnhw/autodiff.hpp"
#include "rcnnhw/models.hpp"

namespace rcnnhw {

inline constexpr double kProbClamp = 1e-12;

/// Mean over the batch of −log(max(p_true, 1e-12)).
inline Var cross_entropy_loss(Var probs, const std::vector<int>& labels) {
  const Tensor& p = probs.value();
  if (p.rank() != 2) {
    throw DimensionError("cross_entropy_loss: expected [batch × classes], got " +
                         shape_str(p.shape()));
  }
  const std::size_t batch = p.dim(0), classes = p.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw DataError("label " + std::to_string(labels[b]) + " at row " + std::to_string(b) +
                      " out of range for " + std::to_string(classes) + " classes");
    }
    total -= std::log(std::max(p.at(b, static_cast<std::size_t>(labels[b])), kProbClamp));
  }
  const double n = static_cast<double>(batch);
  return probs.tape().push(
      Tensor::scalar(total / n), {probs}, [probs, labels, classes, n](Tape& t, const Tensor& g) {
        const Tensor& pv = t.value(probs.id());
        auto gp = t.grad_ref(probs.id()).data();
        for (std::size_t b = 0; b < labels.size(); ++b) {
          const std::size_t idx = b * classes + static_cast<std::size_t>(labels[b]);
          if (pv[idx] > kProbClamp) gp[idx] -= g[0] / (n * pv[idx]);
        }
      });
}

// ---------------------------------------------------------------------------
// Per-tensor update rules
// ---------------------------------------------------------------------------

struct RmsPropConfig {
  double lr = 1e-3;
  double rho = 0.9;
  double eps = 1e-8;
};

/// cache ← ρ·cache + (1−ρ)·g²;  p ← p − lr·g / (sqrt(cache) + eps)
inline void rmsprop_step(Tensor& param, const Tensor& grad, Tensor& cache,
                         const RmsPropConfig& c) {
  detail::require_same_shape("rmsprop_step", param, grad);
  if (cache.shape() != param.shape()) cache = Tensor(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    cache[i] = c.rho * cache[i] + (1.0 - c.rho) * grad[i] * grad[i];
    param[i] -= c.lr * grad[i] / (std::sqrt(cache[i]) + c.eps);
  }
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Tensor m, v;
};

/// Bias-corrected Adam. `step` is the 1-based count after this update:
///   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
///   p ← p − lr·(m / (1−β1^t)) / (sqrt(v / (1−β2^t)) + eps)
inline void adam_step(Tensor& param, const Tensor& grad, AdamMoments& s, std::size_t step,
                      const AdamConfig& c) {
  detail::require_same_shape("adam_step", param, grad);
  if (step < 1) throw ContractError("adam_step: step count starts at 1");
  if (s.m.shape() != param.shape()) s.m = Tensor(param.shape());
  if (s.v.shape() != param.shape()) s.v = Tensor(param.shape());
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * grad[i];
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    param[i] -= c.lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + c.eps);
  }
}

struct AdadeltaConfig {
  double lr = 1.0;
  double rho = 0.95;
  double eps = 1e-6;
};

struct AdadeltaAccumulators {
  Tensor sq_grad, sq_update;
};

///   E[g²] ← ρ·E[g²] + (1−ρ)·g²
///   Δ = −sqrt(E[Δ²] + eps) / sqrt(E[g²] + eps) · g
///   E[Δ²] ← ρ·E[Δ²] + (1−ρ)·Δ²
///   p ← p + lr·Δ
inline void adadelta_step(Tensor& param, const Tensor& grad, AdadeltaAccumulators& s,
                          const AdadeltaConfig& c) {
  detail::require_same_shape("adadelta_step", param, grad);
  if (s.sq_grad.shape() != param.shape()) s.sq_grad = Tensor(param.shape());
  if (s.sq_update.shape() != param.shape()) s.sq_update = Tensor(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.sq_grad[i] = c.rho * s.sq_grad[i] + (1.0 - c.rho) * grad[i] * grad[i];
    const double delta =
        -std::sqrt(s.sq_update[i] + c.eps) / std::sqrt(s.sq_grad[i] + c.eps) * grad[i];
    s.sq_update[i] = c.rho * s.sq_update[i] + (1.0 - c.rho) * delta * delta;
    param[i] += c.lr * delta;
  }
}

/// Scales all gradients by max_norm/norm when their global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
inline double clip_gradients(std::span<Tensor* const> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_gradients: max_norm must be > 0");
  double sq = 0.0;
  for (const Tensor* g : grads) {
    for (double v : g->data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor* g : grads) {
      for (double& v : g->data()) v *= s;
    }
  }
  return norm;
}

inline double clip_gradients(std::span<const NamedParameter> params, double max_norm) {
  std::vector<Tensor*> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    p.param->zero_grad_if_missing();
    grads.push_back(&p.param->grad);
  }
  return clip_gradients(std::span<Tensor* const>(grads), max_norm);
}

// ---------------------------------------------------------------------------
// Stateful optimizers over a parameter list
// ---------------------------------------------------------------------------

enum class OptimizerKind { rmsprop, adam, adadelta };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adadelta: return "adadelta";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "rmsprop") return OptimizerKind::rmsprop;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adadelta") return OptimizerKind::adadelta;
  throw ConfigError("unknown optimizer '" + name + "'; valid: rmsprop, adam, adadelta");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::rmsprop;
  /// Negative means "use the default for this optimizer".
  double lr = -1.0;
  double rho = -1.0;
  double eps = -1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;

  double resolved_lr() const {
    if (lr > 0) return lr;
    return kind == OptimizerKind::adadelta ? 1.0 : 1e-3;
  }
  double resolved_rho() const {
    if (rho > 0) return rho;
    return kind == OptimizerKind::adadelta ? 0.95 : 0.9;
  }
  double resolved_eps() const {
    if (eps > 0) return eps;
    return kind == OptimizerKind::adadelta ? 1e-6 : 1e-8;
  }
};

/// Per-parameter accumulators, indexed by position in the parameter list.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  std::size_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

  void step(std::span<const NamedParameter> params) {
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size()) {
      throw ContractError("optimizer: parameter list changed between steps");
    }
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i].param;
      p.zero_grad_if_missing();
      Slot& s = slots_[i];
      switch (config_.kind) {
        case OptimizerKind::rmsprop:
          rmsprop_step(p.value, p.grad, s.a,
                       {config_.resolved_lr(), config_.resolved_rho(), config_.resolved_eps()});
          break;
        case OptimizerKind::adam: {
          AdamMoments m{std::move(s.a), std::move(s.b)};
          adam_step(p.value, p.grad, m, steps_,
                    {config_.resolved_lr(), config_.beta1, config_.beta2,
                     config_.resolved_eps()});
          s.a = std::move(m.m);
          s.b = std::move(m.v);
          break;
        }
        case OptimizerKind::adadelta: {
          AdadeltaAccumulators acc{std::move(s.a), std::move(s.b)};
          adadelta_step(p.value, p.grad, acc,
                        {config_.resolved_lr(), config_.resolved_rho(), config_.resolved_eps()});
          s.a = std::move(acc.sq_grad);
          s.b = std::move(acc.sq_update);
          break;
        }
      }
    }
  }

 private:
  struct Slot {
    Tensor a, b;
  };
  OptimizerConfig config_;
  std::vector<Slot> slots_;
  std::size_t steps_ = 0;
};

}  // namespace rcnnhw
