#ifndef DEEPSRQ_OPTIM_HPP
#define DEEPSRQ_OPTIM_HPP

#include "deepsrq/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace deepsrq {

struct SgdConfig {
  double learning_rate = 1e-2;
  double decay = 1e-6;
  double momentum = 0.9;
};

/// Time-decayed learning rate lr0 / (1 + decay * step).
inline double decayed_learning_rate(const SgdConfig& cfg, std::uint64_t step) {
  return cfg.learning_rate / (1.0 + cfg.decay * static_cast<double>(step));
}

/// v <- mu v - lr g ; w <- w + v, elementwise.
template <typename T>
void sgd_momentum_update(std::span<T> weights, std::span<T> velocity, std::span<const T> grad, T lr, T momentum) {
  if (weights.size() != velocity.size() || weights.size() != grad.size())
    throw NnError(NnErrc::ShapeMismatch, "sgd update: weights, velocity and gradient sizes differ");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grad[i];
    weights[i] += velocity[i];
  }
}

/// SGD with classical momentum and time-based learning-rate decay.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(SgdConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.momentum >= 0 && cfg.momentum < 1)) throw NnError(NnErrc::BadConfig, "momentum must lie in [0,1)");
    if (!(cfg.learning_rate >= 0) || !(cfg.decay >= 0))
      throw NnError(NnErrc::BadConfig, "learning rate and decay must be non-negative");
  }

  const SgdConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  double current_learning_rate() const { return decayed_learning_rate(cfg_, step_); }

  const std::vector<Tensor<T>>& velocities() const { return velocity_; }

  void restore(std::uint64_t step, std::vector<Tensor<T>> velocities) {
    step_ = step;
    velocity_ = std::move(velocities);
  }

  void step(const std::vector<Param<T>*>& params) {
    if (velocity_.empty())
      for (auto* p : params) velocity_.emplace_back(p->value.shape());
    if (velocity_.size() != params.size())
      throw NnError(NnErrc::ShapeMismatch, "optimizer velocity count does not match parameter count");
    const T lr = static_cast<T>(current_learning_rate());
    const T mu = static_cast<T>(cfg_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (velocity_[i].shape() != params[i]->value.shape())
        throw NnError(NnErrc::ShapeMismatch, "velocity shape mismatch for " + params[i]->name);
      sgd_momentum_update<T>(params[i]->value.values(), velocity_[i].values(), params[i]->grad.values(), lr, mu);
    }
    ++step_;
  }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocity_;
  std::uint64_t step_ = 0;
};

}  // namespace deepsrq

#endif  // DEEPSRQ_OPTIM_HPP
