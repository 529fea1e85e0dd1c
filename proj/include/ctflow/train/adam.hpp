#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "ctflow/core/error.hpp"
#include "ctflow/grad/parameter.hpp"
#include "ctflow/grad/tape.hpp"

namespace ctflow::train {

using grad::Parameter;
using grad::ParameterStore;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("adam: learning_rate must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
    if (epsilon <= 0) throw ConfigError("adam: epsilon must be > 0");
    if (weight_decay < 0) throw ConfigError("adam: weight_decay must be >= 0");
  }
};

// Copies gradients off the tape into each trainable parameter's grad slot.
// Parameters the loss never touched get zeros.
template <typename T>
void collect_gradients(grad::Tape<T>& tape, ParameterStore<T>& store) {
  for (Parameter<T>& p : store.all()) {
    if (!p.trainable) continue;
    if (p.value.node >= 0 && tape.touched(p.value.node)) {
      p.grad = tape.grad(p.value.node);
    } else {
      p.grad.assign(p.value.numel(), T(0));
    }
  }
}

// Euclidean norm over every trainable gradient taken together.
template <typename T>
double global_grad_norm(ParameterStore<T>& store) {
  double sq = 0.0;
  for (const Parameter<T>& p : store.all()) {
    if (!p.trainable) continue;
    for (const T g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

// Scales every gradient so the joint norm is at most max_norm; returns the
// pre-clip norm. max_norm = 0 disables clipping.
template <typename T>
double clip_gradients(ParameterStore<T>& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (max_norm > 0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter<T>& p : store.all()) {
      if (!p.trainable) continue;
      for (T& g : p.grad) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

// One optimizer update over every trainable parameter. step_index is 1-based
// and drives bias correction. Weight decay is decoupled: values shrink by
// lr*wd before the moment-based update touches them, so decay strength does
// not depend on the gradient scale. Moments update in double regardless of T.
template <typename T>
void adam_step(ParameterStore<T>& store, const AdamConfig& cfg, std::size_t step_index) {
  cfg.validate();
  if (step_index < 1) throw ConfigError("adam_step: step_index is 1-based");
  const double correction1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
  const double correction2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
  const double shrink = 1.0 - cfg.learning_rate * cfg.weight_decay;
  for (Parameter<T>& p : store.all()) {
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.numel()) {
      throw DimensionError("adam_step: no gradient collected for " + p.name);
    }
    if (p.moment1.empty()) p.moment1.assign(p.grad.size(), T(0));
    if (p.moment2.empty()) p.moment2.assign(p.grad.size(), T(0));
    T* theta = p.value.ptr();
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = cfg.beta1 * static_cast<double>(p.moment1[i]) + (1.0 - cfg.beta1) * g;
      const double v =
          cfg.beta2 * static_cast<double>(p.moment2[i]) + (1.0 - cfg.beta2) * g * g;
      p.moment1[i] = static_cast<T>(m);
      p.moment2[i] = static_cast<T>(v);
      const double m_hat = m / correction1;
      const double v_hat = v / correction2;
      double value = static_cast<double>(theta[i]) * shrink;
      value -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
      theta[i] = static_cast<T>(value);
    }
  }
}

}  // namespace ctflow::train
