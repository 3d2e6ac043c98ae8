// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dgc/tensor.hpp"

namespace dgc {

/// A trainable buffer together with its gradient.
template <typename T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
  bool decay = true;
  std::vector<std::size_t> dims;  // logical shape; empty means flat
};

template <typename T>
struct OptimState {
  T momentum = T(0.9);
  T weight_decay = T(1e-4);
  bool nesterov = true;
  std::vector<std::vector<T>> velocity;
};

/// Nesterov SGD with classical L2 decay folded into the gradient:
///   d = g + wd * p;  v <- m v - lr d;  p <- p + m v - lr d
/// (plain momentum when nesterov is off: p <- p + v).
template <typename T>
void sgd_nesterov_step(std::span<ParamRef<T>> params, T lr, OptimState<T>& optim) {
  for (const auto& p : params) {
    for (T v : p.grad) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
    if (p.grad.size() != p.value.size()) {
      throw ShapeError("gradient of '" + p.name + "' has " + std::to_string(p.grad.size()) +
                       " entries, parameter has " + std::to_string(p.value.size()));
    }
  }
  if (optim.velocity.empty()) {
    optim.velocity.reserve(params.size());
    for (const auto& p : params) optim.velocity.emplace_back(p.value.size(), T(0));
  }
  if (optim.velocity.size() != params.size()) {
    throw ShapeError("optimizer holds " + std::to_string(optim.velocity.size()) +
                     " velocity buffers for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& vel = optim.velocity[k];
    if (vel.size() != p.value.size()) {
      throw ShapeError("velocity buffer for '" + p.name + "' does not match parameter size");
    }
    const T wd = p.decay ? optim.weight_decay : T(0);
    for (std::size_t i = 0; i < vel.size(); ++i) {
      const T d = p.grad[i] + wd * p.value[i];
      vel[i] = optim.momentum * vel[i] - lr * d;
      p.value[i] += optim.nesterov ? optim.momentum * vel[i] - lr * d : vel[i];
    }
  }
}

/// Per-epoch cosine annealing from lr0 towards zero.
inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0) {
  return 0.5 * lr0 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs)));
}

}  // namespace dgc
