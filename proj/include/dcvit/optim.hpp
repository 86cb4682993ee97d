// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "dcvit/error.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

struct AdamWHyper {
  double lr = 3e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for a fixed, ordered list of parameters.
template <typename T>
struct OptimState {
  AdamWHyper hyper;
  std::int64_t step = 0;
  std::vector<Buffer<T>> first;
  std::vector<Buffer<T>> second;

  OptimState() = default;
  OptimState(std::span<const BasicTensor<T>> params, AdamWHyper h) : hyper(h) {
    for (const auto& p : params) {
      first.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      second.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }
};

/// One AdamW update with decoupled weight decay and bias correction.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adamw_step(std::span<BasicTensor<T>> params, OptimState<T>& state, double lr_now) {
  if (params.size() != state.first.size())
    throw DimensionError(detail::concat("optimizer tracks ", state.first.size(), " tensors, got ",
                                        params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (static_cast<std::size_t>(params[i].numel()) != state.first[i].size())
      throw DimensionError(detail::concat("optimizer moment ", i, " has ", state.first[i].size(),
                                          " entries, parameter has ", params[i].numel()));
  state.step += 1;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const T decay = static_cast<T>(1.0 - lr_now * h.weight_decay);
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T step_size = static_cast<T>(lr_now / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto data = p.data();
    auto& m = state.first[i];
    auto& v = state.second[i];
    const bool has_grad = p.has_grad();
    auto g = p.grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T gj = has_grad ? g[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      data[j] *= decay;
      data[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

/// Linear warmup to base_lr over warmup_steps, then cosine decay to zero at
/// total_steps.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                          double base_lr) {
  if (step < 0) step = 0;
  if (step > total_steps) step = total_steps;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const auto decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<BasicTensor<T>> params, double max_norm) {
  if (!(max_norm > 0.0)) throw ValidationError("clip_grad_norm needs max_norm > 0");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace dcvit
