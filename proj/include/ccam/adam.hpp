#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ccam/tensor.hpp"

namespace ccam {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates for a list of parameters, in the order the
/// parameters are passed to adam_step.
template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

/// One bias-corrected Adam update of a single flat parameter.
/// `step` is the 1-based step number after incrementing.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::vector<T>& m, std::vector<T>& v,
                 std::uint64_t step, double lr, const AdamConfig& cfg) {
  if (param.size() != grad.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update: length mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1, vhat = vi / bc2;
    param[i] = static_cast<T>(param[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Applies one Adam step to every parameter using its accumulated gradient.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// `lr` overrides config.lr when non-negative (used by learning-rate schedules).
template <class T>
void adam_step(std::span<BasicTensor<T>> params, AdamState<T>& state, double lr = -1.0) {
  if (state.m.empty()) {
    for (auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  ++state.step;
  const double rate = lr >= 0.0 ? lr : state.config.lr;
  std::vector<T> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.numel()) throw ShapeError("adam_step: parameter length mismatch");
    std::span<const T> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    adam_update<T>(p.data(), g, state.m[i], state.v[i], state.step, rate, state.config);
  }
}

}  // namespace ccam
