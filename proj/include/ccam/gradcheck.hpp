#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ccam/rng.hpp"
#include "ccam/tensor.hpp"

namespace ccam {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() gradients of a scalar function against central
/// differences. `f` builds the loss into the graph it is given and must read
/// the current values of `params`. For each checked coordinate the error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
///
/// When max_coords_per_tensor > 0, that many coordinates per tensor are drawn
/// with `rng` instead of checking every coordinate.
template <class T>
GradCheckResult gradient_check(const std::function<BasicTensor<T>(Graph&)>& f,
                               std::vector<BasicTensor<T>> params, double eps, double floor = 1e-6,
                               std::size_t max_coords_per_tensor = 0, Rng* rng = nullptr) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    Graph g;
    auto loss = f(g);
    g.backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<T>(p.grad().begin(), p.grad().end())
                                       : std::vector<T>(p.numel(), T(0)));
  }

  auto eval = [&]() {
    Graph g = Graph::inference();
    return static_cast<double>(f(g).item());
  };

  GradCheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    std::vector<std::size_t> coords;
    if (max_coords_per_tensor > 0 && max_coords_per_tensor < p.numel() && rng != nullptr) {
      for (std::size_t k = 0; k < max_coords_per_tensor; ++k) coords.push_back(rng->below(p.numel()));
    } else {
      for (std::size_t k = 0; k < p.numel(); ++k) coords.push_back(k);
    }
    for (std::size_t i : coords) {
      const T saved = p[i];
      p[i] = static_cast<T>(saved + eps);
      const double up = eval();
      p[i] = static_cast<T>(saved - eps);
      const double down = eval();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = t;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace ccam
