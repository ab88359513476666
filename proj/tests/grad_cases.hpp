#pragma once

// Finite-difference gradient cases shared by the unit tests and the
// acceptance run. Everything runs in double so that central differences with
// eps = 1e-3 are limited by truncation error, not float rounding.

#include <functional>
#include <string>
#include <vector>

#include "ccam/adaptation.hpp"
#include "ccam/counterfactual.hpp"
#include "ccam/gradcheck.hpp"

namespace gradcases {

using namespace ccam;
using D = double;
using TD = BasicTensor<D>;

inline constexpr double kEps = 1e-3;
// Relative error is |a - n| / max(|a|, |n|, kFloor); the floor keeps
// components that are zero up to truncation error from dominating.
inline constexpr double kFloor = 1e-4;

inline TD randn(Shape s, Rng& rng, double sd = 1.0) {
  TD t(std::move(s), true);
  for (auto& v : t.data()) v = rng.normal() * sd;
  return t;
}

// Keeps every entry at least `gap` away from zero so kinks of relu / abs are
// never straddled by the finite difference.
inline TD randn_away_from_zero(Shape s, Rng& rng, double gap = 0.05) {
  TD t = randn(std::move(s), rng);
  for (auto& v : t.data()) {
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  }
  return t;
}

// A random linear functional of y, so that every output coordinate gets a
// distinct upstream gradient.
inline TD project(Graph& g, const TD& y, const TD& r) {
  const int n = static_cast<int>(y.numel());
  static const TD zero_bias({1});
  return reshape(g, linear(g, reshape(g, y, {1, n}), r, zero_bias), Shape{});
}

inline TD projector(std::size_t n, Rng& rng) {
  TD r({1, static_cast<int>(n)});
  for (auto& v : r.data()) v = rng.normal();
  return r;
}

inline std::vector<int> random_labels(int count, int n, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(count));
  for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  return y;
}

struct Case {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

inline GradCheckResult check(const std::function<TD(Graph&)>& f, std::vector<TD> params) {
  return gradient_check<D>(f, std::move(params), kEps, kFloor);
}

// Pipeline from decoupled features to the three sets of logits.
struct Heads {
  TD z_o, z_f, Z_fb;
};

inline Heads heads(Graph& g, const TD& F, const TD& B, const TD& W, const TD& b) {
  auto O = add(g, F, B);
  auto fb = pairwise_sum(g, F, B);
  return {linear(g, O, W, b), linear(g, F, W, b), linear(g, fb, W, b)};
}

inline std::vector<Case> all_cases() {
  std::vector<Case> cs;
  cs.push_back({"add/sub/scale/reshape", [](std::uint64_t s) {
                  Rng rng(s);
                  auto a = randn({3, 4}, rng), b = randn({3, 4}, rng);
                  auto r = projector(12, rng);
                  return check([=](Graph& g) {
                    auto y = sub(g, scale(g, add(g, a, b), 1.7), reshape(g, scale(g, b, -0.3), {3, 4}));
                    return project(g, reshape(g, y, {12}), r);
                  }, {a, b});
                }});
  cs.push_back({"relu", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn_away_from_zero({2, 3, 4}, rng);
                  auto r = projector(24, rng);
                  return check([=](Graph& g) { return project(g, relu(g, x), r); }, {x});
                }});
  cs.push_back({"abs", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn_away_from_zero({10}, rng);
                  auto r = projector(10, rng);
                  return check([=](Graph& g) { return project(g, abs(g, x), r); }, {x});
                }});
  cs.push_back({"sum/mean", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({4, 5}, rng);
                  return check([=](Graph& g) { return add(g, sum(g, x), scale(g, mean(g, x), 3.0)); }, {x});
                }});
  cs.push_back({"conv2d stride 1 pad 1", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({2, 3, 5, 5}, rng), w = randn({4, 3, 3, 3}, rng, 0.5), b = randn({4}, rng);
                  auto r = projector(2 * 4 * 25, rng);
                  return check([=](Graph& g) { return project(g, conv2d(g, x, w, b, 1, 1), r); }, {x, w, b});
                }});
  cs.push_back({"conv2d stride 2 pad 0", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({2, 7, 7}, rng), w = randn({3, 2, 3, 3}, rng, 0.5), b = randn({3}, rng);
                  auto r = projector(3 * 9, rng);
                  return check([=](Graph& g) { return project(g, conv2d(g, x, w, b, 2, 0), r); }, {x, w, b});
                }});
  cs.push_back({"maxpool2d", [](std::uint64_t s) {
                  Rng rng(s);
                  // distinct values spaced well beyond eps so the argmax never flips
                  std::vector<double> vals(2 * 2 * 4 * 4);
                  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * static_cast<double>(i);
                  shuffle(vals, rng);
                  TD x({2, 2, 4, 4}, vals, true);
                  auto r = projector(2 * 2 * 4, rng);
                  return check([=](Graph& g) { return project(g, maxpool2d(g, x, 2, 2), r); }, {x});
                }});
  cs.push_back({"batchnorm2d train", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({3, 2, 3, 3}, rng, 2.0);
                  auto bn = BatchNorm<D>::make(2);
                  for (auto& v : bn.gamma.data()) v = 1.0 + 0.5 * rng.normal();
                  for (auto& v : bn.beta.data()) v = rng.normal();
                  auto r = projector(x.numel(), rng);
                  return check([=](Graph& g) mutable { return project(g, batchnorm2d(g, x, bn, Mode::Train), r); },
                               {x, bn.gamma, bn.beta});
                }});
  cs.push_back({"batchnorm2d eval", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({2, 3, 2, 2}, rng);
                  auto bn = BatchNorm<D>::make(3);
                  for (auto& v : bn.running_mean.data()) v = rng.normal();
                  for (auto& v : bn.running_var.data()) v = 0.5 + rng.uniform();
                  for (auto& v : bn.gamma.data()) v = 1.0 + 0.5 * rng.normal();
                  auto r = projector(x.numel(), rng);
                  return check([=](Graph& g) mutable { return project(g, batchnorm2d(g, x, bn, Mode::Eval), r); },
                               {x, bn.gamma, bn.beta});
                }});
  cs.push_back({"global_avg_pool", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({2, 3, 4, 4}, rng);
                  auto r = projector(6, rng);
                  return check([=](Graph& g) { return project(g, global_avg_pool(g, x), r); }, {x});
                }});
  cs.push_back({"linear", [](std::uint64_t s) {
                  Rng rng(s);
                  auto x = randn({2, 3, 5}, rng), w = randn({4, 5}, rng), b = randn({4}, rng);
                  auto r = projector(24, rng);
                  return check([=](Graph& g) { return project(g, linear(g, x, w, b), r); }, {x, w, b});
                }});
  cs.push_back({"softmax T=2", [](std::uint64_t s) {
                  Rng rng(s);
                  auto z = randn({3, 4}, rng, 2.0);
                  auto r = projector(12, rng);
                  return check([=](Graph& g) { return project(g, softmax(g, z, 2.0), r); }, {z});
                }});
  cs.push_back({"cross_entropy", [](std::uint64_t s) {
                  Rng rng(s);
                  auto z = randn({5, 4}, rng, 2.0);
                  auto y = random_labels(5, 4, rng);
                  return check([=](Graph& g) { return cross_entropy(g, z, y); }, {z});
                }});
  cs.push_back({"shannon_entropy", [](std::uint64_t s) {
                  Rng rng(s);
                  auto z = randn({5, 4}, rng, 2.0);
                  return check([=](Graph& g) { return shannon_entropy(g, z); }, {z});
                }});
  cs.push_back({"kl_temperature T=15", [](std::uint64_t s) {
                  Rng rng(s);
                  auto p = randn({4, 5}, rng, 10.0), q = randn({4, 5}, rng, 10.0);
                  return check([=](Graph& g) { return kl_temperature(g, p, q, 15.0); }, {p, q});
                }});
  cs.push_back({"kl_temperature T=1", [](std::uint64_t s) {
                  Rng rng(s);
                  auto p = randn({4, 5}, rng), q = randn({4, 5}, rng);
                  return check([=](Graph& g) { return kl_temperature(g, p, q, 1.0); }, {p, q});
                }});
  cs.push_back({"cosine_matrix", [](std::uint64_t s) {
                  Rng rng(s);
                  auto a = randn({3, 6}, rng), b = randn({4, 6}, rng);
                  auto r = projector(12, rng);
                  return check([=](Graph& g) { return project(g, cosine_matrix(g, a, b), r); }, {a, b});
                }});
  cs.push_back({"cosine_rows", [](std::uint64_t s) {
                  Rng rng(s);
                  auto a = randn({4, 6}, rng), b = randn({4, 6}, rng);
                  auto r = projector(4, rng);
                  return check([=](Graph& g) { return project(g, cosine_rows(g, a, b), r); }, {a, b});
                }});
  cs.push_back({"cosine_similarity", [](std::uint64_t s) {
                  Rng rng(s);
                  auto a = randn({6}, rng), b = randn({6}, rng);
                  return check([=](Graph& g) { return cosine_similarity(g, a, b); }, {a, b});
                }});
  cs.push_back({"pairwise_sum", [](std::uint64_t s) {
                  Rng rng(s);
                  auto a = randn({3, 4}, rng), b = randn({3, 4}, rng);
                  auto r = projector(36, rng);
                  return check([=](Graph& g) { return project(g, pairwise_sum(g, a, b), r); }, {a, b});
                }});
  cs.push_back({"decoupled loss", [](std::uint64_t s) {
                  Rng rng(s);
                  auto F = randn({4, 6}, rng), B = randn({4, 6}, rng), W = randn({3, 6}, rng);
                  auto y = random_labels(4, 3, rng);
                  return check([=](Graph& g) { return decoupled_loss(g, F, B, W, y); }, {F, B, W});
                }});
  cs.push_back({"decoupled loss, same-image pairs", [](std::uint64_t s) {
                  Rng rng(s);
                  auto F = randn({4, 6}, rng), B = randn({4, 6}, rng), W = randn({3, 6}, rng);
                  auto y = random_labels(4, 3, rng);
                  return check([=](Graph& g) { return decoupled_loss(g, F, B, W, y, OrthoPairs::SameImage); },
                               {F, B, W});
                }});
  cs.push_back({"training loss", [](std::uint64_t s) {
                  Rng rng(s);
                  auto F = randn({3, 5}, rng), B = randn({3, 5}, rng), W = randn({4, 5}, rng), b = randn({4}, rng);
                  auto y = random_labels(3, 4, rng);
                  TrainConfig cfg;
                  cfg.alpha = 0.5;  // large enough that the decoupled term is visible in the gradient
                  return check([=](Graph& g) {
                    auto h = heads(g, F, B, W, b);
                    return training_loss(g, h.z_o, h.z_f, h.Z_fb, y, F, B, W, cfg);
                  }, {F, B, W, b});
                }});
  cs.push_back({"adaptation loss", [](std::uint64_t s) {
                  Rng rng(s);
                  auto F = randn({3, 5}, rng), B = randn({3, 5}, rng), W = randn({4, 5}, rng), b = randn({4}, rng);
                  auto pseudo = random_labels(3, 4, rng);
                  AdaptConfig cfg;
                  cfg.delta = 0.5;
                  cfg.temperature = 3.0;
                  return check([=](Graph& g) {
                    auto h = heads(g, F, B, W, b);
                    return adaptation_loss(g, h.z_o, h.z_f, h.Z_fb, F, B, W, pseudo, cfg);
                  }, {F, B, W, b});
                }});
  cs.push_back({"adaptation loss, paper defaults", [](std::uint64_t s) {
                  Rng rng(s);
                  auto F = randn({3, 5}, rng), B = randn({3, 5}, rng), W = randn({4, 5}, rng), b = randn({4}, rng);
                  auto pseudo = random_labels(3, 4, rng);
                  const AdaptConfig cfg;
                  return check([=](Graph& g) {
                    auto h = heads(g, F, B, W, b);
                    return adaptation_loss(g, h.z_o, h.z_f, h.Z_fb, F, B, W, pseudo, cfg);
                  }, {F, B, W, b});
                }});
  return cs;
}

}  // namespace gradcases
