#pragma once

// Test-time counterfactual adaptation: online, label-free updates of the
// batch-norm affine parameters, the foreground extractor and the classifier.

#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ccam/counterfactual.hpp"

namespace ccam {

struct AdaptConfig {
  std::uint64_t seed = 7;
  double beta = 0.2;
  double delta = 0.012;
  double temperature = 15.0;
  double lr = 1e-4;
  int batch_size = 12;
  int passes = 1;
  OrthoPairs ortho_pairs = OrthoPairs::AllPairs;
  // Restore the input parameters before every batch instead of accumulating
  // updates over the stream.
  bool episodic = false;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(lr >= 0.0)) throw ConfigError("adapt_lr must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (passes < 1) throw ConfigError("adapt_passes must be >= 1");
  }
};

struct AdaptTerms {
  double distill = 0.0;
  double entropy = 0.0;
  double decoupled = 0.0;
  double total = 0.0;
};

/// z_o, z_f: [bz, n]; Z_fb: [bz, bz, n]. `pseudo` supplies the class index the
/// decoupled loss aligns each foreground with; at test time these come from
/// the model's own predictions.
template <class T>
BasicTensor<T> adaptation_loss(Graph& g, const BasicTensor<T>& z_o, const BasicTensor<T>& z_f,
                               const BasicTensor<T>& Z_fb, const BasicTensor<T>& F, const BasicTensor<T>& B,
                               const BasicTensor<T>& W, std::span<const int> pseudo, const AdaptConfig& cfg,
                               AdaptTerms* terms = nullptr) {
  if (z_o.rank() != 2 || z_f.shape() != z_o.shape()) throw ShapeError("adaptation_loss: z_o / z_f shape mismatch");
  const int bz = z_o.dim(0), n = z_o.dim(1);
  if (Z_fb.shape() != Shape{bz, bz, n}) throw ShapeError("adaptation_loss: Z_fb must be [bz, bz, n]");
  auto kd = kl_temperature(g, z_o, z_f, static_cast<T>(cfg.temperature));
  auto ent = shannon_entropy(g, reshape(g, Z_fb, {bz * bz, n}));
  auto dl = decoupled_loss(g, F, B, W, pseudo, cfg.ortho_pairs);
  auto rest = add(g, ent, scale(g, dl, static_cast<T>(cfg.delta)));
  auto loss = add(g, scale(g, kd, static_cast<T>(cfg.beta)), scale(g, rest, static_cast<T>(1.0 - cfg.beta)));
  if (terms) *terms = {kd.item(), ent.item(), dl.item(), loss.item()};
  return loss;
}

/// Ensemble prediction of every row, used as the decoupled-loss target.
inline std::vector<int> pseudo_labels(const Tensor& z_o, const Tensor& z_f) {
  const int bz = z_o.dim(0), n = z_o.dim(1);
  std::vector<int> out(static_cast<std::size_t>(bz));
  for (int b = 0; b < bz; ++b) {
    const std::size_t off = static_cast<std::size_t>(b) * n;
    out[static_cast<std::size_t>(b)] = ensemble_predict(z_o.data().subspan(off, n), z_f.data().subspan(off, n)).pred;
  }
  return out;
}

struct AdaptLogRow {
  int batch = 0;  // 1-based across all passes
  AdaptTerms terms;
};

struct AdaptResult {
  ModelParams params;
  std::vector<AdaptLogRow> log;
};

/// Runs adaptation on unlabeled images; `params` is left untouched and the
/// adapted copy is returned with its adapted flag set.
inline AdaptResult adapt(std::span<const UnlabeledImage> images, const ModelParams& params, const AdaptConfig& cfg) {
  cfg.validate();
  if (images.size() < 2) throw ConfigError("adapt: need at least 2 test images");
  AdaptResult res;
  res.params = params.clone();
  ModelParams& p = res.params;
  // Backbone convolutions are frozen; dropping their gradient flag also skips
  // the weight-gradient computation.
  for (auto& c : p.convs) {
    c.weight.set_requires_grad(false);
    c.bias.set_requires_grad(false);
  }
  auto trainable = p.adaptable();
  const ModelParams initial = p.clone();
  AdamState<float> opt;
  opt.config.lr = cfg.lr;

  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(cfg.seed).fork(0xADA7);
  int batch_no = 0;
  for (int pass = 0; pass < cfg.passes; ++pass) {
    shuffle(order, rng);
    for (const auto& idx : make_batches(order, cfg.batch_size)) {
      ++batch_no;
      if (cfg.episodic) {
        const auto src = initial.clone().adaptable();
        for (std::size_t k = 0; k < trainable.size(); ++k) {
          std::copy(src[k].data().begin(), src[k].data().end(), trainable[k].data().begin());
        }
        opt = AdamState<float>{};
        opt.config.lr = cfg.lr;
      }
      Shape bs{static_cast<int>(idx.size())};
      const Shape& s = images[static_cast<std::size_t>(idx[0])].image.shape();
      bs.insert(bs.end(), s.begin(), s.end());
      Tensor batch(bs);
      const std::size_t per = shape_numel(s);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& im = images[static_cast<std::size_t>(idx[b])].image;
        if (im.shape() != s) throw ShapeError("adapt: images differ in size");
        std::copy(im.data().begin(), im.data().end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * per));
      }
      const std::string where = "adaptation batch " + std::to_string(batch_no);
      Graph g;
      AdaptTerms terms;
      Tensor loss;
      try {
        auto X = forward_backbone(g, batch, p, Mode::Adapt);
        auto fb = decouple_features(g, X, p);
        auto z_o = classify(g, fb.O, p);
        auto z_f = classify(g, fb.F, p);
        const auto pseudo = pseudo_labels(z_o, z_f);
        auto cb = synthesize_counterfactuals(g, fb.F, fb.B, pseudo);
        auto Z_fb = classify(g, cb.FB, p);
        loss = adaptation_loss(g, z_o, z_f, Z_fb, fb.F, fb.B, p.cls_weight, pseudo, cfg, &terms);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at " + where);
      }
      if (!std::isfinite(terms.total)) throw DivergenceError("non-finite loss at " + where);
      for (auto& t : trainable) t.clear_grad();
      g.backward(loss);
      adam_step<float>(trainable, opt);
      res.log.push_back({batch_no, terms});
    }
  }
  for (auto& t : trainable) t.clear_grad();
  for (auto& c : p.convs) {
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
  }
  p.adapted = true;
  return res;
}

}  // namespace ccam
