#pragma once

// Decoupled loss, within-batch counterfactual synthesis and the training
// objective, plus the training loop that drives them.

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ccam/adam.hpp"
#include "ccam/model.hpp"
#include "ccam/synthdata.hpp"

namespace ccam {

/// Which (B, F) pairs the background-orthogonality term covers.
enum class OrthoPairs {
  AllPairs,   // every (B_i, F_j) in the batch
  SameImage,  // only (B_i, F_i)
};

template <class T>
struct DecoupledTerms {
  BasicTensor<T> fg_alignment;    // mean over images of sum_i |cos(F, p_i) - [i == k]|
  BasicTensor<T> bg_fg_ortho;     // mean over pairs of |cos(B_i, F_j)|
  BasicTensor<T> bg_proto_ortho;  // mean over images of sum_i |cos(B, p_i)|
  BasicTensor<T> total;
};

namespace detail {

inline void check_labels(std::span<const int> labels, int n, const char* op) {
  for (int y : labels) {
    if (y < 0 || y >= n) {
      throw ShapeError(std::string(op) + ": label " + std::to_string(y) + " out of range [0, " +
                       std::to_string(n) + ")");
    }
  }
}

}  // namespace detail

/// F, B: [bz, d]; W: [n, d] whose rows are the class prototypes.
template <class T>
DecoupledTerms<T> decoupled_terms(Graph& g, const BasicTensor<T>& F, const BasicTensor<T>& B,
                                  const BasicTensor<T>& W, std::span<const int> labels,
                                  OrthoPairs pairs = OrthoPairs::AllPairs) {
  if (F.rank() != 2 || B.shape() != F.shape() || W.rank() != 2 || W.dim(1) != F.dim(1)) {
    throw ShapeError("decoupled_loss: F " + shape_str(F.shape()) + ", B " + shape_str(B.shape()) + ", W " +
                     shape_str(W.shape()));
  }
  const int bz = F.dim(0), n = W.dim(0);
  if (labels.size() != static_cast<std::size_t>(bz)) throw ShapeError("decoupled_loss: label count mismatch");
  detail::check_labels(labels, n, "decoupled_loss");

  BasicTensor<T> onehot({bz, n});
  for (int b = 0; b < bz; ++b) onehot[static_cast<std::size_t>(b) * n + labels[b]] = T(1);
  const T inv_bz = static_cast<T>(1.0 / bz);

  DecoupledTerms<T> t;
  t.fg_alignment = scale(g, sum(g, abs(g, sub(g, cosine_matrix(g, F, W), onehot))), inv_bz);
  t.bg_fg_ortho = pairs == OrthoPairs::AllPairs ? mean(g, abs(g, cosine_matrix(g, B, F)))
                                                : mean(g, abs(g, cosine_rows(g, B, F)));
  t.bg_proto_ortho = scale(g, sum(g, abs(g, cosine_matrix(g, B, W))), inv_bz);
  t.total = add(g, add(g, t.fg_alignment, t.bg_fg_ortho), t.bg_proto_ortho);
  return t;
}

template <class T>
BasicTensor<T> decoupled_loss(Graph& g, const BasicTensor<T>& F, const BasicTensor<T>& B, const BasicTensor<T>& W,
                              std::span<const int> labels, OrthoPairs pairs = OrthoPairs::AllPairs) {
  return decoupled_terms(g, F, B, W, labels, pairs).total;
}

template <class T>
struct BasicCounterfactualBatch {
  BasicTensor<T> FB;        // [bz, bz, d], FB[i][j] = F_i + B_j
  std::vector<int> labels;  // bz * bz, row-major; entry (i, j) carries y_i
};

using CounterfactualBatch = BasicCounterfactualBatch<float>;

template <class T>
BasicCounterfactualBatch<T> synthesize_counterfactuals(Graph& g, const BasicTensor<T>& F, const BasicTensor<T>& B,
                                                       std::span<const int> labels) {
  if (F.rank() != 2 || B.rank() != 2 || F.dim(0) != B.dim(0)) {
    throw ShapeError("synthesize_counterfactuals: batch length mismatch " + shape_str(F.shape()) + " vs " +
                     shape_str(B.shape()));
  }
  const int bz = F.dim(0);
  if (labels.size() != static_cast<std::size_t>(bz)) {
    throw ShapeError("synthesize_counterfactuals: label count mismatch");
  }
  BasicCounterfactualBatch<T> cb;
  cb.FB = pairwise_sum(g, F, B);
  cb.labels.reserve(static_cast<std::size_t>(bz) * bz);
  for (int i = 0; i < bz; ++i) cb.labels.insert(cb.labels.end(), static_cast<std::size_t>(bz), labels[i]);
  return cb;
}

struct TrainConfig {
  std::uint64_t seed = 7;
  int epochs = 30;
  int batch_size = 12;
  double lr = 1e-3;
  double lr_power = 0.9;  // polynomial decay to zero over the run
  double alpha = 0.001;
  bool use_counterfactual = true;
  bool use_decouple = true;
  OrthoPairs ortho_pairs = OrthoPairs::AllPairs;
  Architecture arch;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  }
};

/// Scalar values of each term of the objective; inactive terms stay 0.
struct LossBreakdown {
  double ce_original = 0.0;
  double ce_foreground = 0.0;
  double ce_counterfactual = 0.0;
  double decoupled = 0.0;
  double total = 0.0;
  int active_terms = 0;
};

/// z_o, z_f: [bz, n]; Z_fb: [bz, bz, n]; F, B: [bz, d]; W: [n, d].
template <class T>
BasicTensor<T> training_loss(Graph& g, const BasicTensor<T>& z_o, const BasicTensor<T>& z_f,
                             const BasicTensor<T>& Z_fb, std::span<const int> y, const BasicTensor<T>& F,
                             const BasicTensor<T>& B, const BasicTensor<T>& W, const TrainConfig& cfg,
                             LossBreakdown* breakdown = nullptr) {
  const int bz = z_o.dim(0), n = z_o.dim(1);
  if (z_f.shape() != z_o.shape()) throw ShapeError("training_loss: z_o / z_f shape mismatch");
  detail::check_labels(y, n, "training_loss");
  LossBreakdown bd;
  auto ce_o = cross_entropy(g, z_o, y);
  auto ce_f = cross_entropy(g, z_f, y);
  auto loss = add(g, ce_o, ce_f);
  bd.ce_original = ce_o.item();
  bd.ce_foreground = ce_f.item();
  bd.active_terms = 2;
  if (cfg.use_counterfactual) {
    if (Z_fb.shape() != Shape{bz, bz, n}) throw ShapeError("training_loss: Z_fb must be [bz, bz, n]");
    std::vector<int> yy;
    yy.reserve(static_cast<std::size_t>(bz) * bz);
    for (int i = 0; i < bz; ++i) yy.insert(yy.end(), static_cast<std::size_t>(bz), y[i]);
    auto ce_fb = cross_entropy(g, reshape(g, Z_fb, {bz * bz, n}), yy);
    loss = add(g, loss, ce_fb);
    bd.ce_counterfactual = ce_fb.item();
    ++bd.active_terms;
  }
  if (cfg.use_decouple) {
    auto dl = decoupled_loss(g, F, B, W, y, cfg.ortho_pairs);
    loss = add(g, loss, scale(g, dl, static_cast<T>(cfg.alpha)));
    bd.decoupled = dl.item();
    ++bd.active_terms;
  }
  bd.total = loss.item();
  if (breakdown) *breakdown = bd;
  return loss;
}

// ---------------------------------------------------------------- training loop

struct EpochLog {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double train_acc = 0.0;
  double seconds = 0.0;
  LossBreakdown mean_terms;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

/// Stacks the images of the selected scenes into [bz, 3, S, S].
inline Tensor stack_images(std::span<const Scene> scenes, std::span<const int> idx) {
  const Shape& s = scenes[static_cast<std::size_t>(idx[0])].image.shape();
  Shape bs{static_cast<int>(idx.size())};
  bs.insert(bs.end(), s.begin(), s.end());
  Tensor out(bs);
  const std::size_t per = shape_numel(s);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& im = scenes[static_cast<std::size_t>(idx[b])].image;
    if (im.shape() != s) throw ShapeError("stack_images: images differ in size");
    std::copy(im.data().begin(), im.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

/// Splits a permutation into batches of `batch_size`; a trailing batch smaller
/// than 2 is dropped because batch statistics need two samples.
inline std::vector<std::vector<int>> make_batches(const std::vector<int>& order, int batch_size) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    if (end - i < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline double poly_lr(double base, double power, long step, long total) {
  if (total <= 0) return base;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::pow(std::max(frac, 0.0), power);
}

struct StepOutput {
  Tensor loss;
  LossBreakdown terms;
  int correct = 0;
};

/// One forward pass of the full objective on a batch in training mode.
inline StepOutput training_forward(Graph& g, ModelParams& p, const Tensor& images, std::span<const int> y,
                                   const TrainConfig& cfg) {
  auto X = forward_backbone(g, images, p, Mode::Train);
  auto fb = decouple_features(g, X, p);
  auto z_o = classify(g, fb.O, p);
  auto z_f = classify(g, fb.F, p);
  Tensor Z_fb;
  if (cfg.use_counterfactual) {
    auto cb = synthesize_counterfactuals(g, fb.F, fb.B, y);
    Z_fb = classify(g, cb.FB, p);
  }
  StepOutput out;
  out.loss = training_loss(g, z_o, z_f, Z_fb, y, fb.F, fb.B, p.cls_weight, cfg, &out.terms);
  const int n = p.num_classes();
  for (std::size_t b = 0; b < y.size(); ++b) {
    const auto pb = ensemble_predict(z_o.data().subspan(b * n, n), z_f.data().subspan(b * n, n));
    out.correct += pb.pred == y[b];
  }
  return out;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from a fresh initialization seeded by cfg.seed.
inline TrainResult train(std::span<const Scene> scenes, int num_classes, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (scenes.empty()) throw ConfigError("train: empty training split");
  for (const auto& s : scenes) {
    if (s.fg_class < 0 || s.fg_class >= num_classes) {
      throw MismatchError("train: scene " + s.id + " has label outside the model's class range");
    }
  }
  TrainResult res;
  res.params = init_params<float>(cfg.seed, num_classes, cfg.arch);
  AdamState<float> opt;
  opt.config.lr = cfg.lr;
  auto params = res.params.trainable();

  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  const long batches_per_epoch = static_cast<long>(make_batches(order, cfg.batch_size).size());
  if (batches_per_epoch == 0) throw ConfigError("train: fewer than 2 training images");
  const long total_steps = batches_per_epoch * cfg.epochs;
  Rng shuffle_rng = Rng(cfg.seed).fork(0x5EED);
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle(order, shuffle_rng);
    const auto batches = make_batches(order, cfg.batch_size);
    EpochLog el;
    el.epoch = epoch;
    long seen = 0, correct = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      std::vector<int> y(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = scenes[static_cast<std::size_t>(idx[k])].fg_class;
      const Tensor images = stack_images(scenes, idx);
      Graph g;
      StepOutput so;
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi + 1);
      try {
        so = training_forward(g, res.params, images, y, cfg);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at " + where);
      }
      if (!std::isfinite(so.terms.total)) throw DivergenceError("non-finite loss at " + where);
      for (auto& t : params) t.clear_grad();
      g.backward(so.loss);
      adam_step<float>(params, opt, poly_lr(cfg.lr, cfg.lr_power, step, total_steps));
      ++step;
      el.mean_loss += so.terms.total;
      el.mean_terms.ce_original += so.terms.ce_original;
      el.mean_terms.ce_foreground += so.terms.ce_foreground;
      el.mean_terms.ce_counterfactual += so.terms.ce_counterfactual;
      el.mean_terms.decoupled += so.terms.decoupled;
      el.mean_terms.active_terms = so.terms.active_terms;
      seen += static_cast<long>(idx.size());
      correct += so.correct;
    }
    for (auto& t : params) t.clear_grad();
    const double nb = static_cast<double>(batches.size());
    el.mean_loss /= nb;
    el.mean_terms.ce_original /= nb;
    el.mean_terms.ce_foreground /= nb;
    el.mean_terms.ce_counterfactual /= nb;
    el.mean_terms.decoupled /= nb;
    el.mean_terms.total = el.mean_loss;
    el.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return res;
}

/// Mean objective over the training batches of one (unshuffled) epoch,
/// computed on a copy so `p` and its statistics are left untouched.
inline double mean_training_loss(std::span<const Scene> scenes, const ModelParams& p, const TrainConfig& cfg) {
  ModelParams copy = p.clone();
  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  const auto batches = make_batches(order, cfg.batch_size);
  for (const auto& idx : batches) {
    std::vector<int> y(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) y[k] = scenes[static_cast<std::size_t>(idx[k])].fg_class;
    Graph g = Graph::inference();
    total += training_forward(g, copy, stack_images(scenes, idx), y, cfg).terms.total;
  }
  return total / static_cast<double>(batches.size());
}

}  // namespace ccam
