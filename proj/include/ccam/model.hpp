#pragma once

// Backbone (4 conv blocks), two-conv foreground extractor, shared linear
// classifier whose rows double as class prototypes, and class activation
// maps built from either feature source.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ccam/checkpoint.hpp"
#include "ccam/ops.hpp"
#include "ccam/rng.hpp"

namespace ccam {

/// Channel widths of the four backbone blocks; the last one is the feature
/// dimension d shared by the foreground extractor and the classifier.
struct Architecture {
  std::array<int, 4> widths{16, 32, 64, 64};
  int feature_dim() const { return widths[3]; }
};

template <class T>
struct ConvLayer {
  BasicTensor<T> weight;  // [out, in, 3, 3]
  BasicTensor<T> bias;    // [out]
};

template <class T>
struct BasicModelParams {
  std::array<ConvLayer<T>, 4> convs;
  std::array<BatchNorm<T>, 4> bns;
  ConvLayer<T> fg1, fg2;
  BasicTensor<T> cls_weight;  // [n, d]
  BasicTensor<T> cls_bias;    // [n]
  bool adapted = false;

  int num_classes() const { return cls_weight.dim(0); }
  int feature_dim() const { return cls_weight.dim(1); }

  /// Every learnable tensor, in a fixed order.
  std::vector<BasicTensor<T>> trainable() const {
    std::vector<BasicTensor<T>> out;
    for (int i = 0; i < 4; ++i) {
      out.insert(out.end(), {convs[i].weight, convs[i].bias, bns[i].gamma, bns[i].beta});
    }
    out.insert(out.end(), {fg1.weight, fg1.bias, fg2.weight, fg2.bias, cls_weight, cls_bias});
    return out;
  }

  /// The tensors test-time adaptation may update: batch-norm affine
  /// parameters, the foreground extractor and the classifier.
  std::vector<BasicTensor<T>> adaptable() const {
    std::vector<BasicTensor<T>> out;
    for (int i = 0; i < 4; ++i) out.insert(out.end(), {bns[i].gamma, bns[i].beta});
    out.insert(out.end(), {fg1.weight, fg1.bias, fg2.weight, fg2.bias, cls_weight, cls_bias});
    return out;
  }

  /// Deep copy; the result shares no storage with *this.
  BasicModelParams clone() const {
    BasicModelParams c = *this;
    for (int i = 0; i < 4; ++i) {
      c.convs[i] = {convs[i].weight.clone(), convs[i].bias.clone()};
      c.bns[i].gamma = bns[i].gamma.clone();
      c.bns[i].beta = bns[i].beta.clone();
      c.bns[i].running_mean = bns[i].running_mean.clone();
      c.bns[i].running_var = bns[i].running_var.clone();
    }
    c.fg1 = {fg1.weight.clone(), fg1.bias.clone()};
    c.fg2 = {fg2.weight.clone(), fg2.bias.clone()};
    c.cls_weight = cls_weight.clone();
    c.cls_bias = cls_bias.clone();
    return c;
  }

  template <class U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> c;
    for (int i = 0; i < 4; ++i) {
      c.convs[i] = {convs[i].weight.template cast<U>(), convs[i].bias.template cast<U>()};
      c.bns[i].gamma = bns[i].gamma.template cast<U>();
      c.bns[i].beta = bns[i].beta.template cast<U>();
      c.bns[i].running_mean = bns[i].running_mean.template cast<U>();
      c.bns[i].running_var = bns[i].running_var.template cast<U>();
    }
    c.fg1 = {fg1.weight.template cast<U>(), fg1.bias.template cast<U>()};
    c.fg2 = {fg2.weight.template cast<U>(), fg2.bias.template cast<U>()};
    c.cls_weight = cls_weight.template cast<U>();
    c.cls_bias = cls_bias.template cast<U>();
    c.adapted = adapted;
    return c;
  }
};

using ModelParams = BasicModelParams<float>;

namespace detail {

template <class T>
BasicTensor<T> he_normal(Shape shape, int fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape), true);
  const double sd = std::sqrt(2.0 / fan_in);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * sd);
  return t;
}

template <class T>
ConvLayer<T> make_conv(int in, int out, Rng& rng) {
  return {he_normal<T>({out, in, 3, 3}, in * 9, rng), BasicTensor<T>({out}, true)};
}

}  // namespace detail

/// He-normal weights, zero biases, batch-norm gamma 1 / beta 0.
template <class T = float>
BasicModelParams<T> init_params(std::uint64_t seed, int num_classes, const Architecture& arch) {
  if (num_classes < 2) throw ShapeError("init_params: need at least 2 classes");
  for (int w : arch.widths) {
    if (w < 2) throw ShapeError("init_params: widths must be >= 2");
  }
  Rng rng = Rng(seed).fork(0xC0FFEE);
  BasicModelParams<T> p;
  int in = 3;
  for (int i = 0; i < 4; ++i) {
    p.convs[i] = detail::make_conv<T>(in, arch.widths[i], rng);
    p.bns[i] = BatchNorm<T>::make(arch.widths[i]);
    in = arch.widths[i];
  }
  const int d = arch.feature_dim();
  p.fg1 = detail::make_conv<T>(d, d, rng);
  p.fg2 = detail::make_conv<T>(d, d, rng);
  p.cls_weight = detail::he_normal<T>({num_classes, d}, d, rng);
  p.cls_bias = BasicTensor<T>({num_classes}, true);
  return p;
}

template <class T = float>
BasicModelParams<T> init_params(std::uint64_t seed, int num_classes, int feature_dim) {
  Architecture arch;
  arch.widths[3] = feature_dim;
  return init_params<T>(seed, num_classes, arch);
}

// ---------------------------------------------------------------- checkpoints

inline NamedTensors to_named(const ModelParams& p) {
  NamedTensors out;
  for (int i = 0; i < 4; ++i) {
    const std::string b = "backbone." + std::to_string(i) + ".";
    out.emplace_back(b + "conv.weight", p.convs[i].weight);
    out.emplace_back(b + "conv.bias", p.convs[i].bias);
    out.emplace_back(b + "bn.gamma", p.bns[i].gamma);
    out.emplace_back(b + "bn.beta", p.bns[i].beta);
    out.emplace_back(b + "bn.running_mean", p.bns[i].running_mean);
    out.emplace_back(b + "bn.running_var", p.bns[i].running_var);
  }
  out.emplace_back("fg.0.weight", p.fg1.weight);
  out.emplace_back("fg.0.bias", p.fg1.bias);
  out.emplace_back("fg.1.weight", p.fg2.weight);
  out.emplace_back("fg.1.bias", p.fg2.bias);
  out.emplace_back("classifier.weight", p.cls_weight);
  out.emplace_back("classifier.bias", p.cls_bias);
  out.emplace_back("meta.adapted", Tensor(Shape{1}, std::vector<float>{p.adapted ? 1.0f : 0.0f}));
  return out;
}

inline ModelParams from_named(const NamedTensors& named) {
  auto find = [&](const std::string& name) -> Tensor {
    for (const auto& [n, t] : named) {
      if (n == name) return t.clone();
    }
    throw CheckpointError("checkpoint is missing tensor " + name);
  };
  ModelParams p;
  int in = 3;
  for (int i = 0; i < 4; ++i) {
    const std::string b = "backbone." + std::to_string(i) + ".";
    p.convs[i] = {find(b + "conv.weight"), find(b + "conv.bias")};
    const int out = p.convs[i].weight.dim(0);
    if (p.convs[i].weight.shape() != Shape{out, in, 3, 3}) throw CheckpointError("bad shape for " + b + "conv.weight");
    p.bns[i].gamma = find(b + "bn.gamma");
    p.bns[i].beta = find(b + "bn.beta");
    p.bns[i].running_mean = find(b + "bn.running_mean");
    p.bns[i].running_var = find(b + "bn.running_var");
    for (const Tensor* t : {&p.convs[i].bias, &p.bns[i].gamma, &p.bns[i].beta, &p.bns[i].running_mean,
                            &p.bns[i].running_var}) {
      if (t->shape() != Shape{out}) throw CheckpointError("bad shape in block " + b);
    }
    in = out;
  }
  const int d = in;
  p.fg1 = {find("fg.0.weight"), find("fg.0.bias")};
  p.fg2 = {find("fg.1.weight"), find("fg.1.bias")};
  for (const auto* l : {&p.fg1, &p.fg2}) {
    if (l->weight.shape() != Shape{d, d, 3, 3} || l->bias.shape() != Shape{d}) {
      throw CheckpointError("bad foreground extractor shape");
    }
  }
  p.cls_weight = find("classifier.weight");
  p.cls_bias = find("classifier.bias");
  if (p.cls_weight.rank() != 2 || p.cls_weight.dim(1) != d || p.cls_bias.shape() != Shape{p.cls_weight.dim(0)}) {
    throw CheckpointError("bad classifier shape");
  }
  p.adapted = find("meta.adapted").item() != 0.0f;
  for (auto& t : p.trainable()) {
    t.set_requires_grad(true);
    for (float v : t.data()) {
      if (!std::isfinite(v)) throw CheckpointError("checkpoint contains non-finite parameters");
    }
  }
  return p;
}

inline void save_model(const std::string& path, const ModelParams& p) { write_checkpoint(path, to_named(p)); }
inline ModelParams load_model(const std::string& path) { return from_named(read_checkpoint(path)); }

// ---------------------------------------------------------------- forward

/// images [3,S,S] or [N,3,S,S] -> X [d, S/8, S/8] (batched accordingly).
template <class T>
BasicTensor<T> forward_backbone(Graph& g, const BasicTensor<T>& images, BasicModelParams<T>& p, Mode mode) {
  BasicTensor<T> h = images;
  for (int i = 0; i < 4; ++i) {
    h = conv2d(g, h, p.convs[i].weight, p.convs[i].bias, 1, 1);
    h = batchnorm2d(g, h, p.bns[i], mode);
    h = relu(g, h);
    if (i < 3) h = maxpool2d(g, h, 2, 2);
  }
  for (T v : h.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw DivergenceError("backbone produced non-finite activations");
  }
  return h;
}

template <class T>
struct BasicFeatureBundle {
  BasicTensor<T> X;    // backbone maps [.., d, h, w]
  BasicTensor<T> X_f;  // foreground maps [.., d, h, w]
  BasicTensor<T> O;    // GAP(X)   [.., d]
  BasicTensor<T> F;    // GAP(X_f) [.., d]
  BasicTensor<T> B;    // O - F    [.., d]
};

using FeatureBundle = BasicFeatureBundle<float>;

template <class T>
BasicTensor<T> foreground_extractor(Graph& g, const BasicTensor<T>& X, const BasicModelParams<T>& p) {
  auto h = relu(g, conv2d(g, X, p.fg1.weight, p.fg1.bias, 1, 1));
  return relu(g, conv2d(g, h, p.fg2.weight, p.fg2.bias, 1, 1));
}

template <class T>
BasicFeatureBundle<T> decouple_features(Graph& g, const BasicTensor<T>& X, const BasicModelParams<T>& p) {
  BasicFeatureBundle<T> fb;
  fb.X = X;
  fb.X_f = foreground_extractor(g, X, p);
  fb.O = global_avg_pool(g, X);
  fb.F = global_avg_pool(g, fb.X_f);
  fb.B = sub(g, fb.O, fb.F);
  return fb;
}

/// Shared classifier, applied identically to O, F and every counterfactual.
template <class T>
BasicTensor<T> classify(Graph& g, const BasicTensor<T>& v, const BasicModelParams<T>& p) {
  return linear(g, v, p.cls_weight, p.cls_bias);
}

// ---------------------------------------------------------------- prediction

struct PredictionBundle {
  std::vector<float> z_o, z_f;
  std::vector<double> s_o, s_f;  // softmax at T = 1
  std::vector<double> s;         // (s_o + s_f) / 2
  int pred = 0;
};

inline std::vector<double> softmax_values(std::span<const float> z, double t = 1.0) {
  if (!(t > 0.0)) throw ShapeError("softmax: temperature must be positive");
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) s += p[k] = std::exp((z[k] - mx) / t);
  for (auto& v : p) v /= s;
  return p;
}

/// Averages the original and foreground class distributions; ties go to the
/// lowest class index.
inline PredictionBundle ensemble_predict(std::span<const float> z_o, std::span<const float> z_f) {
  if (z_o.size() != z_f.size() || z_o.empty()) throw ShapeError("ensemble_predict: logit length mismatch");
  PredictionBundle pb;
  pb.z_o.assign(z_o.begin(), z_o.end());
  pb.z_f.assign(z_f.begin(), z_f.end());
  pb.s_o = softmax_values(z_o);
  pb.s_f = softmax_values(z_f);
  pb.s.resize(z_o.size());
  for (std::size_t k = 0; k < z_o.size(); ++k) pb.s[k] = 0.5 * (pb.s_o[k] + pb.s_f[k]);
  pb.pred = 0;
  for (std::size_t k = 1; k < pb.s.size(); ++k) {
    if (pb.s[k] > pb.s[static_cast<std::size_t>(pb.pred)]) pb.pred = static_cast<int>(k);
  }
  return pb;
}

/// Class indices sorted by descending score, stable on ties.
inline std::vector<int> rank_classes(std::span<const double> scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

// ---------------------------------------------------------------- activation maps

enum class CamSource { Foreground, Backbone };

/// M_i = sum_j W[i, j] * maps[j]; maps [d,h,w], W [n,d] -> [h,w].
inline Tensor compute_cam(const Tensor& maps, const Tensor& W, int class_index) {
  if (maps.rank() != 3 || W.rank() != 2 || W.dim(1) != maps.dim(0)) {
    throw ShapeError("compute_cam: maps " + shape_str(maps.shape()) + " vs weight " + shape_str(W.shape()));
  }
  if (class_index < 0 || class_index >= W.dim(0)) throw ShapeError("compute_cam: class index out of range");
  const int d = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({h, w});
  std::vector<double> acc(hw, 0.0);
  for (int j = 0; j < d; ++j) {
    const double wij = W[static_cast<std::size_t>(class_index) * d + j];
    for (std::size_t p = 0; p < hw; ++p) acc[p] += wij * maps[j * hw + p];
  }
  for (std::size_t p = 0; p < hw; ++p) out[p] = static_cast<float>(acc[p]);
  return out;
}

/// CAMs of every class stacked as [n, h, w].
inline Tensor compute_all_cams(const Tensor& maps, const Tensor& W) {
  const int n = W.dim(0), h = maps.dim(1), w = maps.dim(2);
  Tensor out({n, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const Tensor m = compute_cam(maps, W, i);
    std::copy(m.data().begin(), m.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * hw));
  }
  return out;
}

enum class CombinationScheme { Top1, Linear };

/// Weight of the class at 1-based rank r among n classes.
inline double combination_weight(CombinationScheme scheme, int r, int n) {
  if (scheme == CombinationScheme::Top1) return r == 1 ? 1.0 : 0.0;
  if (n == 1) return 1.0;
  return 1.0 - 2.0 * (r - 1) / static_cast<double>(n - 1);
}

struct LocalizationMap {
  Tensor raw;   // [h, w]
  Tensor norm;  // [S, S] in [0, 1]
};

/// Bilinear resize with half-pixel centres (edge-clamped).
inline Tensor bilinear_resize(const Tensor& src, int out_h, int out_w) {
  const int h = src.dim(0), w = src.dim(1);
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      const double top = (1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1];
      const double bot = (1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1];
      out[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>((1 - ay) * top + ay * bot);
    }
  }
  return out;
}

/// Min-max normalization to [0, 1]; a constant map becomes all zeros.
inline Tensor minmax_normalize(const Tensor& m) {
  const auto [lo_it, hi_it] = std::minmax_element(m.data().begin(), m.data().end());
  const double lo = *lo_it, hi = *hi_it;
  Tensor out(m.shape());
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    out[i] = static_cast<float>(std::clamp((m[i] - lo) / (hi - lo), 0.0, 1.0));
  }
  return out;
}

/// H = sum_r w_r * M_{ranking[r]}, upsampled to out_size and min-max normalized.
inline LocalizationMap combine_cams(const Tensor& cams, std::span<const int> ranking, CombinationScheme scheme,
                                    int out_size) {
  if (cams.rank() != 3) throw ShapeError("combine_cams: cams must be [n, h, w]");
  const int n = cams.dim(0), h = cams.dim(1), w = cams.dim(2);
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  if (ranking.size() != static_cast<std::size_t>(n)) throw ShapeError("combine_cams: ranking is not a permutation");
  for (int c : ranking) {
    if (c < 0 || c >= n || seen[static_cast<std::size_t>(c)]) {
      throw ShapeError("combine_cams: ranking is not a permutation");
    }
    seen[static_cast<std::size_t>(c)] = true;
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> acc(hw, 0.0);
  for (int r = 0; r < n; ++r) {
    const double wr = combination_weight(scheme, r + 1, n);
    if (wr == 0.0) continue;
    const std::size_t off = static_cast<std::size_t>(ranking[static_cast<std::size_t>(r)]) * hw;
    for (std::size_t p = 0; p < hw; ++p) acc[p] += wr * cams[off + p];
  }
  LocalizationMap lm;
  lm.raw = Tensor({h, w});
  for (std::size_t p = 0; p < hw; ++p) lm.raw[p] = static_cast<float>(acc[p]);
  lm.norm = minmax_normalize(bilinear_resize(lm.raw, out_size, out_size));
  return lm;
}

}  // namespace ccam
