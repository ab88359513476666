#pragma once

// Differentiable operations over BasicTensor<T>. Every op takes the Graph it
// records into first; when no input requires a gradient (or the graph is an
// inference graph) nothing is recorded.
//
// Layout conventions: images are [C,H,W] or batched [N,C,H,W]; vectors and
// logits are [d] or batched [..., d] with the last axis as features.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ccam/tensor.hpp"

namespace ccam {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

template <class T, class... Ts>
bool wants_grad(const Graph& g, const BasicTensor<T>& a, const Ts&... rest) {
  if (!g.recording()) return false;
  return a.requires_grad() || (rest.requires_grad() || ...);
}

template <class T>
void check_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Splits [..., n] into (rows, n).
template <class T>
std::pair<int, int> rows_cols(const BasicTensor<T>& x) {
  if (x.rank() == 0) return {1, 1};
  const int n = x.dim(-1);
  return {static_cast<int>(x.numel() / static_cast<std::size_t>(n)), n};
}

// log-softmax of one row at temperature t, written into out.
template <class T>
void log_softmax_row(const T* z, int n, T t, T* out) {
  T mx = z[0];
  for (int k = 1; k < n; ++k) mx = std::max(mx, z[k]);
  double s = 0.0;
  for (int k = 0; k < n; ++k) s += std::exp(static_cast<double>((z[k] - mx) / t));
  const T lse = static_cast<T>(std::log(s));
  for (int k = 0; k < n; ++k) out[k] = (z[k] - mx) / t - lse;
}

}  // namespace detail

// ---------------------------------------------------------------- structure

template <class T>
BasicTensor<T> reshape(Graph& g, const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> v(x.data().begin(), x.data().end());
  BasicTensor<T> out(std::move(shape), std::move(v), x.requires_grad());
  if (detail::wants_grad(g, x)) {
    g.record("reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <class T>
BasicTensor<T> add(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (detail::wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g.record("add", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> sub(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  if (detail::wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g.record("sub", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> scale(Graph& g, const BasicTensor<T>& x, T s) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("scale", [x, out, s]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s;
    });
  }
  return out;
}

/// |x|, with subgradient 0 at x == 0.
template <class T>
BasicTensor<T> abs(Graph& g, const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::abs(x[i]);
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("abs", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        gx[i] += x[i] > T(0) ? go[i] : (x[i] < T(0) ? -go[i] : T(0));
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> relu(Graph& g, const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("relu", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (x[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <class T>
BasicTensor<T> sum(Graph& g, const BasicTensor<T>& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
  auto out = BasicTensor<T>::scalar(static_cast<T>(s));
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0];
      for (auto& v : x.grad_buffer()) v += go;
    });
  }
  return out;
}

template <class T>
BasicTensor<T> mean(Graph& g, const BasicTensor<T>& x) {
  return scale(g, sum(g, x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

// ---------------------------------------------------------------- convolution

/// Zero-padded 2-D cross-correlation. input [C,H,W] or [N,C,H,W],
/// weight [Co,C,k,k], bias [Co].
template <class T>
BasicTensor<T> conv2d(Graph& g, const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>& b, int stride, int pad) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("conv2d: input must be rank 3 or 4");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be rank 4");
  const bool batched = x.rank() == 4;
  const int N = batched ? x.dim(0) : 1;
  const int C = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  const int Co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C) {
    throw ShapeError("conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
  if (b.numel() != static_cast<std::size_t>(Co)) throw ShapeError("conv2d: bias length");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  if (k > H + 2 * pad || k > W + 2 * pad) throw ShapeError("conv2d: kernel larger than input");

  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const int HWo = Ho * Wo;
  const int CKK = C * k * k;
  const int cols = N * HWo;

  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(CKK) * cols, T(0));
  {
    T* cp = col->data();
    const T* xp = x.ptr();
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          T* row = cp + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
          for (int n = 0; n < N; ++n) {
            const T* plane = xp + (static_cast<std::size_t>(n) * C + c) * H * W;
            T* dst = row + static_cast<std::size_t>(n) * HWo;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ki;
              if (iy < 0 || iy >= H) continue;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox * stride - pad + kj;
                if (ix >= 0 && ix < W) dst[oy * Wo + ox] = plane[iy * W + ix];
              }
            }
          }
        }
      }
    }
  }

  detail::MatRM<T> tmp(Co, cols);
  tmp.noalias() = detail::CMapRM<T>(w.ptr(), Co, CKK) * detail::CMapRM<T>(col->data(), CKK, cols);

  Shape oshape = batched ? Shape{N, Co, Ho, Wo} : Shape{Co, Ho, Wo};
  BasicTensor<T> out(oshape);
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Co; ++co) {
      const T bias = b[co];
      const T* src = tmp.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * HWo;
      T* dst = out.ptr() + (static_cast<std::size_t>(n) * Co + co) * HWo;
      for (int p = 0; p < HWo; ++p) dst[p] = src[p] + bias;
    }
  }

  if (detail::wants_grad(g, x, w, b)) {
    out.set_requires_grad(true);
    g.record("conv2d", [x, w, b, out, col, N, C, H, W, Co, k, stride, pad, Ho, Wo, HWo, CKK,
                        cols]() mutable {
      if (!out.has_grad()) return;
      detail::MatRM<T> dtmp(Co, cols);
      const T* go = out.grad().data();
      for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
          const T* src = go + (static_cast<std::size_t>(n) * Co + co) * HWo;
          T* dst = dtmp.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * HWo;
          std::copy(src, src + HWo, dst);
        }
      }
      if (w.requires_grad()) {
        detail::MapRM<T>(w.grad_buffer().data(), Co, CKK).noalias() +=
            dtmp * detail::CMapRM<T>(col->data(), CKK, cols).transpose();
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (int co = 0; co < Co; ++co) gb[co] += dtmp.row(co).sum();
      }
      if (x.requires_grad()) {
        detail::MatRM<T> dcol(CKK, cols);
        dcol.noalias() = detail::CMapRM<T>(w.ptr(), Co, CKK).transpose() * dtmp;
        T* gx = x.grad_buffer().data();
        for (int c = 0; c < C; ++c) {
          for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
              const T* row = dcol.data() + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
              for (int n = 0; n < N; ++n) {
                T* plane = gx + (static_cast<std::size_t>(n) * C + c) * H * W;
                const T* src = row + static_cast<std::size_t>(n) * HWo;
                for (int oy = 0; oy < Ho; ++oy) {
                  const int iy = oy * stride - pad + ki;
                  if (iy < 0 || iy >= H) continue;
                  for (int ox = 0; ox < Wo; ++ox) {
                    const int ix = ox * stride - pad + kj;
                    if (ix >= 0 && ix < W) plane[iy * W + ix] += src[oy * Wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Max pooling; only k = stride = 2 on even spatial sizes is supported.
/// The gradient goes to the first maximum of each window in row-major order.
template <class T>
BasicTensor<T> maxpool2d(Graph& g, const BasicTensor<T>& x, int k, int stride) {
  if (k != 2 || stride != 2) throw ShapeError("maxpool2d: only k = stride = 2 is supported");
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("maxpool2d: input must be rank 3 or 4");
  const int H = x.dim(-2), W = x.dim(-1);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("maxpool2d: spatial size must be even");
  const std::size_t planes = x.numel() / (static_cast<std::size_t>(H) * W);
  const int Ho = H / 2, Wo = W / 2;
  Shape os = x.shape();
  os[os.size() - 2] = Ho;
  os[os.size() - 1] = Wo;
  BasicTensor<T> out(os);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * H * W;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        std::size_t best = static_cast<std::size_t>(2 * oy) * W + 2 * ox;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = static_cast<std::size_t>(2 * oy + dy) * W + 2 * ox + dx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = p * Ho * Wo + static_cast<std::size_t>(oy) * Wo + ox;
        out[o] = src[best];
        (*arg)[o] = p * H * W + best;
      }
    }
  }
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("maxpool2d", [x, out, arg]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      for (std::size_t o = 0; o < go.size(); ++o) gx[(*arg)[o]] += go[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------- batch norm

enum class Mode {
  Train,  // batch statistics, running statistics updated
  Eval,   // running statistics
  Adapt,  // batch statistics, running statistics updated (test-time adaptation)
};

/// Learnable affine parameters plus running statistics of one batch-norm layer.
template <class T>
struct BatchNorm {
  BasicTensor<T> gamma, beta;
  BasicTensor<T> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm make(int channels) {
    BatchNorm bn;
    bn.gamma = BasicTensor<T>::full({channels}, T(1));
    bn.gamma.set_requires_grad(true);
    bn.beta = BasicTensor<T>({channels}, true);
    bn.running_mean = BasicTensor<T>({channels});
    bn.running_var = BasicTensor<T>::full({channels}, T(1));
    return bn;
  }
};

/// Batch normalization over [N,C,H,W] (or [C,H,W] in eval mode).
template <class T>
BasicTensor<T> batchnorm2d(Graph& g, const BasicTensor<T>& x, BatchNorm<T>& bn, Mode mode) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("batchnorm2d: input must be rank 3 or 4");
  const int N = x.rank() == 4 ? x.dim(0) : 1;
  const int C = x.dim(-3);
  const std::size_t HW = static_cast<std::size_t>(x.dim(-2)) * x.dim(-1);
  if (bn.gamma.numel() != static_cast<std::size_t>(C)) throw ShapeError("batchnorm2d: channel count");
  const bool batch_stats = mode != Mode::Eval;
  if (batch_stats && N < 2) {
    throw ShapeError("batchnorm2d: batch size must be >= 2 in train/adapt mode");
  }

  const std::size_t m = static_cast<std::size_t>(N) * HW;
  std::vector<T> mu(C), inv_std(C);
  for (int c = 0; c < C; ++c) {
    if (batch_stats) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mean_c = s / static_cast<double>(m);
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mean_c;
          s2 += d * d;
        }
      }
      const double var_c = s2 / static_cast<double>(m);
      mu[c] = static_cast<T>(mean_c);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var_c + bn.eps));
      const double unbiased = m > 1 ? var_c * static_cast<double>(m) / static_cast<double>(m - 1) : var_c;
      bn.running_mean[c] = static_cast<T>((1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean_c);
      bn.running_var[c] = static_cast<T>((1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased);
    } else {
      mu[c] = bn.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(bn.running_var[c]) + bn.eps));
    }
  }

  BasicTensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T gm = bn.gamma[c], bt = bn.beta[c];
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (x[off + i] - mu[c]) * inv_std[c];
        (*xhat)[off + i] = h;
        out[off + i] = gm * h + bt;
      }
    }
  }

  BasicTensor<T> gamma = bn.gamma, beta = bn.beta;
  if (detail::wants_grad(g, x, gamma, beta)) {
    out.set_requires_grad(true);
    g.record("batchnorm2d", [x, gamma, beta, out, xhat, inv_std, N, C, HW, m, batch_stats]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            sum_dy[c] += go[off + i];
            sum_dy_xhat[c] += static_cast<double>(go[off + i]) * (*xhat)[off + i];
          }
        }
      }
      if (gamma.requires_grad()) {
        auto gg = gamma.grad_buffer();
        for (int c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
      }
      if (beta.requires_grad()) {
        auto gb = beta.grad_buffer();
        for (int c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
      }
      if (!x.requires_grad()) return;
      auto gx = x.grad_buffer();
      const double inv_m = 1.0 / static_cast<double>(m);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
          const double scale_c = static_cast<double>(gamma[c]) * inv_std[c];
          if (batch_stats) {
            const double a = sum_dy[c] * inv_m, bcoef = sum_dy_xhat[c] * inv_m;
            for (std::size_t i = 0; i < HW; ++i) {
              gx[off + i] += static_cast<T>(scale_c * (go[off + i] - a - (*xhat)[off + i] * bcoef));
            }
          } else {
            for (std::size_t i = 0; i < HW; ++i) gx[off + i] += static_cast<T>(scale_c * go[off + i]);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- pooling / linear

/// Spatial mean: [C,H,W] -> [C], [N,C,H,W] -> [N,C].
template <class T>
BasicTensor<T> global_avg_pool(Graph& g, const BasicTensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("global_avg_pool: input must be rank 3 or 4");
  const std::size_t HW = static_cast<std::size_t>(x.dim(-2)) * x.dim(-1);
  Shape os(x.shape().begin(), x.shape().end() - 2);
  BasicTensor<T> out(os);
  for (std::size_t p = 0; p < out.numel(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += x[p * HW + i];
    out[p] = static_cast<T>(s / static_cast<double>(HW));
  }
  if (detail::wants_grad(g, x)) {
    out.set_requires_grad(true);
    g.record("global_avg_pool", [x, out, HW]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.grad_buffer();
      auto go = out.grad();
      const T inv = static_cast<T>(1.0 / static_cast<double>(HW));
      for (std::size_t p = 0; p < go.size(); ++p) {
        const T v = go[p] * inv;
        for (std::size_t i = 0; i < HW; ++i) gx[p * HW + i] += v;
      }
    });
  }
  return out;
}

/// x [..., d], weight [n, d], bias [n] -> [..., n].
template <class T>
BasicTensor<T> linear(Graph& g, const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const int n = w.dim(0), d = w.dim(1);
  if (x.rank() < 1 || x.dim(-1) != d) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (b.numel() != static_cast<std::size_t>(n)) throw ShapeError("linear: bias length");
  const int rows = static_cast<int>(x.numel() / d);
  Shape os = x.shape();
  os.back() = n;
  BasicTensor<T> out(os);
  detail::MapRM<T> o(out.ptr(), rows, n);
  o.noalias() = detail::CMapRM<T>(x.ptr(), rows, d) * detail::CMapRM<T>(w.ptr(), n, d).transpose();
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < n; ++j) o(r, j) += b[j];
  }
  if (detail::wants_grad(g, x, w, b)) {
    out.set_requires_grad(true);
    g.record("linear", [x, w, b, out, rows, n, d]() mutable {
      if (!out.has_grad()) return;
      detail::CMapRM<T> go(out.grad().data(), rows, n);
      if (x.requires_grad()) {
        detail::MapRM<T>(x.grad_buffer().data(), rows, d).noalias() += go * detail::CMapRM<T>(w.ptr(), n, d);
      }
      if (w.requires_grad()) {
        detail::MapRM<T>(w.grad_buffer().data(), n, d).noalias() +=
            go.transpose() * detail::CMapRM<T>(x.ptr(), rows, d);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (int j = 0; j < n; ++j) gb[j] += go.col(j).sum();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- probabilistic

/// softmax(z / t) along the last axis, max-shifted.
template <class T>
BasicTensor<T> softmax(Graph& g, const BasicTensor<T>& z, T t) {
  if (!(t > T(0))) throw ShapeError("softmax: temperature must be positive");
  const auto [rows, n] = detail::rows_cols(z);
  BasicTensor<T> out(z.shape());
  std::vector<T> ls(n);
  for (int r = 0; r < rows; ++r) {
    detail::log_softmax_row(z.ptr() + static_cast<std::size_t>(r) * n, n, t, ls.data());
    for (int k = 0; k < n; ++k) out[static_cast<std::size_t>(r) * n + k] = std::exp(ls[k]);
  }
  if (detail::wants_grad(g, z)) {
    out.set_requires_grad(true);
    g.record("softmax", [z, out, rows, n, t]() mutable {
      if (!out.has_grad()) return;
      auto gz = z.grad_buffer();
      auto go = out.grad();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * n;
        double dot = 0.0;
        for (int k = 0; k < n; ++k) dot += static_cast<double>(go[off + k]) * out[off + k];
        for (int k = 0; k < n; ++k) {
          gz[off + k] += static_cast<T>(out[off + k] * (go[off + k] - dot) / t);
        }
      }
    });
  }
  return out;
}

/// Mean over rows of -log softmax(z)[label]. z is [n] or [..., n]; one label per row.
template <class T>
BasicTensor<T> cross_entropy(Graph& g, const BasicTensor<T>& z, std::span<const int> labels) {
  const auto [rows, n] = detail::rows_cols(z);
  if (labels.size() != static_cast<std::size_t>(rows)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= n) throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range");
  }
  auto ls = std::make_shared<std::vector<T>>(z.numel());
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    detail::log_softmax_row(z.ptr() + off, n, T(1), ls->data() + off);
    total -= (*ls)[off + labels[r]];
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / rows));
  if (detail::wants_grad(g, z)) {
    out.set_requires_grad(true);
    std::vector<int> ys(labels.begin(), labels.end());
    g.record("cross_entropy", [z, out, ls, ys, rows, n]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0] / static_cast<T>(rows);
      auto gz = z.grad_buffer();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * n;
        for (int k = 0; k < n; ++k) {
          gz[off + k] += go * (std::exp((*ls)[off + k]) - (k == ys[r] ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

/// Mean over rows of the Shannon entropy of softmax(z). Terms with p < 1e-12
/// contribute nothing to the value.
template <class T>
BasicTensor<T> shannon_entropy(Graph& g, const BasicTensor<T>& z) {
  const auto [rows, n] = detail::rows_cols(z);
  auto ls = std::make_shared<std::vector<T>>(z.numel());
  auto ent = std::make_shared<std::vector<T>>(rows);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    detail::log_softmax_row(z.ptr() + off, n, T(1), ls->data() + off);
    double h = 0.0;
    for (int k = 0; k < n; ++k) {
      const double p = std::exp(static_cast<double>((*ls)[off + k]));
      if (p >= 1e-12) h -= p * (*ls)[off + k];
    }
    (*ent)[r] = static_cast<T>(h);
    total += h;
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / rows));
  if (detail::wants_grad(g, z)) {
    out.set_requires_grad(true);
    g.record("shannon_entropy", [z, out, ls, ent, rows, n]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0] / static_cast<T>(rows);
      auto gz = z.grad_buffer();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * n;
        for (int k = 0; k < n; ++k) {
          const T lp = (*ls)[off + k];
          gz[off + k] -= go * std::exp(lp) * (lp + (*ent)[r]);
        }
      }
    });
  }
  return out;
}

/// Mean over rows of KL(softmax(zp/t) || softmax(zq/t)). Gradients reach both arguments.
template <class T>
BasicTensor<T> kl_temperature(Graph& g, const BasicTensor<T>& zp, const BasicTensor<T>& zq, T t) {
  if (!(t > T(0))) throw ShapeError("kl_temperature: temperature must be positive");
  detail::check_same_shape(zp, zq, "kl_temperature");
  const auto [rows, n] = detail::rows_cols(zp);
  auto lp = std::make_shared<std::vector<T>>(zp.numel());
  auto lq = std::make_shared<std::vector<T>>(zq.numel());
  auto kl = std::make_shared<std::vector<T>>(rows);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    detail::log_softmax_row(zp.ptr() + off, n, t, lp->data() + off);
    detail::log_softmax_row(zq.ptr() + off, n, t, lq->data() + off);
    double s = 0.0;
    for (int k = 0; k < n; ++k) {
      s += std::exp(static_cast<double>((*lp)[off + k])) * ((*lp)[off + k] - (*lq)[off + k]);
    }
    (*kl)[r] = static_cast<T>(s);
    total += s;
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / rows));
  if (detail::wants_grad(g, zp, zq)) {
    out.set_requires_grad(true);
    g.record("kl_temperature", [zp, zq, out, lp, lq, kl, rows, n, t]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0] / static_cast<T>(rows) / t;
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * n;
        for (int k = 0; k < n; ++k) {
          const T p = std::exp((*lp)[off + k]);
          const T q = std::exp((*lq)[off + k]);
          if (zp.requires_grad()) {
            zp.grad_buffer()[off + k] += go * p * ((*lp)[off + k] - (*lq)[off + k] - (*kl)[r]);
          }
          if (zq.requires_grad()) zq.grad_buffer()[off + k] += go * (q - p);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- cosine similarity

inline constexpr double kCosineClamp = 1e-8;

/// All-pairs cosine similarity: a [M,d], b [N,d] -> [M,N], with the
/// denominator clamped at 1e-8.
template <class T>
BasicTensor<T> cosine_matrix(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("cosine_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int M = a.dim(0), N = b.dim(0), d = a.dim(1);
  auto na = std::make_shared<std::vector<double>>(M);
  auto nb = std::make_shared<std::vector<double>>(N);
  for (int i = 0; i < M; ++i) {
    double s = 0.0;
    for (int k = 0; k < d; ++k) s += static_cast<double>(a[i * d + k]) * a[i * d + k];
    (*na)[i] = std::sqrt(s);
  }
  for (int j = 0; j < N; ++j) {
    double s = 0.0;
    for (int k = 0; k < d; ++k) s += static_cast<double>(b[j * d + k]) * b[j * d + k];
    (*nb)[j] = std::sqrt(s);
  }
  BasicTensor<T> out({M, N});
  auto dots = std::make_shared<std::vector<double>>(static_cast<std::size_t>(M) * N);
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += static_cast<double>(a[i * d + k]) * b[j * d + k];
      (*dots)[i * N + j] = s;
      out[i * N + j] = static_cast<T>(s / std::max((*na)[i] * (*nb)[j], kCosineClamp));
    }
  }
  if (detail::wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g.record("cosine_matrix", [a, b, out, na, nb, dots, M, N, d]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      for (int i = 0; i < M; ++i) {
        for (int j = 0; j < N; ++j) {
          const double gij = go[i * N + j];
          if (gij == 0.0) continue;
          const double den = (*na)[i] * (*nb)[j];
          const bool clamped = den <= kCosineClamp;
          const double inv = 1.0 / (clamped ? kCosineClamp : den);
          const double c = (*dots)[i * N + j] * inv;
          if (a.requires_grad()) {
            auto ga = a.grad_buffer();
            const double corr = clamped ? 0.0 : c / ((*na)[i] * (*na)[i]);
            for (int k = 0; k < d; ++k) {
              ga[i * d + k] += static_cast<T>(gij * (b[j * d + k] * inv - corr * a[i * d + k]));
            }
          }
          if (b.requires_grad()) {
            auto gb = b.grad_buffer();
            const double corr = clamped ? 0.0 : c / ((*nb)[j] * (*nb)[j]);
            for (int k = 0; k < d; ++k) {
              gb[j * d + k] += static_cast<T>(gij * (a[i * d + k] * inv - corr * b[j * d + k]));
            }
          }
        }
      }
    });
  }
  return out;
}

/// Row-wise cosine similarity of paired rows: a [M,d], b [M,d] -> [M].
template <class T>
BasicTensor<T> cosine_rows(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_same_shape(a, b, "cosine_rows");
  if (a.rank() != 2) throw ShapeError("cosine_rows: inputs must be rank 2");
  const int M = a.dim(0), d = a.dim(1);
  BasicTensor<T> out({M});
  auto stats = std::make_shared<std::vector<double>>(3 * static_cast<std::size_t>(M));  // |a|, |b|, a.b
  for (int i = 0; i < M; ++i) {
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (int k = 0; k < d; ++k) {
      const double x = a[i * d + k], y = b[i * d + k];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    (*stats)[3 * i] = std::sqrt(aa);
    (*stats)[3 * i + 1] = std::sqrt(bb);
    (*stats)[3 * i + 2] = ab;
    out[i] = static_cast<T>(ab / std::max(std::sqrt(aa) * std::sqrt(bb), kCosineClamp));
  }
  if (detail::wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g.record("cosine_rows", [a, b, out, stats, M, d]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      for (int i = 0; i < M; ++i) {
        const double na = (*stats)[3 * i], nb = (*stats)[3 * i + 1];
        const double den = na * nb;
        const bool clamped = den <= kCosineClamp;
        const double inv = 1.0 / (clamped ? kCosineClamp : den);
        const double c = (*stats)[3 * i + 2] * inv;
        const double gi = go[i];
        if (a.requires_grad()) {
          auto ga = a.grad_buffer();
          const double corr = clamped ? 0.0 : c / (na * na);
          for (int k = 0; k < d; ++k) ga[i * d + k] += static_cast<T>(gi * (b[i * d + k] * inv - corr * a[i * d + k]));
        }
        if (b.requires_grad()) {
          auto gb = b.grad_buffer();
          const double corr = clamped ? 0.0 : c / (nb * nb);
          for (int k = 0; k < d; ++k) gb[i * d + k] += static_cast<T>(gi * (a[i * d + k] * inv - corr * b[i * d + k]));
        }
      }
    });
  }
  return out;
}

/// Cosine similarity of two vectors [d] -> scalar.
template <class T>
BasicTensor<T> cosine_similarity(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 1 || b.rank() != 1) throw ShapeError("cosine_similarity: inputs must be vectors");
  const int d = a.dim(0);
  auto c = cosine_matrix(g, reshape(g, a, {1, d}), reshape(g, b, {1, d}));
  return reshape(g, c, Shape{});
}

// ---------------------------------------------------------------- pairing

/// out[i][j] = a[i] + b[j]; a, b are [bz, d], result is [bz, bz, d].
template <class T>
BasicTensor<T> pairwise_sum(Graph& g, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise_sum: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.dim(0) != b.dim(0)) throw ShapeError("pairwise_sum: batch length mismatch");
  const int bz = a.dim(0), d = a.dim(1);
  BasicTensor<T> out({bz, bz, d});
  for (int i = 0; i < bz; ++i) {
    for (int j = 0; j < bz; ++j) {
      for (int k = 0; k < d; ++k) out[(static_cast<std::size_t>(i) * bz + j) * d + k] = a[i * d + k] + b[j * d + k];
    }
  }
  if (detail::wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g.record("pairwise_sum", [a, b, out, bz, d]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      for (int i = 0; i < bz; ++i) {
        for (int j = 0; j < bz; ++j) {
          for (int k = 0; k < d; ++k) {
            const T v = go[(static_cast<std::size_t>(i) * bz + j) * d + k];
            if (a.requires_grad()) a.grad_buffer()[i * d + k] += v;
            if (b.requires_grad()) b.grad_buffer()[j * d + k] += v;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ccam
