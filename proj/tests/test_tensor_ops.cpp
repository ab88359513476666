#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ccam/ops.hpp"
#include "ccam/rng.hpp"

using namespace ccam;

namespace {

template <class T = float>
BasicTensor<T> randn(Shape s, Rng& rng, double sd = 1.0, bool rg = false) {
  BasicTensor<T> t(std::move(s), rg);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * sd);
  return t;
}

// Direct 7-loop convolution used as the reference.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N) * Co * Ho * Wo);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < Co; ++o)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          double s = b[o];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                s += static_cast<double>(w[((o * C + c) * k + ky) * k + kx]) * x[((n * C + c) * H + iy) * W + ix];
              }
          out[((static_cast<std::size_t>(n) * Co + o) * Ho + y) * Wo + xx] = s;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeValidation) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tensor, HandlesAliasAndCloneDetaches) {
  Tensor a({3});
  Tensor b = a;
  b[1] = 5.0f;
  EXPECT_EQ(a[1], 5.0f);
  Tensor c = a.clone();
  c[1] = 1.0f;
  EXPECT_EQ(a[1], 5.0f);
  EXPECT_FALSE(c.same_storage(a));
}

TEST(Graph, BackwardRequiresScalarAndRunsOnce) {
  Graph g;
  Tensor x({3}, {1.0f, 2.0f, 3.0f}, true);
  auto y = relu(g, x);
  EXPECT_THROW(g.backward(y), ShapeError);
  auto s = sum(g, y);
  g.backward(s);
  EXPECT_THROW(g.backward(s), std::logic_error);
  EXPECT_THROW(relu(g, x), std::logic_error);
}

TEST(Graph, InferenceGraphRecordsNothing) {
  Graph g = Graph::inference();
  Tensor x({3}, {1.0f, -2.0f, 3.0f}, true);
  auto y = sum(g, relu(g, x));
  EXPECT_EQ(g.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_FLOAT_EQ(y.item(), 4.0f);
}

TEST(Graph, ReverseOrderReplay) {
  Graph g;
  Tensor x({2}, {1.0f, -1.0f}, true);
  auto a = scale(g, x, 2.0f);
  auto b = relu(g, a);
  auto c = sum(g, b);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_STREQ(g.op_name(0), "scale");
  EXPECT_STREQ(g.op_name(2), "sum");
  g.backward(c);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 0.0f);
}

TEST(Ops, ElementwiseValues) {
  Graph g = Graph::inference();
  Tensor a({3}, {1.0f, -2.0f, 0.0f}), b({3}, {0.5f, 0.5f, 0.5f});
  auto s = add(g, a, b), d = sub(g, a, b), ab = abs(g, a), r = relu(g, a);
  EXPECT_FLOAT_EQ(s[1], -1.5f);
  EXPECT_FLOAT_EQ(d[0], 0.5f);
  EXPECT_FLOAT_EQ(ab[1], 2.0f);
  EXPECT_FLOAT_EQ(r[1], 0.0f);
  EXPECT_FLOAT_EQ(mean(g, a).item(), -1.0f / 3.0f);
  EXPECT_THROW(add(g, a, Tensor({2})), ShapeError);
}

TEST(Ops, AbsSubgradientAtZeroIsZero) {
  Graph g;
  Tensor x({3}, {0.0f, 2.0f, -1.0f}, true);
  g.backward(sum(g, abs(g, x)));
  EXPECT_EQ(x.grad()[0], 0.0f);
  EXPECT_EQ(x.grad()[1], 1.0f);
  EXPECT_EQ(x.grad()[2], -1.0f);
}

TEST(Ops, ConvMatchesNaiveLoops) {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const int N = 1 + trial % 3, C = 2 + trial % 2, Co = 3, H = 5 + trial, W = 6;
    const int k = trial % 2 ? 3 : 1, stride = 1 + trial % 2, pad = k / 2;
    auto x = randn({N, C, H, W}, rng), w = randn({Co, C, k, k}, rng), b = randn({Co}, rng);
    Graph g = Graph::inference();
    auto y = conv2d(g, x, w, b, stride, pad);
    const auto ref = naive_conv(x, w, b, stride, pad);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-4) << "trial " << trial;
  }
}

TEST(Ops, ConvUnbatchedEqualsBatchOfOne) {
  Rng rng(3);
  auto x = randn({2, 6, 6}, rng), w = randn({4, 2, 3, 3}, rng), b = randn({4}, rng);
  Graph g = Graph::inference();
  auto y3 = conv2d(g, x, w, b, 1, 1);
  auto y4 = conv2d(g, reshape(g, x, {1, 2, 6, 6}), w, b, 1, 1);
  EXPECT_EQ(y3.shape(), (Shape{4, 6, 6}));
  for (std::size_t i = 0; i < y3.numel(); ++i) EXPECT_EQ(y3[i], y4[i]);
}

TEST(Ops, ConvRejectsBadShapes) {
  Graph g = Graph::inference();
  Tensor x({1, 3, 4, 4}), w({2, 2, 3, 3}), b({2});
  EXPECT_THROW(conv2d(g, x, w, b, 1, 1), ShapeError);
  Tensor w5({2, 3, 5, 5});
  EXPECT_THROW(conv2d(g, x, w5, b, 1, 0), ShapeError);
  Tensor w3({2, 3, 3, 3});
  EXPECT_THROW(conv2d(g, x, w3, b, 0, 1), ShapeError);
}

TEST(Ops, MaxPoolTakesWindowMaxAndRoutesGradToFirstMax) {
  Graph g;
  Tensor x({1, 1, 2, 4}, {1, 3, 3, 0, 2, 3, -1, -2}, true);
  auto y = maxpool2d(g, x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y[0], 3.0f);
  EXPECT_EQ(y[1], 3.0f);
  g.backward(sum(g, y));
  const std::vector<float> expect{0, 1, 1, 0, 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(x.grad()[i], expect[i]) << i;
}

TEST(Ops, MaxPoolRejectsOddInput) {
  Graph g = Graph::inference();
  EXPECT_THROW(maxpool2d(g, Tensor({1, 3, 3}), 2, 2), ShapeError);
}

TEST(Ops, BatchNormTrainUsesBatchStatisticsAndUpdatesRunning) {
  Rng rng(5);
  auto x = randn({4, 2, 3, 3}, rng, 2.0);
  auto bn = BatchNorm<float>::make(2);
  bn.gamma[1] = 2.0f;
  bn.beta[0] = 0.5f;
  Graph g = Graph::inference();
  auto y = batchnorm2d(g, x, bn, Mode::Train);
  for (int c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    const int m = 4 * 9;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) s += x[(n * 2 + c) * 9 + i];
    const double mu = s / m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) s2 += std::pow(x[(n * 2 + c) * 9 + i] - mu, 2);
    const double var = s2 / m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) {
        const double ref = bn.gamma[c] * (x[(n * 2 + c) * 9 + i] - mu) / std::sqrt(var + 1e-5) + bn.beta[c];
        EXPECT_NEAR(y[(n * 2 + c) * 9 + i], ref, 1e-4);
      }
    EXPECT_NEAR(bn.running_mean[c], 0.1 * mu, 1e-5);
    EXPECT_NEAR(bn.running_var[c], 0.9 + 0.1 * var * m / (m - 1), 1e-5);
  }
}

TEST(Ops, BatchNormEvalUsesRunningStatisticsAndRejectsSingletonTrainBatch) {
  auto bn = BatchNorm<float>::make(1);
  bn.running_mean[0] = 1.0f;
  bn.running_var[0] = 4.0f;
  Graph g = Graph::inference();
  Tensor x({1, 1, 1, 2}, {3.0f, -1.0f});
  auto y = batchnorm2d(g, x, bn, Mode::Eval);
  EXPECT_NEAR(y[0], 2.0 / std::sqrt(4.0 + 1e-5), 1e-6);
  EXPECT_NEAR(y[1], -2.0 / std::sqrt(4.0 + 1e-5), 1e-6);
  EXPECT_THROW(batchnorm2d(g, x, bn, Mode::Train), ShapeError);
  EXPECT_THROW(batchnorm2d(g, x, bn, Mode::Adapt), ShapeError);
}

TEST(Ops, GlobalAvgPoolMatchesMean) {
  Rng rng(2);
  auto x = randn({2, 3, 4, 5}, rng);
  Graph g = Graph::inference();
  auto y = global_avg_pool(g, x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (int p = 0; p < 6; ++p) {
    double s = 0;
    for (int i = 0; i < 20; ++i) s += x[p * 20 + i];
    EXPECT_NEAR(y[p], s / 20, 1e-6);
  }
}

TEST(Ops, LinearMatchesDotProducts) {
  Rng rng(9);
  auto x = randn({3, 2, 5}, rng), w = randn({4, 5}, rng), b = randn({4}, rng);
  Graph g = Graph::inference();
  auto y = linear(g, x, w, b);
  ASSERT_EQ(y.shape(), (Shape{3, 2, 4}));
  for (int r = 0; r < 6; ++r)
    for (int j = 0; j < 4; ++j) {
      double s = b[j];
      for (int k = 0; k < 5; ++k) s += static_cast<double>(x[r * 5 + k]) * w[j * 5 + k];
      EXPECT_NEAR(y[r * 4 + j], s, 1e-5);
    }
}

TEST(Ops, SoftmaxRowsSumToOneAndAreShiftInvariant) {
  Graph g = Graph::inference();
  Tensor z({2, 3}, {1.0f, 2.0f, 3.0f, 101.0f, 102.0f, 103.0f});
  auto p = softmax(g, z, 1.0f);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p[k], p[3 + k], 1e-6);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-6);
  auto pt = softmax(g, z, 1e6f);
  EXPECT_NEAR(pt[0], 1.0 / 3, 1e-4);
  EXPECT_THROW(softmax(g, z, 0.0f), ShapeError);
}

TEST(Ops, CrossEntropyEntropyAndKlClosedForms) {
  Graph g = Graph::inference();
  Tensor z({2, 4});  // uniform rows
  const std::vector<int> y{0, 3};
  EXPECT_NEAR(cross_entropy(g, z, y).item(), std::log(4.0), 1e-6);
  EXPECT_NEAR(shannon_entropy(g, z).item(), std::log(4.0), 1e-6);
  EXPECT_NEAR(kl_temperature(g, z, z, 15.0f).item(), 0.0, 1e-7);
  const std::vector<int> bad{0, 4};
  EXPECT_THROW(cross_entropy(g, z, bad), ShapeError);

  Tensor a({1, 2}, {std::log(3.0f), 0.0f}), b({1, 2});
  // p = (3/4, 1/4), q = (1/2, 1/2)
  const double kl = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(kl_temperature(g, a, b, 1.0f).item(), kl, 1e-6);
}

TEST(Ops, CosineValuesAndClamp) {
  Graph g = Graph::inference();
  Tensor a({2, 2}, {1, 0, 0, 0}), b({2, 2}, {2, 0, 1, 1});
  auto c = cosine_matrix(g, a, b);
  EXPECT_NEAR(c[0], 1.0, 1e-6);
  EXPECT_NEAR(c[1], std::sqrt(0.5), 1e-6);
  EXPECT_EQ(c[2], 0.0f);  // zero vector: clamped denominator
  auto r = cosine_rows(g, a, b);
  EXPECT_NEAR(r[0], 1.0, 1e-6);
  EXPECT_EQ(r[1], 0.0f);
  EXPECT_NEAR(cosine_similarity(g, Tensor({2}, {1, 1}), Tensor({2}, {-1, -1})).item(), -1.0, 1e-6);
}

TEST(Ops, PairwiseSum) {
  Graph g = Graph::inference();
  Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {10, 20, 30, 40});
  auto s = pairwise_sum(g, a, b);
  ASSERT_EQ(s.shape(), (Shape{2, 2, 2}));
  const std::vector<float> expect{11, 22, 31, 42, 13, 24, 33, 44};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(s[i], expect[i]);
  EXPECT_THROW(pairwise_sum(g, a, Tensor({3, 2})), ShapeError);
}
