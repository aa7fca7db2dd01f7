#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace hknas;

namespace {

std::mt19937_64 rng(11);

Tensor project(Tape& t, const Tensor& y, const Tensor& r) { return dot(t, y, r); }

template <class Fn>
void expect_gradients(Fn&& op, std::vector<Tensor> params, double tol = 1e-6) {
  Tape probe(false);
  Tensor r = oracle::random_tensor(op(probe).shape(), rng);
  const auto res = oracle::grad_check([&](Tape& t) { return project(t, op(t), r); }, params, rng, 25);
  EXPECT_LT(res.max_rel, tol);
}

}  // namespace

TEST(Ops, AddReluElementwise) {
  Tape t(false);
  Tensor a(Shape{3}, std::vector<double>{1, -2, 3}), b(Shape{3}, std::vector<double>{-4, 1, 0.5});
  Tensor s = add(t, a, b);
  EXPECT_EQ(s.values(), (std::vector<double>{-3, -1, 3.5}));
  EXPECT_EQ(relu(t, s).values(), (std::vector<double>{0, 0, 3.5}));
  EXPECT_THROW(add(t, a, Tensor(Shape{2})), ShapeError);
}

TEST(Ops, ReshapeKeepsOrder) {
  Tape t(false);
  Tensor a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor b = reshape(t, a, Shape{3, 2});
  EXPECT_EQ(b.values(), a.values());
  EXPECT_THROW(reshape(t, a, Shape{4}), ShapeError);
}

TEST(Ops, LinearMatchesHandProduct) {
  Tape t(false);
  Tensor x(Shape{1, 2}, std::vector<double>{1, 2});
  Tensor w(Shape{2, 2}, std::vector<double>{1, 0, 3, -1});
  Tensor b(Shape{2}, std::vector<double>{0.5, 0});
  EXPECT_EQ(linear(t, x, w, b).values(), (std::vector<double>{1.5, 1}));
}

TEST(Ops, PoolOddExtentZeroPadsPartialWindow) {
  Tape t(false);
  Tensor x(Shape{1, 1, 3}, std::vector<double>{1, 3, 5});
  EXPECT_EQ(pool_avg(t, x, 2, 1).values(), (std::vector<double>{2, 2.5}));
}

TEST(Ops, Pool2dMatchesWindowMeans) {
  Tape t(false);
  Tensor x = oracle::random_tensor({2, 3, 5, 4}, rng);
  Tensor y = pool_avg(t, x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 3, 2}));
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0;
        for (std::size_t a = 2 * i; a < std::min<std::size_t>(2 * i + 2, 5); ++a)
          for (std::size_t b = 2 * j; b < 2 * j + 2; ++b) acc += x[p * 20 + a * 4 + b];
        EXPECT_NEAR(y[p * 6 + i * 2 + j], acc / 4, 1e-15);
      }
}

TEST(Ops, GlobalAverageKeepsUnitAxes) {
  Tape t(false);
  Tensor x(Shape{1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 10, 10, 10, 10});
  Tensor y = global_avg(t, x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_EQ(y.values(), (std::vector<double>{2.5, 10}));
}

TEST(Ops, BilinearCornerAligned) {
  Tape t(false);
  Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  Tensor y = upsample_bilinear(t, x, 3, 3);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3}));
  // identity when sizes match
  Tensor z = oracle::random_tensor({1, 2, 4, 3}, rng);
  EXPECT_EQ(upsample_bilinear(t, z, 4, 3).values(), z.values());
}

TEST(Ops, SoftmaxSumsToOneAndIsShiftInvariant) {
  Tape t(false);
  Tensor a(Shape{4}, std::vector<double>{1, 2, 3, 1000});
  Tensor p = softmax(t, a);
  double s = 0;
  for (double v : p.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  Tensor b(Shape{3}, std::vector<double>{0.1, 0.2, 0.3});
  const auto ref = oracle::softmax({0.1, 0.2, 0.3});
  Tensor q = softmax(t, b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(q[i], ref[i], 1e-15);
}

TEST(Ops, CrossEntropyMatchesFormula) {
  Tape t(false);
  Tensor l(Shape{2, 3}, std::vector<double>{1, 2, 3, 0, 0, 0});
  std::vector<std::size_t> y{2, 0};
  const double e0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double e1 = std::log(3.0);
  EXPECT_NEAR(cross_entropy(t, l, y).item(), (e0 + e1) / 2, 1e-14);
  std::vector<std::size_t> bad{3, 0};
  EXPECT_THROW(cross_entropy(t, l, bad), std::out_of_range);
}

TEST(Ops, GatherPixels) {
  Tape t(false);
  Tensor x = oracle::random_tensor({1, 3, 4, 5}, rng);
  std::vector<std::pair<std::size_t, std::size_t>> px{{0, 0}, {3, 4}, {1, 2}};
  Tensor g = gather_pixels(t, x, px);
  ASSERT_EQ(g.shape(), (Shape{3, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(g[i * 3 + c], x[c * 20 + px[i].first * 5 + px[i].second]);
}

TEST(Ops, BatchNormTrainingMatchesManualStats) {
  Tape t(false);
  Tensor x = oracle::random_tensor({3, 2, 4}, rng);
  Tensor gamma(Shape{2}, std::vector<double>{2, 0.5}), beta(Shape{2}, std::vector<double>{1, -1});
  NormState st(2);
  NormSpec spec{NormMode::batch, 1};
  Tensor y = normalize(t, x, spec, gamma, beta, &st, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t j = 0; j < 4; ++j) m += x[(n * 2 + c) * 4 + j];
    m /= 12;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t j = 0; j < 4; ++j) v += std::pow(x[(n * 2 + c) * 4 + j] - m, 2);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t j = 0; j < 4; ++j) {
        const double want = gamma[c] * (x[(n * 2 + c) * 4 + j] - m) / std::sqrt(v / 12 + 1e-5) + beta[c];
        EXPECT_NEAR(y[(n * 2 + c) * 4 + j], want, 1e-12);
      }
    EXPECT_NEAR(st.running_mean[c], 0.1 * m, 1e-14);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * v / 11, 1e-14);
  }
  // inference uses the running statistics
  Tensor z = normalize(t, x, spec, gamma, beta, &st, false);
  EXPECT_NEAR(z[0], gamma[0] * (x[0] - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5) + beta[0], 1e-12);
}

TEST(Ops, GroupNormPerSampleGroups) {
  Tape t(false);
  Tensor x = oracle::random_tensor({2, 4, 3}, rng);
  Tensor gamma(Shape{4}, 1.0), beta(Shape{4}, 0.0);
  Tensor y = normalize(t, x, NormSpec{NormMode::group, 2}, gamma, beta, nullptr, true);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t g = 0; g < 2; ++g) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < 6; ++i) m += y[n * 12 + g * 6 + i];
      for (std::size_t i = 0; i < 6; ++i) v += y[n * 12 + g * 6 + i] * y[n * 12 + g * 6 + i];
      EXPECT_NEAR(m / 6, 0.0, 1e-12);
      EXPECT_NEAR(v / 6, 1.0, 1e-3);
    }
  EXPECT_THROW(normalize(t, x, NormSpec{NormMode::group, 3}, gamma, beta, nullptr, true), ShapeError);
}

TEST(OpsGradients, Elementwise) {
  Tensor a = oracle::random_tensor({2, 3}, rng), b = oracle::random_tensor({2, 3}, rng);
  expect_gradients([&](Tape& t) { return relu(t, add(t, a, b)); }, {a, b});
  expect_gradients([&](Tape& t) { return reshape(t, a, Shape{3, 2}); }, {a});
}

TEST(OpsGradients, LinearAndBias) {
  Tensor x = oracle::random_tensor({3, 4}, rng), w = oracle::random_tensor({2, 4}, rng), b = oracle::random_tensor({2}, rng);
  expect_gradients([&](Tape& t) { return linear(t, x, w, b); }, {x, w, b});
  Tensor y = oracle::random_tensor({2, 3, 5}, rng), c = oracle::random_tensor({3}, rng);
  expect_gradients([&](Tape& t) { return add_channel_bias(t, y, c); }, {y, c});
}

TEST(OpsGradients, PoolingAndUpsampling) {
  Tensor x = oracle::random_tensor({2, 2, 5, 3}, rng);
  expect_gradients([&](Tape& t) { return pool_avg(t, x, 2, 2); }, {x});
  expect_gradients([&](Tape& t) { return global_avg(t, x, 2); }, {x});
  expect_gradients([&](Tape& t) { return upsample_bilinear(t, x, 9, 7); }, {x});
  Tensor s = oracle::random_tensor({1, 3, 7}, rng);
  expect_gradients([&](Tape& t) { return pool_avg(t, s, 2, 1); }, {s});
}

TEST(OpsGradients, SoftmaxCrossEntropyGather) {
  Tensor a = oracle::random_tensor({5}, rng);
  expect_gradients([&](Tape& t) { return softmax(t, a); }, {a});
  Tensor l = oracle::random_tensor({4, 3}, rng);
  std::vector<std::size_t> y{0, 2, 1, 1};
  const auto res = oracle::grad_check([&](Tape& t) { return cross_entropy(t, l, y); }, {l}, rng, 12);
  EXPECT_LT(res.max_rel, 1e-6);
  Tensor m = oracle::random_tensor({1, 2, 3, 3}, rng);
  std::vector<std::pair<std::size_t, std::size_t>> px{{0, 1}, {2, 2}, {0, 1}};
  expect_gradients([&](Tape& t) { return gather_pixels(t, m, px); }, {m});
}

TEST(OpsGradients, Normalization) {
  Tensor x = oracle::random_tensor({3, 4, 5}, rng);
  Tensor gamma = oracle::random_tensor({4}, rng, 0.5, 1.5), beta = oracle::random_tensor({4}, rng);
  NormState st(4);
  expect_gradients([&](Tape& t) { return normalize(t, x, NormSpec{NormMode::batch, 1}, gamma, beta, &st, true); }, {x, gamma, beta});
  expect_gradients([&](Tape& t) { return normalize(t, x, NormSpec{NormMode::group, 2}, gamma, beta, nullptr, true); }, {x, gamma, beta});
  expect_gradients([&](Tape& t) { return normalize(t, x, NormSpec{NormMode::batch, 1}, gamma, beta, &st, false); }, {x, gamma, beta});
}
