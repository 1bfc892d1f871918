#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ttdg;
using ttdg::testkit::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

void expect_grad_ok(const GraphFn& fn, const std::vector<Tensor>& inputs, double tol = kGradTol) {
  const auto rep = gradient_check(fn, inputs);
  EXPECT_LE(rep.max_error, tol) << "input " << rep.worst_input << " index " << rep.worst_index;
  EXPECT_GT(rep.checked, 0u);
}

Tensor positive(const Shape& s, std::mt19937_64& rng) { return random_tensor(s, rng, 0.5, 2.0); }

}  // namespace

TEST(Tensor, RejectsValueCountMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_EQ(Tensor().size(), 1u);
  EXPECT_EQ(Tensor({2, 0}).size(), 0u);
}

TEST(Autodiff, BroadcastAddMatchesLoops) {
  std::mt19937_64 rng(1);
  Graph g;
  const Tensor a = random_tensor({3, 1, 4}, rng), b = random_tensor({2, 1}, rng);
  const Tensor out = add(g.constant(a), g.constant(b)).value();
  ASSERT_EQ(out.shape, (Shape{3, 2, 4}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        EXPECT_EQ(out[(i * 2 + j) * 4 + k], a[i * 4 + k] + b[j]);
}

TEST(Autodiff, IncompatibleBroadcastThrows) {
  Graph g;
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({4}))), ShapeError);
}

TEST(Autodiff, ElementwiseGradients) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
  const Tensor p = positive({3, 4}, rng);
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(mul(add(x[0], x[1]), x[0])); },
                 {a, b});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(sub(x[1], x[0])); }, {a, b});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(div(x[1], x[0])); }, {p, b});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(exp(x[0])); }, {a});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(log(x[0])); }, {p});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(sqrt(x[0])); }, {p});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(softplus(x[0])); }, {a});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(square(scale(x[0], 3.0))); },
                 {a});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(abs(x[0])); }, {p});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(relu(add_scalar(x[0], -1.0))); },
                 {p});
}

TEST(Autodiff, ReductionAndShapeGradients) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor w = random_tensor({2, 3, 4}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_grad_ok(
        [axis, w](Graph& g, std::span<const Var> x) {
          return sum(mul(sum_axis(x[0], axis), sum_axis(g.constant(w), axis)));
        },
        {a});
    expect_grad_ok(
        [axis](Graph&, std::span<const Var> x) { return sum(square(mean_axis(x[0], axis))); },
        {a});
  }
  expect_grad_ok(
      [w](Graph& g, std::span<const Var> x) {
        return sum(mul(reshape(x[0], {6, 4}), reshape(g.constant(w), {6, 4})));
      },
      {a});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return mean(square(x[0])); }, {a});
}

TEST(Autodiff, MatmulAndTranspose) {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
  Graph g;
  const Tensor out = matmul(g.constant(a), g.constant(b)).value();
  EXPECT_LE(testkit::max_abs_diff(out.data, oracle::matmul(a.data, b.data, 3, 5, 2)), 1e-14);
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(square(matmul(x[0], x[1]))); },
                 {a, b});
  expect_grad_ok(
      [](Graph&, std::span<const Var> x) { return sum(square(matmul(transpose(x[0]), x[0]))); },
      {a});
  EXPECT_THROW(matmul(g.constant(a), g.constant(a)), ShapeError);
}

TEST(Autodiff, SoftmaxFamily) {
  Graph g;
  const Tensor s = softmax(g.constant(Tensor({2}, {2.0, 0.0}))).value();
  EXPECT_NEAR(s[0], 0.8807970779778825, 1e-15);
  EXPECT_NEAR(s[1], 0.11920292202211757, 1e-15);
  const Tensor ls = log_softmax(g.constant(Tensor({2}, {0.0, 0.0}))).value();
  EXPECT_NEAR(ls[0], -0.6931471805599453, 1e-15);
  // Large logits must not overflow.
  const Tensor big = softmax(g.constant(Tensor({2}, {1000.0, 999.0}))).value();
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0] + big[1], 1.0, 1e-15);

  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({3, 4}, rng, -3, 3), w = random_tensor({3, 4}, rng);
  expect_grad_ok(
      [w](Graph& g2, std::span<const Var> x) { return sum(mul(softmax(x[0]), g2.constant(w))); },
      {a});
  expect_grad_ok(
      [w](Graph& g2, std::span<const Var> x) {
        return sum(mul(log_softmax(x[0]), g2.constant(w)));
      },
      {a});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(logsumexp(x[0])); }, {a});
}

TEST(Autodiff, CosineFamily) {
  std::mt19937_64 rng(6);
  const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({4, 5}, rng);
  Graph g;
  const Tensor cm = cosine_matrix(g.constant(a), g.constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(cm[i * 4 + j], oracle::cosine(&a.data[i * 5], &b.data[j * 5], 5), 1e-14);
  // cos(u, u) is exactly representable as 1 up to rounding.
  const Tensor self = cosine(g.constant(a), g.constant(a)).value();
  for (double v : self.data) EXPECT_NEAR(v, 1.0, 1e-15);
  // Zero rows are guarded.
  const Tensor z = cosine_matrix(g.constant(Tensor({1, 5})), g.constant(b)).value();
  for (double v : z.data) EXPECT_EQ(v, 0.0);

  const Tensor w = random_tensor({3, 4}, rng);
  expect_grad_ok(
      [w](Graph& g2, std::span<const Var> x) {
        return sum(mul(cosine_matrix(x[0], x[1]), g2.constant(w)));
      },
      {a, b});
  expect_grad_ok([](Graph&, std::span<const Var> x) { return sum(square(normalize(x[0]))); },
                 {a});
}

TEST(Autodiff, Conv2dMatchesNaive) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = random_tensor({4}, rng);
  Graph g;
  const Tensor out = conv2d(g.constant(x), g.constant(w), g.constant(b)).value();
  EXPECT_LE(testkit::max_abs_diff(out.data, oracle::conv2d(x.data, w.data, b.data, 2, 3, 5, 4, 4, 3)),
            1e-13);
  const Tensor w1 = random_tensor({2, 3, 1, 1}, rng), b1 = random_tensor({2}, rng);
  const Tensor out1 = conv2d(g.constant(x), g.constant(w1), g.constant(b1)).value();
  EXPECT_LE(
      testkit::max_abs_diff(out1.data, oracle::conv2d(x.data, w1.data, b1.data, 2, 3, 5, 4, 2, 1)),
      1e-13);
}

TEST(Autodiff, Conv2dAndPoolGradients) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({2, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng), c = random_tensor({2, 3, 2, 2}, rng);
  expect_grad_ok(
      [c](Graph& g, std::span<const Var> v) {
        return sum(mul(avg_pool2(conv2d(v[0], v[1], v[2])), g.constant(c)));
      },
      {x, w, b});
  EXPECT_THROW(
      {
        Graph g;
        avg_pool2(g.constant(Tensor({1, 1, 3, 4})));
      },
      ShapeError);
}

TEST(Autodiff, InferenceGraphRefusesBackward) {
  Graph g(Mode::kInference);
  const Var x = g.input(Tensor::scalar(2.0));
  const Var y = square(x);
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
  EXPECT_THROW(g.backward(y), Error);
}

TEST(Autodiff, NonScalarBackwardNeedsCotangent) {
  Graph g;
  const Var x = g.input(Tensor({2}, {1.0, 2.0}));
  const Var y = square(x);
  EXPECT_THROW(g.backward(y), ShapeError);
  g.backward(y, Tensor({2}, {1.0, 1.0}));
  EXPECT_EQ(g.grad(x).data, (std::vector<double>{2.0, 4.0}));
}

TEST(Autodiff, LeafGradientsAccumulateUntilCleared) {
  Graph g;
  const Var x = g.input(Tensor::scalar(3.0));
  const Var y = square(x);
  g.backward(y);
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 12.0);
  g.zero_grad();
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 6.0);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Graph g;
  const Var x = g.input(Tensor::scalar(3.0));
  const Var c = g.constant(Tensor::scalar(5.0));
  g.backward(mul(x, c));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(g.grad(c).item(), 0.0);
}

TEST(Autodiff, MixingGraphsThrows) {
  Graph a, b;
  EXPECT_THROW(add(a.constant(Tensor::scalar(1)), b.constant(Tensor::scalar(1))), Error);
}

TEST(Autodiff, ScalarHelpers) {
  EXPECT_NEAR(softplus_inverse(1.0), 0.541324854612918, 1e-15);
  EXPECT_NEAR(softplus(softplus_inverse(0.3)), 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(softplus(100.0), 100.0);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
}
