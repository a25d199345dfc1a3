#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "graph_gen.hpp"
#include "metaforge/autograd.hpp"
#include "test_util.hpp"

using namespace metaforge;
using namespace metaforge::ag;
using metaforge::testing::rel_err;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(TensorOf, IdentityEmptyAndMismatch) {
  const Tensor eye = tensor_of({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(eye.shape(), (Shape{2, 2}));
  EXPECT_EQ(eye[0], 1.0);
  EXPECT_EQ(eye[1], 0.0);
  EXPECT_FALSE(eye.requires_grad());

  const Tensor empty = tensor_of({0}, {});
  EXPECT_EQ(empty.numel(), 0u);

  EXPECT_THROW(tensor_of({2}, {1, 2, 3}), ShapeError);
}

TEST(TensorOf, RequiresGradNeedsActiveTape) {
  EXPECT_THROW(tensor_of({1}, {1.0}, true), GradError);
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor t = tensor_of({1}, {1.0}, true);
  EXPECT_TRUE(t.requires_grad());
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Apply, HandArithmetic) {
  const Tensor m = matmul(tensor_of({2, 2}, {1, 2, 3, 4}), tensor_of({2, 1}, {1, 1}));
  EXPECT_EQ(m.shape(), (Shape{2, 1}));
  EXPECT_EQ(m[0], 3.0);
  EXPECT_EQ(m[1], 7.0);

  EXPECT_EQ(ag::tanh(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(mean(tensor_of({4}, {1, 2, 3, 4})).item(), 2.5);

  const Tensor args[] = {tensor_of({2}, {1, 2}), tensor_of({2}, {3, 5})};
  EXPECT_EQ(apply(Op::mul, args)[1], 10.0);
}

TEST(Apply, ShapeErrorNamesOpAndShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(index_rows(Tensor::zeros({2, 3}), {5}), ShapeError);
  EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
}

TEST(Apply, GatherScatterBroadcast) {
  const Tensor x = tensor_of({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor g = index_rows(x, {2, 0, 2});
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()),
            (std::vector<double>{5, 6, 1, 2, 5, 6}));
  const Tensor s = scatter_rows(g, {1, 1, 0}, 2);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()),
            (std::vector<double>{5, 6, 6, 8}));
  const Tensor b = broadcast(tensor_of({2}, {1, 2}), 3);
  EXPECT_EQ(b.shape(), (Shape{3, 2}));
  EXPECT_EQ(sum_leading(b)[1], 6.0);
}

TEST(Backward, SquareAndThirdPower) {
  Tape tape;
  const Tensor theta = tape.leaf(Tensor::scalar(3.0));
  EXPECT_EQ(backward(square(theta), theta).item(), 6.0);

  const Tensor t2 = tape.leaf(Tensor::scalar(2.0));
  const Tensor cube = mul(mul(t2, t2), t2);
  const Tensor g = backward(cube, t2, {.create_graph = true});
  EXPECT_TRUE(g.requires_grad());
  EXPECT_DOUBLE_EQ(g.item(), 12.0);
  EXPECT_DOUBLE_EQ(backward(g, t2).item(), 12.0);
}

TEST(Backward, LinearModelMseMatchesFiniteDifferences) {
  const Tensor x = tensor_of({3, 1}, {0.5, -1.0, 2.0});
  const Tensor y = tensor_of({3, 1}, {1.0, 0.0, -2.0});
  auto loss = [&](const Tensor& w) {
    // w = [slope, intercept]
    const Tensor slope = reshape(index_rows(w, {0}), {1, 1});
    const Tensor bias = reshape(index_rows(w, {1}), {1});
    const Tensor pred = add(matmul(x, slope), broadcast(bias, 3));
    return mean(square(sub(pred, y)));
  };
  const Tensor w0 = tensor_of({2}, {0.3, -0.7});
  Tape tape;
  const Tensor w = tape.leaf(w0);
  const Tensor g = backward(loss(w), w);
  const Tensor fd = finite_diff([&](const Tensor& p) { return loss(p).item(); }, w0, 1e-5);
  EXPECT_LE(rel_err(g, fd, 1e-12), 1e-7);
}

TEST(FiniteDiff, Examples) {
  const Tensor q = finite_diff([](const Tensor& t) { return t[0] * t[0]; },
                               Tensor::scalar(3.0), 1e-5);
  EXPECT_NEAR(q.item(), 6.0, 1e-9);

  const Tensor th = finite_diff([](const Tensor& t) { return sum(ag::tanh(t)).item(); },
                                tensor_of({2}, {0.0, 1.0}), 1e-5);
  // sech^2(1), computed independently of the implementation under test.
  const double sech1 = 1.0 / std::cosh(1.0);
  EXPECT_NEAR(th[0], 1.0, 1e-6);
  EXPECT_NEAR(th[1], sech1 * sech1, 1e-6);
  EXPECT_NEAR(th[1], 0.41997, 1e-5);

  const Tensor c = finite_diff([](const Tensor&) { return 4.0; }, tensor_of({3}, {1, 2, 3}),
                               1e-5);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RandomGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto recipe = metaforge::testing::random_recipe(rng);
    std::vector<Tensor> values;
    for (const auto& s : recipe.leaf_shapes)
      values.emplace_back(s, random_values(rng, numel(s)));

    Tape tape;
    std::vector<Tensor> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v));
    const auto grads =
        backward(metaforge::testing::replay(recipe, leaves), leaves, {.allow_unused = true});

    for (std::size_t i = 0; i < values.size(); ++i) {
      auto f = [&](const Tensor& probe) {
        auto vs = values;
        vs[i] = probe;
        return metaforge::testing::replay(recipe, vs).item();
      };
      const Tensor fd = finite_diff(f, values[i], 1e-5);
      EXPECT_LE(rel_err(grads[i], fd), 1e-6) << "trial " << trial << " leaf " << i;
    }
  }
}

TEST(Backward, HessianVectorProductOnQuadratic) {
  std::mt19937_64 rng(7);
  for (std::size_t d = 1; d <= 8; ++d) {
    const auto a = random_values(rng, d * d);
    std::vector<double> h(d * d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) h[i * d + j] = a[i * d + j] + a[j * d + i];
    const Tensor hm({d, d}, h);
    const Tensor v({d, 1}, random_values(rng, d));

    Tape tape;
    const Tensor theta = tape.leaf(Tensor({d, 1}, random_values(rng, d)));
    const Tensor f = scale(sum(matmul(transpose(theta), matmul(hm, theta))), 0.5);
    const Tensor g = backward(f, theta, {.create_graph = true});
    const Tensor hv = backward(sum(mul(g, v)), theta);

    for (std::size_t i = 0; i < d; ++i) {
      double expect = 0.0;
      for (std::size_t j = 0; j < d; ++j) expect += h[i * d + j] * v[j];
      EXPECT_NEAR(hv[i], expect, 1e-10);
    }
  }
}

TEST(Backward, ReplayIsBitwiseDeterministic) {
  std::mt19937_64 rng(11);
  const auto recipe = metaforge::testing::random_recipe(rng);
  Tape tape;
  std::vector<Tensor> leaves;
  for (const auto& s : recipe.leaf_shapes)
    leaves.push_back(tape.leaf(Tensor(s, random_values(rng, numel(s)))));
  const Tensor out = metaforge::testing::replay(recipe, leaves);
  const std::size_t size_before = tape.size();
  const auto g1 = backward(out, leaves, {.allow_unused = true});
  EXPECT_EQ(tape.size(), size_before);
  const auto g2 = backward(out, leaves, {.allow_unused = true});
  for (std::size_t i = 0; i < g1.size(); ++i) {
    ASSERT_EQ(g1[i].numel(), g2[i].numel());
    EXPECT_EQ(std::memcmp(g1[i].data().data(), g2[i].data().data(), g1[i].data().size_bytes()),
              0);
  }
}

TEST(Backward, ErrorsAndUnused) {
  Tape tape;
  const Tensor w = tape.leaf(tensor_of({2}, {1, 2}));
  const Tensor unused = tape.leaf(tensor_of({2}, {3, 4}));
  const Tensor constant = tensor_of({2}, {1, 1});

  EXPECT_THROW(backward(square(w), w), GradError);  // non-scalar
  EXPECT_THROW(backward(sum(w), constant), GradError);

  const Tensor both[] = {w, unused};
  EXPECT_THROW(backward(sum(w), both), UnusedInputError);
  const auto g = backward(sum(w), both, {.allow_unused = true});
  EXPECT_EQ(g[1][0], 0.0);
  EXPECT_EQ(g[1][1], 0.0);

  Tape other;
  const Tensor foreign = other.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(add(w, broadcast(reshape(foreign, {}), 2)), GradError);
}

TEST(Tape, GenerationCountsDifferentiableBackwardPasses) {
  Tape tape;
  const Tensor w = tape.leaf(Tensor::scalar(1.5));
  EXPECT_EQ(tape.generation(), 1);
  (void)backward(square(w), w);
  EXPECT_EQ(tape.generation(), 1);
  (void)backward(square(w), w, {.create_graph = true});
  EXPECT_EQ(tape.generation(), 2);
}

TEST(Backward, GradientsNeverProducedForConstants) {
  Tape tape;
  const Tensor w = tape.leaf(tensor_of({2}, {1, 2}));
  const Tensor c = tensor_of({2}, {5, 6});
  const Tensor out = sum(mul(w, c));
  const auto g = backward(out, w);
  EXPECT_EQ(g[0], 5.0);
  EXPECT_FALSE(c.requires_grad());
}
