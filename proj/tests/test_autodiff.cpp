#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfgen/autodiff.hpp"
#include "cfgen/errors.hpp"
#include "support.hpp"

using namespace cfgen;
using namespace cfgen::ad;
using cfgen::fixtures::random_tensor;

namespace {

constexpr int kInstances = 100;
constexpr double kTol = 1e-3;

// Weighted sum against fixed random weights so every output coordinate matters.
Var reduce(Graph& g, Var y, std::mt19937_64& rng) {
  const auto w = random_tensor(g.value(y).shape(), rng);
  return sum(g, mul(g, y, g.constant(w)));
}

// Inputs bounded away from the relu kink.
Tensor away_from_zero(Shape s, std::mt19937_64& rng) {
  auto t = random_tensor(std::move(s), rng);
  for (auto& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

template <class Build>
void check_instances(const char* name, Build build) {
  double worst = 0.0;
  for (int i = 0; i < kInstances; ++i) {
    std::mt19937_64 rng(1000 + i);
    worst = std::max(worst, build(rng));
  }
  EXPECT_LT(worst, kTol) << name;
}

double naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t n, std::size_t co, std::size_t r,
                  std::size_t c, int stride, int pad) {
  double acc = b[co];
  const std::size_t cin = x.dim(1), h = x.dim(2), w = x.dim(3), ks = k.dim(2);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t u = 0; u < ks; ++u)
      for (std::size_t v = 0; v < ks; ++v) {
        const long rr = static_cast<long>(r) * stride + static_cast<long>(u) - pad;
        const long cc = static_cast<long>(c) * stride + static_cast<long>(v) - pad;
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
        acc += x[((n * cin + ci) * h + static_cast<std::size_t>(rr)) * w + static_cast<std::size_t>(cc)] *
               k[((co * cin + ci) * ks + u) * ks + v];
      }
  return acc;
}

}  // namespace

TEST(Tensor, ShapeAndItem) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_size({4, 5, 6}), 120u);
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(t.item(), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Autodiff, LinearForwardMatchesMatmul) {
  Graph g;
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor w({3, 2}, {1, 0, 0, 1, 1, 1});
  const Tensor b({2}, {0.5, -0.5});
  const auto y = g.value(linear(g, g.constant(x), g.constant(w), g.constant(b)));
  EXPECT_DOUBLE_EQ(y[0], 1 + 3 + 0.5);
  EXPECT_DOUBLE_EQ(y[1], 2 + 3 - 0.5);
  EXPECT_DOUBLE_EQ(y[2], 4 + 6 + 0.5);
  EXPECT_DOUBLE_EQ(y[3], 5 + 6 - 0.5);
}

TEST(Autodiff, ConvForwardMatchesNaiveLoops) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      const auto x = random_tensor({2, 3, 5, 6}, rng);
      const auto k = random_tensor({4, 3, 3, 3}, rng);
      const auto b = random_tensor({4}, rng);
      Graph g;
      const auto y = g.value(conv2d(g, g.constant(x), g.constant(k), g.constant(b), stride, pad));
      const std::size_t oh = y.dim(2), ow = y.dim(3);
      EXPECT_EQ(oh, static_cast<std::size_t>((5 + 2 * pad - 3) / stride + 1));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t co = 0; co < 4; ++co)
          for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t c = 0; c < ow; ++c)
              EXPECT_NEAR(y[((n * 4 + co) * oh + r) * ow + c], naive_conv(x, k, b, n, co, r, c, stride, pad), 1e-12);
    }
}

TEST(Autodiff, SoftmaxAndLossesMatchClosedForms) {
  Graph g;
  const Tensor logits({2, 3}, {0.0, std::log(2.0), std::log(3.0), 1.0, 1.0, 1.0});
  const auto p = g.value(softmax(g, g.constant(logits), 1));
  EXPECT_NEAR(p[0], 1.0 / 6, 1e-12);
  EXPECT_NEAR(p[2], 0.5, 1e-12);
  EXPECT_NEAR(p[4], 1.0 / 3, 1e-12);
  const std::vector<int> targets{2, 0};
  const double ce = g.value(loss_categorical(g, g.constant(logits), targets, 1)).item();
  EXPECT_NEAR(ce, 0.5 * (-std::log(0.5) - std::log(1.0 / 3)), 1e-12);

  const Tensor mu({1, 2}, {1.0, -2.0});
  const Tensor lv({1, 2}, {0.0, std::log(4.0)});
  const double kl = g.value(gaussian_kl(g, g.constant(mu), g.constant(lv))).item();
  EXPECT_NEAR(kl, 0.5 * (1 + 1 - 1 - 0) + 0.5 * (4 + 4 - 1 - std::log(4.0)), 1e-12);

  const double mse = g.value(loss_mse(g, g.constant(mu), g.constant(Tensor({1, 2}, {0.0, 0.0})))).item();
  EXPECT_DOUBLE_EQ(mse, 2.5);
  EXPECT_DOUBLE_EQ(g.value(l2_norm(g, g.constant(Tensor({2}, {3.0, 4.0})))).item(), 5.0);
}

TEST(Autodiff, ShapeErrors) {
  Graph g;
  const auto a = g.constant(Tensor({2, 3}));
  const auto b = g.constant(Tensor({3, 2}));
  EXPECT_THROW(add(g, a, b), DimensionError);
  EXPECT_THROW(linear(g, a, a, g.constant(Tensor({3}))), DimensionError);
  EXPECT_THROW(reshape(g, a, {4}), DimensionError);
  EXPECT_THROW(slice(g, a, 1, 2, 4), DimensionError);
  EXPECT_THROW(g.backward(a), ContractError);
}

TEST(Autodiff, GradientStopsAtConstantsAndDetach) {
  Graph g;
  const auto x = g.variable(Tensor({2}, {1.0, 2.0}));
  const auto c = g.constant(Tensor({2}, {3.0, 4.0}));
  const auto y = sum(g, add(g, mul(g, x, c), detach(g, square(g, x))));
  g.backward(y);
  EXPECT_EQ(g.grad(x), Tensor({2}, {3.0, 4.0}));
  EXPECT_EQ(g.grad(c), Tensor({2}, {0.0, 0.0}));
}

TEST(Autodiff, FanOutAccumulates) {
  Graph g;
  const auto x = g.variable(Tensor::scalar(3.0));
  const auto y = add(g, mul(g, x, x), scale(g, x, 2.0));
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 2 * 3.0 + 2.0);
}

TEST(GradCheck, DetectsAWrongBackwardRule) {
  const ScalarFn f = [](Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * xv[i];
    // claims d/dx x^2 = x
    const auto sq = g.record(y, {x}, [x](Graph& gr, const Tensor& gout) {
      Tensor gx(gr.value(x).shape());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gout[i] * gr.value(x)[i];
      gr.accumulate(x, gx);
    });
    return sum(g, sq);
  };
  EXPECT_GT(grad_check(f, Tensor({3}, {0.5, -1.0, 2.0})), 0.4);
}

TEST(GradCheck, NumericGradientOfKnownFunction) {
  const ScalarFn f = [](Graph& g, Var x) { return sum(g, exp(g, x)); };
  const Tensor x({3}, {0.0, 1.0, -1.0});
  const auto n = numeric_gradient(f, x, 1e-4);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(n[i], std::exp(x[i]), 1e-7);
}

TEST(GradCheck, ElementwiseOps) {
  check_instances("relu", [](auto& rng) {
    return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, relu(g, x), r); },
                      away_from_zero({3, 4}, rng));
  });
  for (auto kind : {Activation::tanh, Activation::sigmoid})
    check_instances("activation", [kind](auto& rng) {
      return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, activation(g, x, kind), r); },
                        random_tensor({3, 4}, rng, -2, 2));
    });
  check_instances("exp", [](auto& rng) {
    return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, exp(g, x), r); }, random_tensor({5}, rng));
  });
  check_instances("square/scale/mean", [](auto& rng) {
    return grad_check([](Graph& g, Var x) { return mean(g, scale(g, square(g, x), -1.7)); },
                      random_tensor({2, 5}, rng));
  });
  check_instances("l2_norm", [](auto& rng) {
    return grad_check([](Graph& g, Var x) { return l2_norm(g, x); }, away_from_zero({6}, rng));
  });
}

TEST(GradCheck, BinaryOps) {
  using Op = Var (*)(Graph&, Var, Var);
  for (Op op : {static_cast<Op>(add), static_cast<Op>(sub), static_cast<Op>(mul)})
    for (int side = 0; side < 2; ++side)
      check_instances("binary", [op, side](auto& rng) {
        const auto other = random_tensor({3, 3}, rng);
        return grad_check(
            [&](Graph& g, Var x) {
              auto r = rng;
              const auto o = g.constant(other);
              return reduce(g, side == 0 ? op(g, x, o) : op(g, o, x), r);
            },
            random_tensor({3, 3}, rng));
      });
}

TEST(GradCheck, LinearEachOperand) {
  for (int which = 0; which < 3; ++which)
    check_instances("linear", [which](auto& rng) {
      const auto x = random_tensor({4, 5}, rng), w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng);
      const Tensor& in = which == 0 ? x : which == 1 ? w : b;
      return grad_check(
          [&](Graph& g, Var v) {
            auto r = rng;
            const auto xv = which == 0 ? v : g.constant(x);
            const auto wv = which == 1 ? v : g.constant(w);
            const auto bv = which == 2 ? v : g.constant(b);
            return reduce(g, linear(g, xv, wv, bv), r);
          },
          in);
    });
}

TEST(GradCheck, ConvEachOperand) {
  for (int which = 0; which < 3; ++which)
    check_instances("conv2d", [which](auto& rng) {
      const int stride = 1 + static_cast<int>(rng() % 2), pad = static_cast<int>(rng() % 2);
      const auto x = random_tensor({2, 2, 5, 4}, rng), k = random_tensor({3, 2, 3, 3}, rng),
                 b = random_tensor({3}, rng);
      const Tensor& in = which == 0 ? x : which == 1 ? k : b;
      return grad_check(
          [&](Graph& g, Var v) {
            auto r = rng;
            const auto xv = which == 0 ? v : g.constant(x);
            const auto kv = which == 1 ? v : g.constant(k);
            const auto bv = which == 2 ? v : g.constant(b);
            return reduce(g, conv2d(g, xv, kv, bv, stride, pad), r);
          },
          in);
    });
}

TEST(GradCheck, SoftmaxEachAxis) {
  for (std::size_t axis = 0; axis < 3; ++axis)
    check_instances("softmax", [axis](auto& rng) {
      return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, softmax(g, x, axis), r); },
                        random_tensor({2, 3, 4}, rng, -2, 2));
    });
}

TEST(GradCheck, StructuralOps) {
  check_instances("reshape", [](auto& rng) {
    return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, reshape(g, x, {6, 2}), r); },
                      random_tensor({3, 4}, rng));
  });
  for (std::size_t axis = 0; axis < 2; ++axis)
    check_instances("concat", [axis](auto& rng) {
      const auto other = random_tensor({2, 2}, rng);
      return grad_check(
          [&](Graph& g, Var x) {
            auto r = rng;
            const std::vector<Var> parts{g.constant(other), x, g.constant(other)};
            return reduce(g, concat(g, parts, axis), r);
          },
          random_tensor({2, 2}, rng));
    });
  check_instances("slice", [](auto& rng) {
    return grad_check([&](Graph& g, Var x) { auto r = rng; return reduce(g, slice(g, x, 1, 1, 3), r); },
                      random_tensor({3, 4}, rng));
  });
}

TEST(GradCheck, Losses) {
  check_instances("loss_mse", [](auto& rng) {
    const auto t = random_tensor({4, 3}, rng);
    return grad_check([&](Graph& g, Var x) { return loss_mse(g, x, g.constant(t)); }, random_tensor({4, 3}, rng));
  });
  check_instances("loss_categorical", [](auto& rng) {
    std::vector<int> targets(2 * 5);
    for (auto& t : targets) t = static_cast<int>(rng() % 3);
    return grad_check([&](Graph& g, Var x) { return loss_categorical(g, x, targets, 1); },
                      random_tensor({2, 3, 5}, rng, -2, 2));
  });
  for (int which = 0; which < 2; ++which)
    check_instances("gaussian_kl", [which](auto& rng) {
      const auto mu = random_tensor({3, 4}, rng), lv = random_tensor({3, 4}, rng);
      return grad_check(
          [&](Graph& g, Var v) {
            return which == 0 ? gaussian_kl(g, v, g.constant(lv)) : gaussian_kl(g, g.constant(mu), v);
          },
          which == 0 ? mu : lv);
    });
}
