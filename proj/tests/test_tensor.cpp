#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cot/gradcheck.hpp"
#include "cot/ops.hpp"

using namespace cot;

namespace {

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD(std::move(shape), std::move(v));
}

// Values bounded away from zero so relu/log/max kinks stay outside +-h.
TensorD offset_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return TensorD(std::move(shape), std::move(v));
}

using Fn = std::function<TensorD(const TensorD&)>;

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
  EXPECT_THROW(Tensor({0, 2}, std::vector<float>{}), DimensionError);
}

TEST(Tensor, ReluExample) {
  Tensor x({3}, {-1.0f, 0.0f, 2.0f});
  auto y = relu(x);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0.0f, 0.0f, 2.0f}));
}

TEST(Tensor, CosineSelfSimilarityIsOne) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    auto v = random_tensor({7}, rng);
    EXPECT_NEAR(cosine_similarity(v, v).item(), 1.0, 1e-7);
  }
  Tensor f({3}, {0.5f, -2.0f, 1.0f});
  EXPECT_NEAR(cosine_similarity(f, f).item(), 1.0f, 1e-6f);
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensor({3}, {0.0f, 0.0f, 0.0f}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(Tensor, ShapeMismatchIsDimensionError) {
  Tensor a({2, 3}, std::vector<float>(6, 1.0f));
  Tensor b({2, 2}, std::vector<float>(4, 1.0f));
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(mul(a, b), DimensionError);
}

TEST(Backward, SquareSumGradient) {
  Tensor x({3}, {1.0f, 2.0f, 3.0f}, true);
  Tape tape;
  TapeScope scope(&tape);
  auto loss = sum(mul(x, x));
  backward(loss, tape);
  const auto g = x.grad();
  EXPECT_FLOAT_EQ(g[0], 2.0f);
  EXPECT_FLOAT_EQ(g[1], 4.0f);
  EXPECT_FLOAT_EQ(g[2], 6.0f);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x({3}, {1.0f, 2.0f, 3.0f}, true);
  Tape tape;
  TapeScope scope(&tape);
  auto y = mul(x, x);
  EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(Backward, LossOffTapeIsContractError) {
  Tensor x({3}, {1.0f, 2.0f, 3.0f}, true);
  Tape tape;
  auto y = sum(x);  // no active tape
  EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(Backward, UnreachableLeafHasZeroGrad) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor unused({2}, {5.0f, 6.0f}, true);
  Tape tape;
  TapeScope scope(&tape);
  backward(sum(x), tape);
  EXPECT_EQ(unused.grad(), (std::vector<float>{0.0f, 0.0f}));
}

TEST(Backward, ConstantInputsAreNotRecorded) {
  Tensor c({2}, {1.0f, 2.0f});
  Tape tape;
  TapeScope scope(&tape);
  auto y = mul(c, c);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_FALSE(y.tape_id().has_value());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, TapeOutputsAreImmutable) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tape tape;
  TapeScope scope(&tape);
  auto y = scale(x, 2.0);
  EXPECT_THROW(y.mutable_data(), ContractError);
  EXPECT_NO_THROW(x.mutable_data());
}

TEST(Backward, MaxRoutesGradientToFirstMaximizer) {
  Tensor x({1, 4}, {1.0f, 3.0f, 3.0f, 2.0f}, true);
  Tape tape;
  TapeScope scope(&tape);
  backward(sum(max_over_axis(x, 1)), tape);
  EXPECT_EQ(x.grad(), (std::vector<float>{0.0f, 1.0f, 0.0f, 0.0f}));
}

TEST(Backward, MaxSubgradientMatchesPerturbation) {
  // Raising the chosen element raises the max one-for-one; raising any other
  // element (including the tied one) leaves it unchanged.
  std::vector<double> base{1.0, 3.0, 3.0, 2.0};
  TensorD x({1, 4}, base, true);
  Tape tape;
  {
    TapeScope scope(&tape);
    backward(sum(max_over_axis(x, 1)), tape);
  }
  const auto g = x.grad();
  const double h = 1e-3;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto up = base;
    up[i] += h;
    const double f0 = max_over_axis(TensorD({1, 4}, base), 1).item();
    const double f1 = max_over_axis(TensorD({1, 4}, up), 1).item();
    const double one_sided = (f1 - f0) / h;
    if (i == 1) {
      EXPECT_NEAR(g[i], one_sided, 1e-9);
    } else {
      EXPECT_EQ(g[i], 0.0);
    }
  }
}

TEST(Backward, ReuseAccumulatesPullbacks) {
  // y = sum(x*x) + sum(3x): a value consumed by two ops gets the sum of both.
  std::mt19937_64 rng(11);
  auto base = random_tensor({5}, rng);
  auto grad_of = [&](const Fn& f) {
    TensorD leaf(base.shape(), std::vector<double>(base.data().begin(), base.data().end()), true);
    Tape tape;
    TapeScope scope(&tape);
    backward(f(leaf), tape);
    return leaf.grad();
  };
  auto g1 = grad_of([](const TensorD& x) { return sum(mul(x, x)); });
  auto g2 = grad_of([](const TensorD& x) { return sum(scale(x, 3.0)); });
  auto both = grad_of([](const TensorD& x) { return add(sum(mul(x, x)), sum(scale(x, 3.0))); });
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], g1[i] + g2[i], 1e-12);
}

TEST(Backward, Deterministic) {
  std::mt19937_64 rng(5);
  auto a = random_tensor({6, 4}, rng);
  auto b = random_tensor({4, 3}, rng);
  auto run = [&] {
    Tensor fa(a.shape(), std::vector<float>(a.data().begin(), a.data().end()), true);
    Tensor fb(b.shape(), std::vector<float>(b.data().begin(), b.data().end()), true);
    Tape tape;
    TapeScope scope(&tape);
    backward(sum(softmax(matmul(fa, fb))), tape);
    return std::make_pair(fa.grad(), fb.grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumHasUnitGradient) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({10}, rng);
  EXPECT_LE(check_gradients<double>([](const TensorD& t) { return sum(t); }, x, 1e-3), 1e-6);
}

TEST(GradCheck, CosineAgainstConstant) {
  std::mt19937_64 rng(2);
  auto c = random_tensor({6}, rng);
  auto x = random_tensor({6}, rng);
  const double err =
      check_gradients<double>([&](const TensorD& t) { return sum(cosine_similarity(t, c)); }, x, 1e-3);
  EXPECT_LE(err, 1e-4);
}

// Every differentiable op against central differences on 100 random inputs.
TEST(GradCheck, AllOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(42);
  const double h = 1e-4;
  struct Case {
    const char* name;
    Shape shape;
    std::function<double(const TensorD&, std::mt19937_64&)> run;
  };
  auto weights = [](Shape s, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    return random_tensor(std::move(s), r);
  };
  // Each loss contracts the op output with fixed random weights so every
  // output coordinate contributes.
  auto contract = [](const TensorD& y, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    return sum(mul(y, random_tensor(y.shape(), r)));
  };
  std::vector<std::pair<const char*, std::function<TensorD(const TensorD&)>>> ops;
  const Shape s{3, 4};
  const auto w_right = weights({4, 5}, 7);
  const auto w_left = weights({2, 3}, 8);
  const auto other = weights({3, 4}, 9);
  const auto bias = weights({4}, 10);
  const auto rows_b = weights({2, 4}, 12);
  std::vector<double> mask{2.0, 0.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 0.0, 2.0};
  std::vector<std::int64_t> gidx{0, 5, 5, -1, 11, 3};
  ops.emplace_back("matmul_left", [&](const TensorD& x) { return contract(matmul(x, w_right), 1); });
  ops.emplace_back("matmul_right", [&](const TensorD& x) { return contract(matmul(w_left, x), 2); });
  ops.emplace_back("add", [&](const TensorD& x) { return contract(add(x, other), 3); });
  ops.emplace_back("add_bias", [&](const TensorD& x) { return contract(add(x, bias), 4); });
  ops.emplace_back("sub", [&](const TensorD& x) { return contract(sub(other, x), 5); });
  ops.emplace_back("mul", [&](const TensorD& x) { return contract(mul(x, x), 6); });
  ops.emplace_back("scale", [&](const TensorD& x) { return contract(scale(x, -1.7), 7); });
  ops.emplace_back("relu", [&](const TensorD& x) { return contract(relu(x), 8); });
  ops.emplace_back("exp", [&](const TensorD& x) { return contract(exp(x), 9); });
  ops.emplace_back("log", [&](const TensorD& x) { return contract(log(mul(x, x)), 10); });
  ops.emplace_back("sum", [&](const TensorD& x) { return scale(sum(mul(x, x)), 0.5); });
  ops.emplace_back("mean", [&](const TensorD& x) { return mean(exp(x)); });
  ops.emplace_back("sum_axis0", [&](const TensorD& x) { return contract(sum_over_axis(x, 0), 11); });
  ops.emplace_back("mean_axis1", [&](const TensorD& x) { return contract(mean_over_axis(x, 1), 12); });
  ops.emplace_back("max_axis1", [&](const TensorD& x) { return contract(max_over_axis(x, 1), 13); });
  ops.emplace_back("max_axis0", [&](const TensorD& x) { return contract(max_over_axis(x, 0), 14); });
  ops.emplace_back("concat", [&](const TensorD& x) {
    return contract(concat(std::vector<TensorD>{x, other, x}, 1), 15);
  });
  ops.emplace_back("l2_norm", [&](const TensorD& x) { return contract(l2_norm(x), 16); });
  ops.emplace_back("l2_normalize", [&](const TensorD& x) { return contract(l2_normalize(x), 17); });
  ops.emplace_back("cosine", [&](const TensorD& x) { return contract(cosine_similarity(x, rows_b), 18); });
  ops.emplace_back("softmax", [&](const TensorD& x) { return contract(softmax(x), 19); });
  ops.emplace_back("log_softmax", [&](const TensorD& x) { return contract(log_softmax(x), 20); });
  ops.emplace_back("feature_standardize", [&](const TensorD& x) { return contract(feature_standardize(x), 21); });
  ops.emplace_back("dropout", [&](const TensorD& x) { return contract(dropout(x, std::span<const double>(mask)), 22); });
  ops.emplace_back("reshape", [&](const TensorD& x) { return contract(reshape(x, Shape{2, 6}), 23); });
  ops.emplace_back("transpose", [&](const TensorD& x) { return contract(transpose(x), 24); });
  ops.emplace_back("gather", [&](const TensorD& x) {
    return contract(gather(x, std::span<const std::int64_t>(gidx), Shape{2, 3}), 25);
  });
  ops.emplace_back("sq_dist", [&](const TensorD& x) { return contract(sq_dist(x, rows_b), 26); });

  for (const auto& [name, f] : ops) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      auto x = offset_tensor(s, rng);
      worst = std::max(worst, check_gradients<double>(f, x, h));
    }
    EXPECT_LE(worst, 1e-4) << name;
  }
}

TEST(Ops, AccumulationInDouble) {
  // 1 + 1e-8 * 1e6 would lose every small term with float accumulation.
  std::vector<float> v(1000001, 1e-8f);
  v[0] = 1.0f;
  Tensor x({v.size()}, v);
  EXPECT_NEAR(sum(x).item(), 1.01f, 1e-6f);
}

TEST(Ops, ConcatAndGatherValues) {
  Tensor a({2, 1}, {1.0f, 2.0f});
  Tensor b({2, 2}, {3.0f, 4.0f, 5.0f, 6.0f});
  auto c = concat(std::vector<Tensor>{a, b}, 1);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()),
            (std::vector<float>{1.0f, 3.0f, 4.0f, 2.0f, 5.0f, 6.0f}));
  std::vector<std::int64_t> idx{5, -1, 0};
  auto g = gather(c, std::span<const std::int64_t>(idx), Shape{3});
  EXPECT_EQ(std::vector<float>(g.data().begin(), g.data().end()), (std::vector<float>{6.0f, 0.0f, 1.0f}));
}

TEST(Ops, LogIsEpsilonGuarded) {
  auto y = log(Tensor({2}, {0.0f, -1.0f}));
  EXPECT_NEAR(y[0], std::log(1e-8), 1e-4);
  EXPECT_NEAR(y[1], std::log(1e-8), 1e-4);
  auto n = l2_normalize(Tensor({1, 3}, {0.0f, 0.0f, 0.0f}));
  for (float v : n.data()) EXPECT_EQ(v, 0.0f);
}
