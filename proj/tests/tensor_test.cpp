#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "stal/error.hpp"
#include "stal/tensor.hpp"

using namespace stal;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Compares analytic gradients of sum(op(inputs) * weights) against central
// differences, one input at a time.
double max_grad_error(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                      std::vector<Tensor> inputs, std::mt19937_64& rng) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor out = op(inputs);
  Tensor weights = random_tensor(rng, out.shape());
  sum(mul(out, weights)).backward();

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> args;
      for (std::size_t j = 0; j < inputs.size(); ++j) args.push_back(j == i ? x : inputs[j].detach());
      return sum(mul(op(args), weights));
    };
    Tensor numeric = finite_difference_grad(f, inputs[i], 1e-5);
    for (std::size_t e = 0; e < numeric.size(); ++e) {
      worst = std::max(worst, relative_error(inputs[i].grad()[e], numeric.data()[e]));
    }
  }
  return worst;
}

Shape random_shape(std::mt19937_64& rng, std::size_t rank, std::size_t max_elems = 64) {
  for (;;) {
    Shape s(rank);
    std::uniform_int_distribution<std::size_t> ext(1, 4);
    for (auto& e : s) e = ext(rng);
    if (shape_size(s) <= max_elems) return s;
  }
}

}  // namespace

TEST(Tensor, MatmulShapeRule) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 4}, {1, 0, 0, 1, 0, 1, 0, 1, 0, 0, 1, 1});
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4}));
  const std::vector<double> expected{1, 2, 3, 6, 4, 5, 6, 15};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(c.data()[i], expected[i]);
}

TEST(Tensor, MatmulMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), Error);
}

TEST(Tensor, SoftmaxOfConstantIsUniform) {
  Tensor y = softmax(Tensor({3, 5}, 2.5), 1);
  for (double v : y.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, {4, 6, 5}, -20.0, 20.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(x, axis);
    Tensor s = sum(y, {axis});
    for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
    for (double v : y.data()) EXPECT_GT(v, 0.0);
  }
}

TEST(Tensor, L2NormOfThreeFour) { EXPECT_DOUBLE_EQ(l2_norm(Tensor({2}, {3.0, 4.0})).item(), 5.0); }

TEST(Tensor, BackwardOfSumOfSquares) {
  Tensor x({3}, {1, 2, 3});
  x.set_requires_grad();
  sum(mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Tensor, BackwardOfLinearMapGivesColumnSums) {
  Tensor a({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor x({4, 1}, {0.5, -1, 2, 3});
  x.set_requires_grad();
  sum(matmul(a, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 15.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 18.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 21.0);
  EXPECT_DOUBLE_EQ(x.grad()[3], 24.0);
}

TEST(Tensor, BackwardRejectsNonScalar) {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(scale(x, 2.0).backward(), Error);
}

TEST(Tensor, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad();
  Tensor loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Tensor, RandomCompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor w = random_tensor(rng, {3, 4});
  Tensor v = random_tensor(rng, {4, 5});
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor h = tanh(matmul(in[0], in[1]));
    Tensor s = softmax(h, 1);
    Tensor t = concat({sigmoid(h), s}, 0);
    return l2_norm(transpose(t, {1, 0}), {1});
  };
  EXPECT_LT(max_grad_error(f, {w, v}, rng), 1e-6);
}

TEST(FiniteDifference, SumOfSquares) {
  Tensor g = finite_difference_grad([](const Tensor& x) { return sum(mul(x, x)); }, Tensor({2}, {1.0, 2.0}), 1e-5);
  EXPECT_NEAR(g.data()[0], 2.0, 1e-8);
  EXPECT_NEAR(g.data()[1], 4.0, 1e-8);
}

TEST(FiniteDifference, ConstantFunctionHasZeroGradient) {
  Tensor g = finite_difference_grad([](const Tensor&) { return Tensor::scalar(7.0); }, Tensor({3}, 1.0), 1e-5);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, SigmoidSlopeAtZero) {
  Tensor g = finite_difference_grad([](const Tensor& x) { return sum(sigmoid(x)); }, Tensor({4}, 0.0), 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 0.25, 1e-8);
}

TEST(FiniteDifference, DetectsNonDeterministicFunction) {
  int calls = 0;
  auto f = [&](const Tensor&) { return Tensor::scalar(static_cast<double>(++calls)); };
  EXPECT_THROW(finite_difference_grad(f, Tensor({1}, 0.0), 1e-5), Error);
  EXPECT_THROW(finite_difference_grad([](const Tensor& x) { return sum(x); }, Tensor({1}), 0.0), Error);
}

// Every differentiable op against central differences, 100 seeds each,
// random shapes with at most 64 elements.
TEST(TensorProperty, EveryOpMatchesFiniteDifferences) {
  using Op = std::function<double(std::mt19937_64&)>;
  const std::vector<std::pair<std::string, Op>> ops = {
      {"add", [](auto& rng) {
         Shape s = random_shape(rng, 3);
         return max_grad_error([](const auto& in) { return add(in[0], in[1]); },
                               {random_tensor(rng, s), random_tensor(rng, s)}, rng);
       }},
      {"sub", [](auto& rng) {
         Shape s = random_shape(rng, 2);
         return max_grad_error([](const auto& in) { return sub(in[0], in[1]); },
                               {random_tensor(rng, s), random_tensor(rng, s)}, rng);
       }},
      {"mul", [](auto& rng) {
         Shape s = random_shape(rng, 3);
         return max_grad_error([](const auto& in) { return mul(in[0], in[1]); },
                               {random_tensor(rng, s), random_tensor(rng, s)}, rng);
       }},
      {"scalar-mul", [](auto& rng) {
         Shape s = random_shape(rng, 2);
         return max_grad_error([](const auto& in) { return mul(in[0], in[1]); },
                               {random_tensor(rng, {}), random_tensor(rng, s)}, rng);
       }},
      {"scale", [](auto& rng) {
         return max_grad_error([](const auto& in) { return add_scalar(scale(in[0], -1.7), 0.3); },
                               {random_tensor(rng, random_shape(rng, 2))}, rng);
       }},
      {"matmul", [](auto& rng) {
         std::uniform_int_distribution<std::size_t> e(1, 4);
         const std::size_t b = e(rng), m = e(rng), k = e(rng), n = e(rng);
         return max_grad_error([](const auto& in) { return matmul(in[0], in[1]); },
                               {random_tensor(rng, {b, m, k}), random_tensor(rng, {b, k, n})}, rng);
       }},
      {"linear", [](auto& rng) {
         std::uniform_int_distribution<std::size_t> e(1, 5);
         const std::size_t a = e(rng), b = e(rng), in = e(rng), out = e(rng);
         return max_grad_error([](const auto& t) { return linear(t[0], t[1], t[2]); },
                               {random_tensor(rng, {a, b, in}), random_tensor(rng, {in, out}),
                                random_tensor(rng, {out})},
                               rng);
       }},
      {"linear-nobias", [](auto& rng) {
         std::uniform_int_distribution<std::size_t> e(1, 5);
         const std::size_t r = e(rng), in = e(rng), out = e(rng);
         return max_grad_error([](const auto& t) { return linear(t[0], t[1]); },
                               {random_tensor(rng, {r, in}), random_tensor(rng, {in, out})}, rng);
       }},
      {"matmul_shared", [](auto& rng) {
         std::uniform_int_distribution<std::size_t> e(1, 3);
         const std::size_t b = e(rng), r = e(rng), m = e(rng), k = e(rng), n = e(rng);
         return max_grad_error([](const auto& t) { return matmul_shared(t[0], t[1]); },
                               {random_tensor(rng, {b, m, k}), random_tensor(rng, {b, r, k, n})}, rng);
       }},
      {"time_taps", [](auto& rng) {
         Shape s = random_shape(rng, 4, 40);
         const std::size_t width = std::uniform_int_distribution<std::size_t>(0, 2)(rng) * 2 + 1;
         return max_grad_error([width](const auto& t) { return time_taps(t[0], width); },
                               {random_tensor(rng, s)}, rng);
       }},
      {"transpose", [](auto& rng) {
         std::vector<std::size_t> perm{0, 1, 2};
         std::shuffle(perm.begin(), perm.end(), rng);
         return max_grad_error([perm](const auto& in) { return transpose(in[0], perm); },
                               {random_tensor(rng, random_shape(rng, 3))}, rng);
       }},
      {"reshape", [](auto& rng) {
         Shape s = random_shape(rng, 2);
         return max_grad_error([s](const auto& in) { return reshape(in[0], {s[0] * s[1]}); },
                               {random_tensor(rng, s)}, rng);
       }},
      {"concat", [](auto& rng) {
         Shape s = random_shape(rng, 3, 30);
         Shape t = s;
         t[1] += 1;
         return max_grad_error([](const auto& in) { return concat({in[0], in[1]}, 1); },
                               {random_tensor(rng, s), random_tensor(rng, t)}, rng);
       }},
      {"slice", [](auto& rng) {
         Shape s = random_shape(rng, 3);
         s[2] = std::max<std::size_t>(s[2], 2);
         return max_grad_error([s](const auto& in) { return slice(in[0], 2, 1, s[2]); },
                               {random_tensor(rng, s)}, rng);
       }},
      {"repeat", [](auto& rng) {
         return max_grad_error([](const auto& in) { return repeat_leading(in[0], 3); },
                               {random_tensor(rng, random_shape(rng, 2, 20))}, rng);
       }},
      {"sum", [](auto& rng) {
         return max_grad_error([](const auto& in) { return sum(in[0], {0, 2}); },
                               {random_tensor(rng, random_shape(rng, 3))}, rng);
       }},
      {"mean", [](auto& rng) {
         return max_grad_error([](const auto& in) { return mean(in[0], {1}); },
                               {random_tensor(rng, random_shape(rng, 3))}, rng);
       }},
      {"relu", [](auto& rng) {
         Tensor x = random_tensor(rng, random_shape(rng, 2));
         std::vector<double> v(x.data().begin(), x.data().end());
         for (double& e : v) e += e >= 0 ? 0.05 : -0.05;  // keep clear of the kink
         return max_grad_error([](const auto& in) { return relu(in[0]); }, {Tensor(x.shape(), v)}, rng);
       }},
      {"sigmoid", [](auto& rng) {
         return max_grad_error([](const auto& in) { return sigmoid(in[0]); },
                               {random_tensor(rng, random_shape(rng, 2), -4, 4)}, rng);
       }},
      {"tanh", [](auto& rng) {
         return max_grad_error([](const auto& in) { return tanh(in[0]); },
                               {random_tensor(rng, random_shape(rng, 2), -2, 2)}, rng);
       }},
      {"softmax", [](auto& rng) {
         return max_grad_error([](const auto& in) { return softmax(in[0], 1); },
                               {random_tensor(rng, random_shape(rng, 3), -3, 3)}, rng);
       }},
      {"l2_norm", [](auto& rng) {
         return max_grad_error([](const auto& in) { return l2_norm(in[0], {1}); },
                               {random_tensor(rng, random_shape(rng, 2), 0.2, 1.5)}, rng);
       }},
  };
  for (const auto& [name, op] : ops) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed * 7919 + name.size());
      worst = std::max(worst, op(rng));
    }
    EXPECT_LT(worst, 1e-6) << name;
  }
}

TEST(TensorProperty, ReshapeAndTransposeInvertExactly) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, random_shape(rng, 3));
    x.set_requires_grad();
    Tensor y = transpose(transpose(x, {2, 0, 1}), {1, 2, 0});
    Tensor z = reshape(reshape(y, {x.size()}), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(z.data()[i], x.data()[i]);
    Tensor w = random_tensor(rng, x.shape());
    sum(mul(z, w)).backward();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x.grad()[i], w.data()[i]);
  }
}

TEST(TensorProperty, ForwardIsDeterministic) {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor(rng, {6, 70, 33});
  Tensor b = random_tensor(rng, {6, 33, 17});
  Tensor c1 = softmax(matmul(a, b), 2);
  Tensor c2 = softmax(matmul(a, b), 2);
  for (std::size_t i = 0; i < c1.size(); ++i) ASSERT_EQ(c1.data()[i], c2.data()[i]);
}

TEST(Gemm, RowsDoNotDependOnMatrixHeight) {
  std::mt19937_64 rng(1);
  const std::size_t m = 203, k = 77, n = 37;
  Tensor a = random_tensor(rng, {m, k});
  Tensor b = random_tensor(rng, {k, n});
  std::vector<double> full(m * n);
  gemm(a.data().data(), b.data().data(), full.data(), m, k, n, false);
  for (std::size_t start : {0u, 3u, 101u, 200u}) {
    const std::size_t rows = std::min<std::size_t>(5, m - start);
    std::vector<double> part(rows * n);
    gemm(a.data().data() + start * k, b.data().data(), part.data(), rows, k, n, false);
    for (std::size_t i = 0; i < rows * n; ++i) ASSERT_EQ(part[i], full[start * n + i]);
  }
  // Against a plain triple loop.
  for (std::size_t i = 0; i < m; i += 17) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[p * n + j];
      EXPECT_NEAR(full[i * n + j], s, 1e-12);
    }
  }
}

TEST(Gemm, TransposedOperandsMatchLoops) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    std::uniform_int_distribution<std::size_t> e(1, 40);
    const std::size_t m = e(rng), k = trial < 8 ? 250 + 70 * trial : e(rng), n = e(rng);
    const bool ta = trial % 2, tb = (trial / 2) % 2, acc = (trial / 4) % 2;
    Tensor a = random_tensor(rng, ta ? Shape{k, m} : Shape{m, k});
    Tensor b = random_tensor(rng, tb ? Shape{n, k} : Shape{k, n});
    Tensor c0 = random_tensor(rng, {m, n});
    std::vector<double> c(c0.data().begin(), c0.data().end());
    gemm_ex(ta, tb, a.data().data(), b.data().data(), c.data(), m, k, n, acc);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p)
          s = std::fma(a.data()[ta ? p * m + i : i * k + p], b.data()[tb ? j * k + p : p * n + j], s);
        const double want = acc ? c0.data()[i * n + j] + s : s;
        ASSERT_EQ(c[i * n + j], want) << m << "x" << k << "x" << n;
      }
  }
}

TEST(Tensor, TimeTapsLayout) {
  Tensor x({1, 3, 1, 2}, {1, 2, 3, 4, 5, 6});
  Tensor y = time_taps(x, 3);
  const std::vector<double> want{0, 0, 1, 2, 3, 4, 1, 2, 3, 4, 5, 6, 3, 4, 5, 6, 0, 0};
  ASSERT_EQ(y.shape(), (Shape{1, 3, 1, 6}));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(y.data()[i], want[i]);
}

TEST(Tensor, ReshapeSharesStorageButLeafWritesDoNotLeak) {
  Tensor x({2, 2}, {1, 2, 3, 4});
  Tensor v = reshape(x, {4});
  EXPECT_EQ(v.data().data(), x.data().data());
  x.mutable_data()[0] = 9.0;
  EXPECT_EQ(v.data()[0], 1.0);
  EXPECT_EQ(x.data()[0], 9.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  {
    NoGradGuard guard;
    EXPECT_FALSE(scale(x, 2.0).requires_grad());
  }
  EXPECT_TRUE(scale(x, 2.0).requires_grad());
}

TEST(Tensor, MutatingRecordedOutputIsRejected) {
  Tensor x({2}, 1.0);
  x.set_requires_grad();
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.mutable_data(), Error);
}
