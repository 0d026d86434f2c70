#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "grace/autodiff.hpp"
#include "support/gradcheck.hpp"

namespace grace {
namespace {

using testing::max_rel_error;
using testing::random_tensor;

TEST(Matmul, IdentityTimesIdentity) {
  Tape tape;
  Var i2 = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var out = matmul(i2, i2);
  EXPECT_EQ(out.value().to_vector(), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, HandArithmetic) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = tape.constant(Tensor::matrix(2, 1, {1, 1}));
  Var out = matmul(a, b);
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out.value().to_vector(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] and [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(3);
  Tape tape;
  Tensor at = random_tensor({3, 4}, rng);
  at.requires_grad = true;
  Tensor bt = random_tensor({4, 2}, rng);
  Var a = tape.input(at);
  Var b = tape.constant(bt);
  tape.backward(sum(matmul(a, b)));
  const Tensor& g = tape.grad(a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_DOUBLE_EQ(g.at(i, k), bt.at(k, 0) + bt.at(k, 1));
}

TEST(Softmax, UniformOnEqualInputs) {
  Tape tape(false);
  Var y = softmax(tape.constant(Tensor::vector({0, 0, 0})));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Tape tape(false);
  Var y = softmax(tape.constant(Tensor::vector({1000, 0})));
  EXPECT_NEAR(y.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-12);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Softmax, MatchesScalarExponentialOracle) {
  Tape tape(false);
  Var y = softmax(tape.constant(Tensor::vector({1, 2})));
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  EXPECT_NEAR(y.value()[0], e1 / (e1 + e2), 1e-15);
  EXPECT_NEAR(y.value()[0], 0.26894, 1e-5);
  EXPECT_NEAR(y.value()[1], 0.73106, 1e-5);
}

TEST(Softmax, RowsSumToOneForLargeMagnitudes) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape(false);
    Var y = softmax(tape.constant(random_tensor({6, 17}, rng, -1e4, 1e4)));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (double v : y.value().row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, QuadraticDerivative) {
  Tape tape;
  Tensor xt = Tensor::vector({3});
  xt.requires_grad = true;
  Var x = tape.input(xt);
  tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tape tape;
  Tensor xt = Tensor::vector({1, 2});
  xt.requires_grad = true;
  Var x = tape.input(xt);
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
}

TEST(Backward, LeafWithoutRequiresGradHasNoEntry) {
  Tape tape;
  Tensor at = Tensor::vector({1, 2});
  at.requires_grad = true;
  Var a = tape.input(at);
  Var b = tape.input(Tensor::vector({3, 4}));
  tape.backward(sum(mul(a, b)));
  EXPECT_TRUE(tape.has_grad(a));
  EXPECT_FALSE(tape.has_grad(b));
  EXPECT_THROW(tape.grad(b), ContractError);
}

TEST(Backward, MatmulSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Parameter A("A", random_tensor({3, 5}, rng));
  Tensor B = random_tensor({5, 4}, rng);
  Tape tape;
  tape.backward(sum(matmul(tape.param(A), tape.constant(B))));
  auto f = [&] {
    Tape t(false);
    return sum(matmul(t.param(A), t.constant(B))).value().item();
  };
  EXPECT_LE(max_rel_error(A.value, A.grad, f), 1e-4);
}

// Builds a loss touching every op; returns the scalar value.
double composite_loss(Tape& tape, Parameter& x, Parameter& w, Parameter& g,
                      Parameter& b, Parameter& table) {
  const int ids[] = {2, 0, 2, 1};
  const int cols[] = {1, 0, 3, 2};
  const double mask[] = {1, 0, 1, 1};
  Var xv = tape.param(x), wv = tape.param(w);
  Var emb = gather_rows(tape.param(table), ids);           // 4x4
  Var h = add(matmul(xv, wv), emb);                         // 4x4
  h = layer_norm(h, tape.param(g), tape.param(b));
  Var scores = causal_mask(scale(matmul(h, transpose(h)), 0.5));
  Var att = matmul(softmax(scores), h);
  Var mixed = concat_cols({slice_cols(att, 0, 2), slice_cols(gelu(att), 2, 2)});
  Var pos = exp(scale(mixed, 0.3));
  Var lp = log_softmax(add_row(mixed, tape.param(b)));
  Var t1 = sum(pick(lp, cols));
  Var t2 = sum(log(pos));
  Var t3 = sum(masked_mean(mixed, mask));
  Var t4 = sum(mean(slice_rows(mul(mixed, pos), 1, 3), 1));
  Var t5 = sum(mean(normalize_rows(mixed), 0));
  Var total = add(add(add(t1, t2), add(t3, t4)), t5);
  const double v = total.value().item();
  if (tape.recording()) tape.backward(total);
  return v;
}

TEST(Backward, CompositeLossMatchesFiniteDifferencesOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Parameter x("x", random_tensor({4, 3}, rng));
    Parameter w("w", random_tensor({3, 4}, rng));
    Parameter g("g", random_tensor({4}, rng));
    Parameter b("b", random_tensor({4}, rng));
    Parameter table("table", random_tensor({3, 4}, rng));
    std::vector<Parameter*> all = {&x, &w, &g, &b, &table};
    {
      Tape tape;
      composite_loss(tape, x, w, g, b, table);
    }
    auto f = [&] {
      Tape t(false);
      return composite_loss(t, x, w, g, b, table);
    };
    for (Parameter* p : all) {
      EXPECT_LE(max_rel_error(p->value, p->grad, f), 1e-4)
          << "seed " << seed << " param " << p->name;
    }
  }
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    std::mt19937_64 rng(9);
    Parameter x("x", random_tensor({4, 3}, rng));
    Parameter w("w", random_tensor({3, 4}, rng));
    Parameter g("g", random_tensor({4}, rng));
    Parameter b("b", random_tensor({4}, rng));
    Parameter table("table", random_tensor({3, 4}, rng));
    Tape tape;
    const double v = composite_loss(tape, x, w, g, b, table);
    return std::make_pair(v, x.grad.to_vector());
  };
  EXPECT_EQ(run(), run());
}

TEST(MaskedMean, EmptyMaskIsDegenerate) {
  Tape tape(false);
  const double mask[] = {0, 0};
  EXPECT_THROW(masked_mean(tape.constant(Tensor(Shape{2, 3}, 1.0)), mask),
               DegenerateInputError);
}

}  // namespace
}  // namespace grace
