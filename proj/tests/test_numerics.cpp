#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctxalign/numerics.hpp"
#include "support/finite_difference.hpp"

using namespace ctxalign;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& x : v) x = nd(rng);
  return Tensor::matrix(r, c, std::move(v), grad);
}

// Fixed weights make a scalar loss sensitive to every output element.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_matrix(x.rows(), x.cols(), rng, false);
  return sum(hadamard(x, w));
}

}  // namespace

TEST(Tensor, RejectsShapeMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}, {}), DimensionError);
}

TEST(Tensor, RejectsNonFiniteValues) {
  EXPECT_THROW(Tensor({1}, {std::nan("")}), NumericError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto out = matmul(a, Tensor::identity(2));
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, HandComputedProduct) {
  auto out = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {5, 6}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(out.at(0, 0), 17);
  EXPECT_DOUBLE_EQ(out.at(1, 0), 39);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto a = random_matrix(3, 3, rng);
  auto b = random_matrix(3, 3, rng);
  auto r = fd::check({a, b}, [&] { return sum(matmul(a, b)); }, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(UnaryMap, Relu) {
  auto out = relu(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
            (std::vector<double>{0, 0, 2}));
}

TEST(UnaryMap, GeluAtZero) { EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0); }

TEST(UnaryMap, ReluGradientIsPiecewise) {
  auto x = Tensor::vector({-1, 2}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad_at(0), 0.0);
  EXPECT_EQ(x.grad_at(1), 1.0);
}

TEST(UnaryMap, GeluGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto x = random_matrix(3, 4, rng);
  auto r = fd::check({x}, [&] { return weighted_sum(gelu(x)); }, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Softmax, SymmetricRow) {
  auto out = softmax_rows(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_DOUBLE_EQ(out.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(out.at(0, 1), 0.5);
}

TEST(Softmax, ClosedFormExponentials) {
  auto out = softmax_rows(Tensor::matrix(1, 2, {0, std::log(3.0)}));
  EXPECT_NEAR(out.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(out.at(0, 1), 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndRowsSumToOne) {
  std::mt19937_64 rng(3);
  auto x = random_matrix(5, 7, rng, false);
  auto a = softmax_rows(x);
  auto b = softmax_rows(affine(x, 1.0, 12.5));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(a.at(i, j), b.at(i, j), 1e-14);
      EXPECT_GT(a.at(i, j), 0.0);
      EXPECT_LT(a.at(i, j), 1.0);
      s += a.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, CausalMaskZeroesFuture) {
  auto out = softmax_rows(Tensor::matrix(2, 2, {1, 5, 1, 1}), Masking::causal);
  EXPECT_EQ(out.at(0, 1), 0.0);
  EXPECT_EQ(out.at(0, 0), 1.0);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto x = random_matrix(3, 4, rng);
  for (auto mask : {Masking::none, Masking::causal}) {
    x.zero_grad();
    auto r = fd::check({x}, [&] { return weighted_sum(softmax_rows(x, mask)); }, 1e-4);
    EXPECT_TRUE(r.ok) << r.detail;
  }
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  auto out = layer_norm(Tensor::matrix(1, 3, {4, 4, 4}), Tensor::vector({1, 1, 1}),
                        Tensor::vector({0, 0, 0}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitRow) {
  auto out = layer_norm(Tensor::matrix(1, 2, {1, -1}), Tensor::vector({1, 1}),
                        Tensor::vector({0, 0}), 1e-12);
  EXPECT_NEAR(out.at(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(out.at(0, 1), -1.0, 1e-9);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  auto out = layer_norm(Tensor::matrix(2, 2, {1, 5, -3, 2}), Tensor::vector({0, 0}),
                        Tensor::vector({0.5, -2}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(out.at(i, 0), 0.5);
    EXPECT_EQ(out.at(i, 1), -2.0);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = random_matrix(3, 5, rng);
  auto g = random_matrix(1, 5, rng);
  auto b = random_matrix(1, 5, rng);
  auto gain = reshape(g, {5}).detach();
  auto bias = reshape(b, {5}).detach();
  gain.set_requires_grad(true);
  bias.set_requires_grad(true);
  auto r = fd::check({x, gain, bias}, [&] { return weighted_sum(layer_norm(x, gain, bias)); }, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Cosine, Examples) {
  const std::vector<double> e1{1, 0}, e2{0, 1}, d{1, 1}, dd{2, 2}, neg{-1, 0}, zero{0, 0};
  EXPECT_EQ(cosine_similarity(e1, e2), 0.0);
  EXPECT_NEAR(cosine_similarity(d, dd), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(e1, neg), -1.0);
  EXPECT_EQ(cosine_similarity(zero, e1), 0.0);
}

TEST(Cosine, BoundedOnRandomVectors) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> u(5), v(5);
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = nd(rng);
      v[i] = k % 3 == 0 ? 2.5 * u[i] : nd(rng);  // parallel pairs probe the clamp
    }
    const double c = cosine_similarity(u, v);
    EXPECT_GE(c, -1.0 - 1e-12);
    EXPECT_LE(c, 1.0 + 1e-12);
  }
}

TEST(Backward, SquareHasGradientSix) {
  auto x = Tensor::scalar(3.0, true);
  backward(hadamard(x, x));
  EXPECT_NEAR(x.grad_at(0), 6.0, 1e-12);
  auto y = Tensor::scalar(3.0, true);
  auto r = fd::check({y}, [&] { return hadamard(y, y); }, 1e-6);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Backward, ConstantHasZeroGradient) {
  auto x = Tensor::scalar(3.0, true);
  backward(affine(x, 0.0, 4.0));
  EXPECT_EQ(x.grad_at(0), 0.0);
}

TEST(Backward, ChainMatmulReluSum) {
  std::mt19937_64 rng(7);
  auto a = random_matrix(4, 4, rng);
  auto b = random_matrix(4, 4, rng);
  auto r = fd::check({a, b}, [&] { return sum(relu(matmul(a, b))); }, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backward(affine(x, 2.0)), ContractError);
}

TEST(Backward, SecondCallIsContractError) {
  auto x = Tensor::vector({1, 2}, true);
  auto loss = sum(hadamard(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, TapeVisitsOpsOnceInReverseOrder) {
  auto x = Tensor::vector({1, 2}, true);
  auto y = affine(x, 2.0);
  auto z = hadamard(y, y);
  auto tape = backward(sum(z));
  ASSERT_EQ(tape.size(), 3u);
  EXPECT_EQ(tape.entries[0].op, "sum");
  EXPECT_EQ(tape.entries[1].op, "hadamard");
  EXPECT_EQ(tape.entries[2].op, "affine");
  for (std::size_t i = 1; i < tape.size(); ++i) {
    EXPECT_GT(tape.entries[i - 1].sequence, tape.entries[i].sequence);
  }
}

TEST(Backward, ReusedTensorAccumulates) {
  auto x = Tensor::vector({2}, true);
  backward(sum(add(x, add(x, x))));
  EXPECT_EQ(x.grad_at(0), 3.0);
}

TEST(Backward, LeafGradientsAccumulateAcrossCalls) {
  auto x = Tensor::vector({2}, true);
  backward(sum(x));
  backward(sum(affine(x, 2.0)));
  EXPECT_EQ(x.grad_at(0), 3.0);
}

TEST(Ops, StructuralGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto a = random_matrix(4, 3, rng);
  auto b = random_matrix(2, 3, rng);
  auto bias = random_matrix(1, 3, rng);
  auto bias_v = reshape(bias, {3}).detach();
  bias_v.set_requires_grad(true);
  const std::vector<int> ids{2, 0, 2};
  auto loss = [&] {
    auto rows = concat_rows({slice_rows(a, 1, 2), b, gather_rows(a, ids)});
    auto cols = concat_cols({slice_cols(rows, 0, 2), rows});
    auto square = transpose(slice_rows(rows, 0, 3));
    auto mixed = add_rowwise(sub(rows, pad_rows_front(slice_rows(rows, 0, 4), 3)), bias_v);
    return add(add(weighted_sum(cols, 1), weighted_sum(reshape(mixed, {3, 7}), 2)),
               add(mean(hadamard(mixed, mixed)), weighted_sum(square, 3)));
  };
  auto r = fd::check({a, b, bias_v}, loss, 1e-4);
  EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Losses, MseExamples) {
  const std::vector<double> t{1, 2};
  EXPECT_EQ(mse_loss(Tensor::vector({1, 2}), t).item(), 0.0);
  const std::vector<double> t2{2, 4};
  EXPECT_DOUBLE_EQ(mse_loss(Tensor::vector({1, 2}), t2).item(), 2.5);
}

TEST(Losses, SmapeSinglePoint) {
  const std::vector<double> y{1};
  EXPECT_DOUBLE_EQ(smape_loss(Tensor::vector({3}), y).item(), 100.0);
}

TEST(Losses, CrossEntropyUniformLogits) {
  const std::vector<int> label{1};
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 2, {0.3, 0.3}), label).item(), std::log(2.0), 1e-15);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto p = random_matrix(1, 5, rng);
  const std::vector<double> y{0.5, -1.0, 2.0, 0.1, -0.3};
  const std::vector<int> labels{3};
  for (int kind = 0; kind < 3; ++kind) {
    auto r = fd::check(
        {p},
        [&] {
          if (kind == 0) return mse_loss(p, y);
          if (kind == 1) return smape_loss(p, y);
          return cross_entropy(p, labels);
        },
        1e-4);
    EXPECT_TRUE(r.ok) << "loss " << kind << ": " << r.detail;
    p.zero_grad();
  }
}

TEST(Determinism, RepeatedForwardIsBitwiseIdentical) {
  std::mt19937_64 rng(10);
  auto a = random_matrix(6, 6, rng);
  auto b = random_matrix(6, 6, rng);
  const double x = sum(gelu(matmul(softmax_rows(a), b))).item();
  const double y = sum(gelu(matmul(softmax_rows(a), b))).item();
  EXPECT_EQ(x, y);
}
