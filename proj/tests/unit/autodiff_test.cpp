// SPDX-License-Identifier: Apache-2.0

#include "cinr/autodiff.hpp"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>

namespace cinr {
namespace {

using ad::Graph;
using ad::GradMode;
using ad::Tensor;
using ad::Trans;
using testing::MatD;
using testing::primitive_cases;
using testing::probe;

MatD mat(std::initializer_list<std::initializer_list<double>> rows) {
  MatD m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}


TEST(Matmul, IdentityAndHandArithmetic) {
  Graph<double> g;
  const auto eye = g.constant(MatD::Identity(2, 2));
  const auto m = g.constant(mat({{1, 2}, {3, 4}}));
  EXPECT_EQ(ad::matmul(eye, m).value(), mat({{1, 2}, {3, 4}}));
  const auto row = g.constant(mat({{1, 2}}));
  const auto col = g.constant(mat({{3}, {4}}));
  EXPECT_EQ(ad::matmul(row, col).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  const auto a = g.constant(MatD::Zero(2, 3));
  const auto b = g.constant(MatD::Zero(4, 5));
  try {
    ad::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const auto a = testing::random_matrix(3, 3, rng);
  const auto b = testing::random_matrix(3, 3, rng);
  const double err = testing::gradient_check(
      [](Graph<double>&, const std::vector<Tensor<double>>& x) { return ad::sum(ad::matmul(x[0], x[1])); }, {a, b});
  EXPECT_LT(err, 1e-6);
}

TEST(Elementwise, Values) {
  Graph<double> g;
  EXPECT_EQ(ad::relu(g.constant(mat({{-1, 0, 2}}))).value(), mat({{0, 0, 2}}));
  EXPECT_EQ(ad::sin(g.constant(mat({{0}}))).item(), 0.0);
}

TEST(Elementwise, ReluGradientIsSignMask) {
  Graph<double> g;
  const auto x = g.variable(mat({{-1, 2}}));
  const auto grads = g.backward(ad::sum(ad::relu(x)), std::array{x});
  EXPECT_EQ(grads[0].value(), mat({{0, 1}}));
}

TEST(Elementwise, ReluGradientAtZeroIsZero) {
  Graph<double> g;
  const auto x = g.variable(mat({{0.0}}));
  EXPECT_EQ(g.backward(ad::sum(ad::relu(x)), std::array{x})[0].item(), 0.0);
}

TEST(Elementwise, ScalarBroadcastOnly) {
  Graph<double> g;
  const auto s = g.constant(mat({{2}}));
  const auto m = g.constant(mat({{1, 2}, {3, 4}}));
  EXPECT_EQ(ad::mul(s, m).value(), mat({{2, 4}, {6, 8}}));
  EXPECT_EQ(ad::sub(m, s).value(), mat({{-1, 0}, {1, 2}}));
  EXPECT_THROW(ad::add(m, g.constant(MatD::Zero(1, 2))), DimensionError);
}

TEST(Mse, Examples) {
  Graph<double> g;
  const auto p = g.constant(mat({{1, 0}}));
  const auto t = g.constant(mat({{0, 0}}));
  EXPECT_EQ(ad::mse(p, p).item(), 0.0);
  EXPECT_EQ(ad::mse(p, t).item(), 1.0);
}

TEST(Mse, MatchesScalarLoop) {
  std::mt19937_64 rng(11);
  const auto p = testing::random_matrix(5, 3, rng);
  const auto t = testing::random_matrix(5, 3, rng);
  double acc = 0.0;
  for (Index i = 0; i < 5; ++i) {
    double row = 0.0;
    for (Index c = 0; c < 3; ++c) row += (p(i, c) - t(i, c)) * (p(i, c) - t(i, c));
    acc += row;
  }
  acc /= 5.0;
  Graph<double> g;
  EXPECT_DOUBLE_EQ(ad::mse(g.constant(p), g.constant(t)).item(), acc);
}

TEST(Mse, Errors) {
  Graph<double> g;
  EXPECT_THROW(ad::mse(g.constant(MatD::Zero(2, 3)), g.constant(MatD::Zero(3, 2))), DimensionError);
  EXPECT_THROW(ad::mse(g.constant(MatD::Zero(0, 3)), g.constant(MatD::Zero(0, 3))), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Graph<double> g;
  const auto x = g.variable(mat({{1, 2, 3}}));
  EXPECT_EQ(g.backward(ad::sum(x), std::array{x})[0].value(), MatD::Ones(1, 3));
}

TEST(Backward, UnreachableGetsZero) {
  Graph<double> g;
  const auto x = g.variable(mat({{1, 2}}));
  const auto y = g.variable(mat({{5, 6, 7}}));
  const auto grads = g.backward(ad::sum(x), std::array{x, y});
  EXPECT_EQ(grads[1].value(), MatD::Zero(1, 3));
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  const auto x = g.variable(mat({{1, 2}}));
  EXPECT_THROW(g.backward(x, std::array{x}), DimensionError);
}

TEST(Transformer, Primitives) {
  Graph<double> g;
  const auto s = ad::softmax_rows(g.constant(mat({{0, 0}})));
  EXPECT_EQ(s.value(), mat({{0.5, 0.5}}));
  const auto ln = ad::layer_norm(g.constant(mat({{3, 3, 3, 3}})), g.constant(MatD::Ones(1, 4)),
                                 g.constant(MatD::Zero(1, 4)));
  EXPECT_EQ(ln.value(), MatD::Zero(1, 4));
  const auto q = g.constant(mat({{0.3, -1.2}, {2.0, 0.5}}));
  const auto k = g.constant(mat({{1.0, 4.0}}));
  const auto v = g.constant(mat({{7, 8, 9}}));
  const auto att = ad::scaled_dot_attention(q, k, v);
  EXPECT_EQ(att.value(), mat({{7, 8, 9}, {7, 8, 9}}));
  EXPECT_THROW(ad::softmax_rows(g.constant(MatD::Zero(2, 0))), DimensionError);
}

TEST(Transformer, GeluRejectsSecondOrder) {
  Graph<double> g(GradMode::record_through_grad);
  const auto x = g.variable(mat({{0.3, -0.2}}));
  EXPECT_THROW(g.backward(ad::sum(ad::gelu(x)), std::array{x}), std::logic_error);
}

TEST(GradientProperty, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& pc : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      std::uniform_int_distribution<Index> dim(1, 5);
      const Index m = dim(rng);
      const Index n = dim(rng);
      std::vector<MatD> inputs;
      for (auto [r, c] : pc.shapes(m, n)) {
        if (pc.positive) {
          inputs.push_back(testing::random_matrix(r, c, rng, 0.2, 2.0));
        } else if (pc.away_from_zero) {
          inputs.push_back(testing::random_away_from_zero(r, c, rng, 0.1));
        } else {
          inputs.push_back(testing::random_matrix(r, c, rng));
        }
      }
      const auto builder = [&](Graph<double>& g, const std::vector<Tensor<double>>& x) {
        return probe(g, pc.op(g, x), seed);
      };
      const double err = testing::gradient_check(builder, inputs);
      EXPECT_LT(err, 1e-5) << pc.name << " seed " << seed << " shape " << m << "x" << n;
    }
  }
}

TEST(GradientProperty, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(99);
    Graph<double> g;
    const auto w = g.variable(testing::random_matrix(4, 3, rng));
    const auto x = g.constant(testing::random_matrix(6, 3, rng));
    const auto loss = ad::mse(ad::relu(ad::matmul(x, w, Trans::no, Trans::yes)), g.constant(MatD::Ones(6, 4)));
    const auto grad = g.backward(loss, std::array{w})[0].value();
    return std::make_pair(loss.item(), grad);
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(g1, g2);
}

// One explicit gradient step on L(phi) = ||A phi - b||^2 has Jacobian
// I - 2 eps A^T A; differentiating u^T phi_1 must give that matrix times u.
TEST(SecondOrder, QuadraticInnerStepJacobian) {
  std::mt19937_64 rng(5);
  const MatD a = testing::random_matrix(4, 3, rng);
  const MatD b = testing::random_matrix(4, 1, rng);
  const MatD phi0 = testing::random_matrix(3, 1, rng);
  const MatD u = testing::random_matrix(3, 1, rng);
  const double eps = 0.05;

  Graph<double> g(GradMode::record_through_grad);
  const auto phi = g.variable(phi0);
  const auto residual = ad::sub(ad::matmul(g.constant(a), phi), g.constant(b));
  const auto inner = ad::sum(ad::mul(residual, residual));
  const auto grad = g.backward(inner, std::array{phi})[0];
  const auto phi1 = ad::sub(phi, ad::scale(grad, eps));
  const auto outer = ad::sum(ad::mul(phi1, g.constant(u)));
  const MatD jvp = g.backward(outer, std::array{phi})[0].value();

  const MatD expected = (MatD::Identity(3, 3) - 2.0 * eps * a.transpose() * a) * u;
  EXPECT_LT((jvp - expected).norm() / expected.norm(), 1e-6);
}

// Toy model L(theta, phi) = (theta phi x - y)^2. d/dtheta ||dL/dphi||^2 via
// double backward against finite differences of the closed-form gradient.
TEST(SecondOrder, GradientNormDerivative) {
  const double x = 0.7;
  const double y = -0.4;
  const double theta0 = 1.3;
  const double phi0 = -0.8;
  auto grad_norm_sq = [&](double theta) {
    const double dphi = 2.0 * (theta * phi0 * x - y) * theta * x;
    return dphi * dphi;
  };
  const double h = 1e-5;
  const double expected = (grad_norm_sq(theta0 + h) - grad_norm_sq(theta0 - h)) / (2.0 * h);

  Graph<double> g(GradMode::record_through_grad);
  const auto theta = g.variable(mat({{theta0}}));
  const auto phi = g.variable(mat({{phi0}}));
  const auto r = ad::sub(ad::mul(ad::mul(theta, phi), g.constant(mat({{x}}))), g.constant(mat({{y}})));
  const auto loss = ad::mul(r, r);
  const auto dphi = g.backward(loss, std::array{phi})[0];
  const auto norm_sq = ad::sum(ad::mul(dphi, dphi));
  const double got = g.backward(norm_sq, std::array{theta})[0].item();
  EXPECT_NEAR(got, expected, 1e-6 * std::abs(expected));
}

// Second-order gradients through every primitive the MLP uses, checked by
// finite differences of a first-order gradient.
TEST(SecondOrder, MlpPrimitivesHessianVectorProducts) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    const MatD x0 = testing::random_matrix(5, 3, rng);
    const MatD w0 = testing::random_matrix(4, 3, rng);
    const MatD t0 = testing::random_matrix(5, 4, rng);
    const MatD v = testing::random_matrix(4, 3, rng);
    auto first = [&](Graph<double>& g, const Tensor<double>& w) {
      const auto pre = ad::add_row(ad::matmul(g.constant(x0), w, Trans::no, Trans::yes),
                                   g.constant(MatD::Constant(1, 4, 0.1)));
      const auto y = ad::mul(ad::sin(pre), ad::pow(ad::add_scalar(ad::mul(pre, pre), 1.0), -0.5));
      return ad::mse(ad::relu(y), g.constant(t0));
    };
    // f(w) = <grad L(w), v>
    auto directional = [&](const std::vector<MatD>& p) {
      Graph<double> g;
      const auto w = g.variable(p[0]);
      return (g.backward(first(g, w), std::array{w})[0].value().cwiseProduct(v)).sum();
    };
    Graph<double> g(GradMode::record_through_grad);
    const auto w = g.variable(w0);
    const auto grad = g.backward(first(g, w), std::array{w})[0];
    const auto dir = ad::sum(ad::mul(grad, g.constant(v)));
    const MatD hv = g.backward(dir, std::array{w})[0].value();
    const auto fd = testing::finite_difference(directional, {w0});
    EXPECT_LT(testing::relative_error({hv}, fd), 1e-5) << "seed " << seed;
  }
}

TEST(SecondOrder, FusedBroadcastHessianVectorProducts) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const MatD w0 = testing::random_matrix(4, 3, rng);
    const MatD v = testing::random_matrix(4, 3, rng);
    auto first = [](const Tensor<double>& w) {
      const auto centered = ad::add_col(w, ad::neg(ad::sum_cols(ad::mul(w, w))));
      const auto y = ad::mul_col(ad::mul_row(centered, ad::sum_rows(w)), ad::sum_cols(w));
      const auto z = ad::add_row(y, ad::sum_rows(ad::sin(w)));
      return ad::sum(ad::mul(z, z));
    };
    auto directional = [&](const std::vector<MatD>& p) {
      Graph<double> g;
      const auto w = g.variable(p[0]);
      return (g.backward(first(w), std::array{w})[0].value().cwiseProduct(v)).sum();
    };
    Graph<double> g(GradMode::record_through_grad);
    const auto w = g.variable(w0);
    const auto grad = g.backward(first(w), std::array{w})[0];
    const MatD hv = g.backward(ad::sum(ad::mul(grad, g.constant(v))), std::array{w})[0].value();
    EXPECT_LT(testing::relative_error({hv}, testing::finite_difference(directional, {w0})), 1e-5) << "seed " << seed;
  }
}

}  // namespace
}  // namespace cinr
