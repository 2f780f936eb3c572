#include <gtest/gtest.h>

#include "spex/nn.hpp"
#include "support.hpp"

using namespace spex;
using spex::testing::central_difference;
using spex::testing::max_rel_error;

namespace {

std::vector<double*> parameter_pointers(Network& net) {
  std::vector<double*> out;
  for_each_parameter(net, [&](double& v) { out.push_back(&v); });
  return out;
}

double weighted_output(const Network& net, const Matrix& pts, const Matrix& g) {
  return forward(net, pts).first.cwiseProduct(g).sum();
}

}  // namespace

TEST(FeatureMap, Widths) {
  for (int p = 1; p <= 3; ++p)
    for (int deg = 0; deg <= 6; ++deg) {
      FeatureMap poly{FeatureKind::polynomial, p, deg}, four{FeatureKind::fourier, p, deg};
      EXPECT_EQ(poly.width(), static_cast<int>(std::pow(deg + 1, p)));
      EXPECT_EQ(four.width(), p * (deg + 1));
      Matrix pts = Matrix::Constant(2, p, 0.5);
      EXPECT_EQ(poly(pts).cols(), poly.width());
      EXPECT_EQ(four(pts).cols(), four.width());
    }
}

TEST(FeatureMap, PolynomialEmitsEveryMonomial) {
  FeatureMap poly{FeatureKind::polynomial, 2, 2};
  Matrix pts(1, 2);
  pts << 0.5, -3.0;
  const Matrix f = poly(pts);
  std::vector<double> got(f.data(), f.data() + f.size()), want;
  for (int i = 0; i <= 2; ++i)
    for (int j = 0; j <= 2; ++j) want.push_back(std::pow(0.5, i) * std::pow(-3.0, j));
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_DOUBLE_EQ(got[k], want[k]);
}

TEST(FeatureMap, FourierValues) {
  FeatureMap four{FeatureKind::fourier, 2, 3};
  Matrix pts(1, 2);
  pts << 0.25, -0.5;
  const Matrix f = four(pts);
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i <= 3; ++i) EXPECT_NEAR(f(0, j * 4 + i), std::cos(i * std::numbers::pi * pts(0, j)), 1e-15);
}

TEST(Gelu, MatchesLiteralFormula) {
  for (double x = -6.0; x <= 6.0; x += 0.37) {
    const double lit = 0.5 * x * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (x + 0.044715 * std::pow(x, 3))));
    EXPECT_NEAR(gelu(x), lit, 1e-15 * std::max(1.0, std::abs(x)));
    const double h = 1e-6;
    EXPECT_NEAR(gelu_derivative(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-9);
  }
}

TEST(Forward, ZeroWeightsGiveBias) {
  Rng rng{0};
  Network net = make_network({FeatureKind::raw, 2, 0}, {1, 4, 3, {}, false}, rng);
  for_each_parameter(net, [](double& v) { v = 0.0; });
  net.towers[0].layers.back().b << 0.5, -1.0, 2.0;
  Matrix pts = uniform_matrix(rng, 5, 2, -1, 1);
  const Matrix out = forward(net, pts).first;
  for (Eigen::Index k = 0; k < 5; ++k) {
    EXPECT_EQ(out(k, 0), 0.5);
    EXPECT_EQ(out(k, 1), -1.0);
    EXPECT_EQ(out(k, 2), 2.0);
  }
}

TEST(Forward, IdentityLinearLayer) {
  Rng rng{0};
  Network net = make_network({FeatureKind::raw, 3, 0}, {0, 1, 3, {}, false}, rng);
  net.towers[0].layers[0].W = Matrix::Identity(3, 3);
  net.towers[0].layers[0].b.setZero();
  Matrix pts = uniform_matrix(rng, 6, 3, -1, 1);
  EXPECT_TRUE(forward(net, pts).first == pts);
}

TEST(Forward, Deterministic) {
  const Rng rng{0};
  Network a = make_network({FeatureKind::polynomial, 1, 6}, {2, 16, 3, {}, false}, rng);
  Network b = make_network({FeatureKind::polynomial, 1, 6}, {2, 16, 3, {}, false}, rng);
  Rng pr{4};
  Matrix pts = uniform_matrix(pr, 32, 1, -1, 1);
  EXPECT_TRUE(forward(a, pts).first == forward(b, pts).first);
  EXPECT_THROW(forward(a, Matrix::Zero(3, 2)), ContractViolation);
}

TEST(Backward, ZeroGradIn) {
  const Rng rng{0};
  Network net = make_network({FeatureKind::raw, 1, 0}, {2, 8, 2, {}, false}, rng);
  Matrix pts = Matrix::Constant(4, 1, 0.3);
  auto [out, tape] = forward(net, pts);
  for (double v : flatten(backward(net, tape, Matrix::Zero(4, 2)))) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(backward(net, tape, Matrix::Zero(3, 2)), ContractViolation);
}

TEST(Backward, FiniteDifferenceSuite) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng{seed};
    const int p = 1 + static_cast<int>(seed % 2);
    const FeatureMap fmap{seed % 3 == 0 ? FeatureKind::raw : (seed % 3 == 1 ? FeatureKind::polynomial : FeatureKind::fourier), p, 3};
    Architecture arch{2, 8, 3, {}, false};
    if (seed % 4 == 3) arch = {2, 8, 3, singleton_heads(3), true};
    Network net = make_network(fmap, arch, rng);
    for_each_parameter(net, [&](double& v) { v += 0.1 * rng.normal(); });  // non-zero biases too
    const Matrix pts = uniform_matrix(rng, 7, p, -1, 1);
    const Matrix g = normal_matrix(rng, 7, 3);
    auto [out, tape] = forward(net, pts);
    const auto analytic = flatten(backward(net, tape, g));
    const auto numeric = central_difference([&] { return weighted_output(net, pts, g); }, parameter_pointers(net));
    EXPECT_LE(max_rel_error(analytic, numeric), 1e-5) << "seed " << seed;
  }
}

TEST(Backward, StopGradientIsExact) {
  // shared trunk: head-0-exclusive parameters are row 0 of the last layer
  const Rng rng{1};
  Network net = make_network({FeatureKind::polynomial, 1, 4}, {2, 8, 3, singleton_heads(3), false}, rng);
  Rng pr{2};
  const Matrix pts = uniform_matrix(pr, 10, 1, -1, 1);
  auto [out, tape] = forward(net, pts);
  tape.stop_gradient({0});
  Matrix g = Matrix::Zero(10, 3);
  g.col(0) = normal_matrix(pr, 10, 1);
  for (double v : flatten(backward(net, tape, g))) EXPECT_EQ(v, 0.0);
  g.col(1).setOnes();
  const auto grads = backward(net, tape, g);
  const auto& last = grads[0].layers.back();
  for (Eigen::Index j = 0; j < last.W.cols(); ++j) EXPECT_EQ(last.W(0, j), 0.0);
  EXPECT_EQ(last.b[0], 0.0);
  EXPECT_NE(last.W.row(1).norm(), 0.0);

  // strict towers: the whole tower of a stopped head is untouched
  Network strict = make_network({FeatureKind::polynomial, 1, 4}, {2, 8, 3, singleton_heads(3), true}, rng);
  auto [o2, t2] = forward(strict, pts);
  t2.stop_gradient({0});
  const auto gs = backward(strict, t2, Matrix::Ones(10, 3));
  for_each_parameter(Gradients{gs[0]}, [](double v) { EXPECT_EQ(v, 0.0); });
  double other = 0.0;
  for_each_parameter(Gradients{gs[1]}, [&](double v) { other += std::abs(v); });
  EXPECT_GT(other, 0.0);
}

TEST(Network, HeadPartitionValidation) {
  const Rng rng{0};
  const FeatureMap f{FeatureKind::raw, 1, 0};
  EXPECT_THROW(make_network(f, {1, 4, 3, {{0, 1}, {1, 2}}, false}, rng), ContractViolation);
  EXPECT_THROW(make_network(f, {1, 4, 3, {{0}, {2}}, false}, rng), ContractViolation);
  EXPECT_THROW(make_network(f, {1, 4, 3, {}, true}, rng), ContractViolation);
  const Network net = make_network(f, {2, 5, 3, {{0, 2}, {1}}, true}, rng);
  EXPECT_EQ(net.towers.size(), 2u);
  EXPECT_EQ(net.parameter_count(), 2u * (1 * 5 + 5 + 5 * 5 + 5) + (5 * 2 + 2) + (5 * 1 + 1));
}

TEST(Adam, ZeroGradsKeepParameters) {
  const Rng rng{0};
  Network net = make_network({FeatureKind::raw, 1, 0}, {1, 4, 2, {}, false}, rng);
  const Network before = net;
  auto state = make_adam(net, 1e-3);
  adam_step(net, zero_gradients(net), state);
  for (std::size_t l = 0; l < net.towers[0].layers.size(); ++l)
    EXPECT_TRUE(net.towers[0].layers[l].W == before.towers[0].layers[l].W);
}

TEST(Adam, UnitGradientMovesByLr) {
  const Rng rng{0};
  Network net = make_network({FeatureKind::raw, 1, 0}, {0, 1, 1, {}, false}, rng);
  net.towers[0].layers[0].W(0, 0) = 0.7;
  auto state = make_adam(net, 1e-3);
  Gradients g = zero_gradients(net);
  g[0].layers[0].W(0, 0) = 1.0;
  adam_step(net, g, state);
  EXPECT_NEAR(net.towers[0].layers[0].W(0, 0), 0.7 - 1e-3, 1e-10);
}

TEST(Adam, QuadraticDecreases) {
  const Rng rng{0};
  Network net = make_network({FeatureKind::raw, 1, 0}, {0, 1, 1, {}, false}, rng);
  net.towers[0].layers[0].W(0, 0) = 2.0;
  net.towers[0].layers[0].b[0] = -1.0;
  auto loss = [&] {
    const double w = net.towers[0].layers[0].W(0, 0), b = net.towers[0].layers[0].b[0];
    return w * w + b * b;
  };
  auto state = make_adam(net, 0.1);
  double prev = loss();
  for (int s = 0; s < 2; ++s) {
    Gradients g = zero_gradients(net);
    g[0].layers[0].W(0, 0) = 2 * net.towers[0].layers[0].W(0, 0);
    g[0].layers[0].b[0] = 2 * net.towers[0].layers[0].b[0];
    adam_step(net, g, state);
    EXPECT_LT(loss(), prev);
    prev = loss();
  }
}

TEST(Adam, NonFiniteGradientNamesLayer) {
  const Rng rng{0};
  Network net = make_network({FeatureKind::raw, 1, 0}, {2, 4, 2, {}, false}, rng);
  auto state = make_adam(net, 1e-3);
  Gradients g = zero_gradients(net);
  g[0].layers[1].W(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(net, g, state);
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.layer(), "tower 0 layer 1");
  }
  EXPECT_EQ(state.step, 0u);
}
