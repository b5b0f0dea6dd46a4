#include <gtest/gtest.h>

#include <cmath>

#include "modkit/lngru.hpp"
#include "modkit/random.hpp"

using namespace modkit;

namespace {

struct Instance {
  SequenceModelParams p;
  std::vector<MatrixXd> x, target;
};

Instance random_instance(std::uint64_t seed, int in, int H, int out, int layers, int T, int B) {
  Instance s;
  s.p = random_model(in, H, out, layers, seed);
  auto rng = make_stream(seed, 17);
  // Non-trivial layer-norm gains and offsets so their gradients are exercised.
  for (auto& L : s.p.layers) {
    for (Eigen::Index i = 0; i < L.gain.size(); ++i) {
      L.gain[i] = uniform(rng, 0.5, 1.5);
      L.bias[i] = uniform(rng, -0.5, 0.5);
    }
  }
  for (Eigen::Index i = 0; i < s.p.readout_b.size(); ++i) s.p.readout_b[i] = uniform(rng, -1, 1);
  for (int t = 0; t < T; ++t) {
    MatrixXd x(in, B), y(out, B);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = standard_normal(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = standard_normal(rng);
    s.x.push_back(x);
    s.target.push_back(y);
  }
  return s;
}

double loss(const SequenceModelParams& p, const Instance& s) {
  const auto y = forward_sequence(p, s.x);
  double acc = 0;
  for (std::size_t t = 0; t < y.size(); ++t) acc += 0.5 * (y[t] - s.target[t]).squaredNorm();
  return acc;
}

}  // namespace

TEST(LnGru, ParameterCounts) {
  // Per layer: W (3H x in), U (3H x H), LN gain and offset (3H each);
  // readout out x H + out.
  EXPECT_EQ(parameter_count(3, 32, 1, 2), 9921u);
  EXPECT_EQ(parameter_count(4, 32, 2, 2), 10050u);
  const auto m = zero_model(3, 32, 1, 2);
  EXPECT_EQ(parameter_count(m), 9921u);
  EXPECT_EQ(static_cast<std::size_t>(flatten(m).size()), 9921u);
}

TEST(LnGru, ZeroNetworkOutputsReadoutBias) {
  auto p = zero_model(3, 6, 2, 2);
  p.readout_b << 0.25, -1.5;
  std::vector<MatrixXd> xs(7, MatrixXd::Random(3, 4));
  for (const auto& y : forward_sequence(p, xs)) {
    for (Eigen::Index b = 0; b < 4; ++b) {
      EXPECT_EQ(y(0, b), 0.25);
      EXPECT_EQ(y(1, b), -1.5);
    }
  }
}

TEST(LnGru, FlattenRoundTrip) {
  const auto p = random_model(3, 5, 2, 2, 4);
  auto q = zero_model(3, 5, 2, 2);
  unflatten(flatten(p), q);
  EXPECT_EQ(flatten(q), flatten(p));
  EXPECT_THROW(unflatten(VectorXd::Zero(3), q), Error);
}

TEST(LnGru, ShapeMismatchIsDimensionError) {
  const auto p = random_model(3, 4, 1, 1, 2);
  try {
    forward_sequence(p, {MatrixXd::Zero(2, 1)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(LnGru, NonFiniteInputReportsStep) {
  const auto p = random_model(2, 4, 1, 1, 2);
  std::vector<MatrixXd> xs(5, MatrixXd::Zero(2, 1));
  xs[3](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    forward_sequence(p, xs);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.step(), 3u);
  }
}

TEST(LnGru, HiddenStateCarriesAcrossCalls) {
  const auto p = random_model(2, 5, 1, 2, 8);
  std::vector<MatrixXd> xs;
  for (int t = 0; t < 6; ++t) xs.push_back(MatrixXd::Constant(2, 1, 0.1 * t));
  const auto whole = forward_sequence(p, xs);
  HiddenState h = zero_state(p, 1);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const auto y = model_step(p, h, xs[t], nullptr, t);
    EXPECT_NEAR(y(0, 0), whole[t](0, 0), 1e-14);
  }
}

TEST(LnGru, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = random_instance(seed, 3, 2 + static_cast<int>(seed), 2, seed % 2 ? 2 : 1,
                                   6 + static_cast<int>(seed), 2);
    SequenceCache cache;
    const auto y = forward_sequence(s.p, s.x, &cache);
    std::vector<MatrixXd> dy;
    for (std::size_t t = 0; t < y.size(); ++t) dy.push_back(y[t] - s.target[t]);
    auto G = zero_model(s.p.input_dim, s.p.hidden_dim, s.p.output_dim, s.p.num_layers());
    backward_sequence(s.p, cache, dy, G);
    const VectorXd theta = flatten(s.p), g = flatten(G);
    auto q = s.p;
    double worst = 0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double h = 1e-5 * (1 + std::abs(theta[i]));
      VectorXd t2 = theta;
      t2[i] += h;
      unflatten(t2, q);
      const double lp = loss(q, s);
      t2[i] -= 2 * h;
      unflatten(t2, q);
      const double lm = loss(q, s);
      const double fd = (lp - lm) / (2 * h);
      const double rel = std::abs(fd - g[i]) / std::max(1e-8, std::abs(fd) + std::abs(g[i]));
      worst = std::max(worst, rel);
    }
    EXPECT_LE(worst, 1e-4) << "seed " << seed;
  }
}

TEST(LnGru, InputGradientMatchesFiniteDifferences) {
  auto s = random_instance(11, 3, 4, 1, 2, 5, 1);
  SequenceCache cache;
  const auto y = forward_sequence(s.p, s.x, &cache);
  std::vector<MatrixXd> dy;
  for (std::size_t t = 0; t < y.size(); ++t) dy.push_back(y[t] - s.target[t]);
  auto G = zero_model(3, 4, 1, 2);
  std::vector<MatrixXd> dx;
  backward_sequence(s.p, cache, dy, G, &dx);
  ASSERT_EQ(dx.size(), s.x.size());
  for (std::size_t t = 0; t < s.x.size(); ++t) {
    for (Eigen::Index i = 0; i < 3; ++i) {
      const double h = 1e-6;
      auto sp = s, sm = s;
      sp.x[t](i, 0) += h;
      sm.x[t](i, 0) -= h;
      const double fd = (loss(s.p, sp) - loss(s.p, sm)) / (2 * h);
      EXPECT_NEAR(dx[t](i, 0), fd, 1e-6 * (1 + std::abs(fd)));
    }
  }
}
