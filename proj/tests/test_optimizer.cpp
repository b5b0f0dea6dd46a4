#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

#include "modkit/optimizer.hpp"

using namespace modkit;

namespace {

double sphere(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += (v - 0.3) * (v - 0.3);
  return s;
}

constexpr Algorithm kAll[] = {Algorithm::DE, Algorithm::PSO, Algorithm::GA};

}  // namespace

TEST(Optimizer, SphereDe) {
  OptimizerConfig cfg;
  const auto r = optimize(Algorithm::DE, sphere, Bounds::unit(3), cfg);
  EXPECT_LE(r.best_value, 1e-6);
  EXPECT_EQ(r.evaluations, 3000);
  EXPECT_EQ(r.trace.size(), 100u);
}

TEST(Optimizer, AllAlgorithmsConvergeOnSphere) {
  for (auto a : kAll) {
    OptimizerConfig cfg;
    const auto r = optimize(a, sphere, Bounds::unit(3), cfg);
    EXPECT_LE(r.best_value, 1e-3) << algorithm_name(a);
    for (double v : r.best) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Optimizer, TraceIsNonIncreasing) {
  auto rastrigin = [](std::span<const double> x) {
    double s = 10.0 * static_cast<double>(x.size());
    for (double v : x) s += v * v - 10 * std::cos(2 * std::numbers::pi * v);
    return s;
  };
  for (auto a : kAll) {
    OptimizerConfig cfg;
    cfg.generations = 40;
    const auto r = optimize(a, rastrigin, {{-5, -5, -5, -5}, {5, 5, 5, 5}}, cfg);
    for (std::size_t g = 1; g < r.trace.size(); ++g) EXPECT_LE(r.trace[g], r.trace[g - 1]);
    EXPECT_EQ(r.trace.back(), r.best_value);
  }
}

TEST(Optimizer, DeterministicPerSeed) {
  for (auto a : kAll) {
    OptimizerConfig cfg;
    cfg.generations = 20;
    cfg.seed = 9;
    const auto r1 = optimize(a, sphere, Bounds::unit(2), cfg);
    const auto r2 = optimize(a, sphere, Bounds::unit(2), cfg);
    EXPECT_EQ(r1.trace, r2.trace);
    EXPECT_EQ(r1.best, r2.best);
    cfg.seed = 10;
    EXPECT_NE(optimize(a, sphere, Bounds::unit(2), cfg).trace, r1.trace);
  }
}

TEST(Optimizer, ParallelMatchesSerial) {
  for (auto a : kAll) {
    OptimizerConfig cfg;
    cfg.generations = 15;
    setenv("MODKIT_THREADS", "0", 1);
    const auto serial = optimize(a, sphere, Bounds::unit(3), cfg);
    setenv("MODKIT_THREADS", "4", 1);
    const auto parallel = optimize(a, sphere, Bounds::unit(3), cfg);
    unsetenv("MODKIT_THREADS");
    EXPECT_EQ(serial.trace, parallel.trace);
    EXPECT_EQ(serial.best, parallel.best);
  }
}

TEST(Optimizer, FailingCandidatesBecomeInfinite) {
  auto f = [](std::span<const double> x) {
    if (x[0] > 0.5) throw Error(ErrorKind::Numeric, "boom");
    if (x[0] > 0.4) return std::nan("");
    return x[0];
  };
  OptimizerConfig cfg;
  cfg.generations = 10;
  const auto r = optimize(Algorithm::PSO, f, Bounds::unit(1), cfg);
  EXPECT_LE(r.best[0], 0.4);
  EXPECT_TRUE(std::isfinite(r.best_value));
}

TEST(Optimizer, DegenerateBounds) {
  OptimizerConfig cfg;
  try {
    optimize(Algorithm::DE, sphere, {{0, 0}, {1, 0}}, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Domain);
  }
  EXPECT_THROW(optimize(Algorithm::DE, sphere, {{0}, {1, 1}}, cfg), Error);
}

TEST(Optimizer, InitialPointsAreUsed) {
  OptimizerConfig cfg;
  cfg.generations = 1;
  cfg.initial = {{0.3, 0.3}};
  const auto r = optimize(Algorithm::GA, sphere, Bounds::unit(2), cfg);
  EXPECT_EQ(r.best_value, 0.0);
}

TEST(Optimizer, Names) {
  for (auto a : kAll) EXPECT_EQ(algorithm_from_name(algorithm_name(a)), a);
  EXPECT_EQ(algorithm_from_name("pso"), Algorithm::PSO);
  EXPECT_FALSE(algorithm_from_name("SA"));
}
