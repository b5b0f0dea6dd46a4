#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "modkit/metrics.hpp"
#include "modkit/surrogate.hpp"

using namespace modkit;

namespace {

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    DatasetConfig cfg;
    cfg.sample_count = 20;
    cfg.splits = {0.5, 0.25, 0.25};
    return generate_dataset(cfg);
  }();
  return ds;
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.modnet_epochs = epochs;
  cfg.learning_rate = 3e-3;
  cfg.collocation_count = 8;
  cfg.validate_every = 5;
  return cfg;
}

// Explicit-Euler trajectory consistent with the residual's indexing.
std::vector<double> euler(const CircuitParams& c, const std::vector<double>& vp,
                          const std::vector<double>& vs, double dt, double i0) {
  std::vector<double> i(vp.size());
  i[0] = i0;
  for (std::size_t k = 0; k + 1 < i.size(); ++k) {
    i[k + 1] = i[k] + dt / c.L * (vp[k + 1] - c.n * vs[k + 1] - c.R_L * i[k]);
  }
  return i;
}

}  // namespace

TEST(PhysicsResidual, ZeroForcing) {
  CircuitParams c;
  const std::vector<double> z(10, 0.0), v(10, 120.0);
  for (double r : physics_residual(z, z, v, v, c, 5e-8)) EXPECT_EQ(r, 0.0);
}

TEST(PhysicsResidual, EulerTrajectoryIsExact) {
  CircuitParams c;
  const auto grid = Grid::make(200, 1e-5);
  const auto v = ideal_bridge_voltages({0.2, 0.3, 0.1}, 200, 160, grid);
  const auto i = euler(c, v.v_p.values, v.v_s.values, grid.dt(), -3.0);
  double peak = 0;
  for (double x : i) peak = std::max(peak, std::abs(x));
  for (double r : normalized_physics_residual(i, i, v.v_p.values, v.v_s.values, c, grid.dt(), peak)) {
    EXPECT_LE(std::abs(r), 1e-12);
  }
}

TEST(PhysicsResidual, LinearInInductance) {
  CircuitParams c;
  const std::vector<double> ip{0, 1, 3}, it{0.5, 1.5, 2}, v(3, 0.0);
  const auto r1 = physics_residual(ip, it, v, v, c, 0.0);
  c.L *= 2;
  const auto r2 = physics_residual(ip, it, v, v, c, 0.0);
  for (std::size_t k = 0; k < r1.size(); ++k) EXPECT_EQ(r2[k], 2 * r1[k]);
}

TEST(PhysicsResidual, LengthMismatch) {
  CircuitParams c;
  EXPECT_THROW(physics_residual({1, 2}, {1, 2, 3}, {1, 2, 3}, {1, 2, 3}, c, 1e-8), Error);
}

TEST(LossCir, HandCase) {
  const double l = loss_cir({{0.1, 0.0}}, {{0.0, 0.0}}, {{0.5, 0.0}}, 1.0, 1.0);
  EXPECT_NEAR(l, 0.13, 1e-15);
}

TEST(LossCir, DecompositionIsExact) {
  const std::vector<std::vector<double>> p{{0.3, -1.2, 0.7}, {2.0, 0.1, -0.4}};
  const std::vector<std::vector<double>> t{{0.1, -1.0, 0.2}, {1.5, 0.3, -0.1}};
  const std::vector<std::vector<double>> r{{0.05, 0.2}, {-0.3, 0.01}};
  const double ld = loss_cir(p, t, r, 1, 0), lp = loss_cir(p, t, r, 0, 1);
  for (double a : {0.0, 0.3, 1.0, 2.5}) {
    for (double b : {0.0, 0.7, 1.0, 4.0}) {
      EXPECT_EQ(loss_cir(p, t, r, a, b), a * ld + b * lp);
    }
  }
  double mse = 0;
  for (int j = 0; j < 2; ++j)
    for (int k = 0; k < 3; ++k) mse += std::pow(p[j][k] - t[j][k], 2);
  EXPECT_DOUBLE_EQ(ld, mse / 6);
  EXPECT_EQ(loss_cir(t, t, {{0.0}}, 1, 1), 0.0);
  EXPECT_THROW(loss_cir(p, t, r, -1, 1), Error);
}

TEST(ModNetLoss, Properties) {
  const auto grid = Grid::make(200, 1e-5);
  const auto ideal = ideal_bridge_voltages({0.2, 0.3, 0.1}, 200, 160, grid);
  std::vector<BridgeVoltages> I{ideal};
  EXPECT_EQ(modnet_loss(I, I, I, 1, 1, 3), 0.0);

  auto noisy = ideal;
  for (std::size_t k = 0; k < noisy.v_p.size(); ++k) noisy.v_p[k] += std::sin(0.3 * k);
  std::vector<BridgeVoltages> N{noisy};
  const auto t = modnet_loss_terms(N, I, I, 1, 0, 3);
  double mse = 0;
  for (std::size_t k = 0; k < noisy.v_p.size(); ++k) mse += std::pow(std::sin(0.3 * k), 2);
  EXPECT_NEAR(t.total, mse / (2.0 * grid.size()), 1e-12);
  // A window of half the period covers every sample.
  EXPECT_EQ(modnet_loss_terms(N, I, I, 0, 1, grid.size() / 2).physics, 0.0);
  EXPECT_THROW(modnet_loss(N, I, I, 1, -1, 3), Error);
}

TEST(Normalizer, RoundTrip) {
  const auto& ds = small_dataset();
  const auto n = Normalizer::fit(ds.select(SplitName::Train));
  for (int c = 0; c < 3; ++c) {
    for (double x : {-312.5, -1.0, 0.0, 3.25, 199.9}) {
      EXPECT_NEAR(n.denormalize(c, n.normalize(c, x)), x, 1e-12 * (1 + std::abs(x)));
    }
  }
}

TEST(Rollout, ZeroPairContracts) {
  const auto& ds = small_dataset();
  const auto pair = make_surrogate(ds, InitMode::Zero, 1);
  const PhaseShiftTuple t{0.2, 0.3, 0.1};
  // The voltage head is residual on the commanded ideal level.
  const auto v = modnet_rollout(pair, t);
  const auto ideal = ideal_bridge_voltages(t, pair.v1, pair.v2, pair.grid);
  ASSERT_EQ(v.v_p.size(), static_cast<std::size_t>(pair.grid.size()));
  for (std::size_t k = 0; k < v.v_p.size(); ++k) {
    EXPECT_NEAR(v.v_p[k], ideal.v_p[k], 1e-9);
    EXPECT_NEAR(v.v_s[k], ideal.v_s[k], 1e-9);
  }
  const auto i = cirnet_rollout(pair, t, 2.5);
  ASSERT_EQ(i.size(), static_cast<std::size_t>(pair.grid.size()));
  for (double x : i.values) EXPECT_NEAR(x, 2.5, 1e-12);
}

TEST(Evaluate, ZeroPairIsHoldFirstSamplePredictor) {
  const auto& ds = small_dataset();
  const auto pair = make_surrogate(ds, InitMode::Zero, 1);
  double acc = 0, n = 0;
  for (const auto* s : ds.select(SplitName::Test)) {
    for (double x : s->i_L.values) {
      acc += std::abs(x - s->i_L[0]);
      n += 1;
    }
  }
  EXPECT_NEAR(evaluate_mae(pair, ds, SplitName::Test), acc / n, 1e-9);
}

TEST(Evaluate, PerfectAndZeroPredictors) {
  const auto& ds = small_dataset();
  std::vector<SampledTrace> truth, zero;
  double acc = 0, n = 0;
  for (const auto* s : ds.select(SplitName::Validation)) {
    truth.push_back(s->i_L);
    zero.emplace_back(s->i_L.grid, 0.0);
    for (double x : s->i_L.values) {
      acc += std::abs(x);
      n += 1;
    }
  }
  EXPECT_EQ(mean_absolute_error(truth, truth), 0.0);
  EXPECT_NEAR(mean_absolute_error(zero, truth), acc / n, 1e-12);
}

TEST(Train, LossDecreasesAndIsDeterministic) {
  const auto& ds = small_dataset();
  const auto cfg = quick_config(15);
  const auto a = train(make_surrogate(ds, InitMode::Random, 3), ds, cfg);
  const auto b = train(make_surrogate(ds, InitMode::Random, 3), ds, cfg);
  EXPECT_EQ(flatten(a.pair.cirnet), flatten(b.pair.cirnet));
  EXPECT_EQ(flatten(a.pair.modnet), flatten(b.pair.modnet));
  double first = NAN, last = NAN;
  for (const auto& e : a.history) {
    if (e.stage != "cirnet") continue;
    if (std::isnan(first)) first = e.loss;
    last = e.loss;
  }
  EXPECT_LT(last, first);
  const auto m = evaluate_mae_all(a.pair, ds);
  EXPECT_TRUE(std::isfinite(m.validation));
}

TEST(Train, RejectsInvalidConfig) {
  const auto& ds = small_dataset();
  auto cfg = quick_config(1);
  cfg.lambda_d = cfg.lambda_p = 0;
  EXPECT_THROW(train(make_surrogate(ds, InitMode::Zero, 1), ds, cfg), Error);
  cfg = quick_config(1);
  cfg.learning_rate = 0;
  EXPECT_THROW(train(make_surrogate(ds, InitMode::Zero, 1), ds, cfg), Error);
}

TEST(Checkpoint, RoundTrip) {
  const auto& ds = small_dataset();
  const auto pair = make_surrogate(ds, InitMode::Random, 5);
  const auto path = std::filesystem::temp_directory_path() / "modkit_test_ckpt.json";
  save_checkpoint(pair, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(flatten(back.cirnet), flatten(pair.cirnet));
  EXPECT_EQ(flatten(back.modnet), flatten(pair.modnet));
  EXPECT_EQ(back.norm.mean, pair.norm.mean);
  EXPECT_EQ(back.grid, pair.grid);
  EXPECT_EQ(back.v2, pair.v2);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), Error);
}

TEST(SurrogateBackend, TrainedStressWithinTenPercentOfOracle) {
  DatasetConfig dc;
  dc.sample_count = 40;
  dc.splits = {0.5, 0.25, 0.25};
  const auto ds = generate_dataset(dc);
  auto cfg = quick_config(150);
  const auto res = train(make_surrogate(ds, InitMode::Random, 1, VoltageSource::Ideal), ds, cfg);
  const auto* held = ds.select(SplitName::Test).front();
  const auto o = evaluate_performance(dc.circuit, 200, 160, held->tuple, OracleBackend{});
  const auto s = evaluate_performance(dc.circuit, 200, 160, held->tuple, &res.pair);
  EXPECT_LE(std::abs(s.current_stress - o.current_stress), 0.10 * o.current_stress);
  EXPECT_THROW(evaluate_performance(dc.circuit, 200, 150, held->tuple, &res.pair), Error);
}
