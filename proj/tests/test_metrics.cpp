#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "modkit/metrics.hpp"
#include "modkit/random.hpp"

using namespace modkit;

namespace {

const Grid kGrid = Grid::make(200, 1e-5);

SampledTrace sine(double amp, int K = 200) {
  const auto g = Grid::make(K, 1e-5);
  SampledTrace s(g);
  for (int k = 0; k < K; ++k) s[static_cast<std::size_t>(k)] = amp * std::sin(2 * std::numbers::pi * k / K);
  return s;
}

SampledTrace rotate(const SampledTrace& s, int shift) {
  SampledTrace out = s;
  for (long k = 0; k < static_cast<long>(s.size()); ++k) out[static_cast<std::size_t>(k)] = s.at_cyclic(k - shift);
  return out;
}

}  // namespace

TEST(CurrentStress, Basics) {
  EXPECT_EQ(current_stress(SampledTrace(kGrid, 0.0)), 0.0);
  const double A = 5.0;
  EXPECT_NEAR(current_stress(sine(A)), 2 * A, A * std::pow(2 * std::numbers::pi / 200, 2) / 2);
  EXPECT_THROW(current_stress(SampledTrace{}), Error);
}

TEST(CurrentStress, ShiftInvariantAndLinear) {
  const auto i = PeriodicCurrent(CircuitParams{}, {0.2, 0.3, 0.1}, 200, 160).sample(kGrid);
  const double s = current_stress(i);
  for (int shift : {1, 17, 100, 199}) EXPECT_EQ(current_stress(rotate(i, shift)), s);
  auto j = i;
  for (double& x : j.values) x *= 2.5;
  EXPECT_NEAR(current_stress(j), 2.5 * s, 1e-12 * s);
}

TEST(ConductionLoss, ZeroAndConstantCases) {
  CircuitParams c;
  const SampledTrace zero(kGrid, 0.0), one(kGrid, 1.0);
  EXPECT_EQ(conduction_loss(zero, one, one, c), 0.0);
  const SampledTrace I(kGrid, 3.0);
  EXPECT_NEAR(device_conduction_loss(one, I, c.R_on), c.R_on * 9.0, 1e-15);
}

TEST(ConductionLoss, TwoDevicesPerBridgeAtEveryInstant) {
  // Exactly one device per leg conducts, so the total equals
  // 2 R_on (1 + n^2) mean(i^2) whatever the switching pattern.
  CircuitParams c;
  c.n = 1.25;
  auto rng = make_stream(3);
  for (int trial = 0; trial < 20; ++trial) {
    const PhaseShiftTuple t{uniform01(rng), uniform01(rng), uniform01(rng)};
    const auto s = switching_functions(t, kGrid);
    const auto i = PeriodicCurrent(c, t, 200, 160).sample(kGrid);
    double ms = 0;
    for (double x : i.values) ms += x * x;
    ms /= kGrid.size();
    EXPECT_NEAR(conduction_loss(i, s.primary, s.secondary, c), 2 * c.R_on * (1 + c.n * c.n) * ms,
                1e-12 * (1 + ms));
  }
}

TEST(ConductionLoss, ScalingLaws) {
  CircuitParams c;
  const PhaseShiftTuple t{0.1, 0.25, 0.3};
  const auto s = switching_functions(t, kGrid);
  auto i = PeriodicCurrent(c, t, 200, 160).sample(kGrid);
  const double base = conduction_loss(i, s.primary, s.secondary, c);
  auto c2 = c;
  c2.R_on *= 3;
  EXPECT_NEAR(conduction_loss(i, s.primary, s.secondary, c2), 3 * base, 1e-12 * base);
  for (double& x : i.values) x *= 2;
  EXPECT_NEAR(conduction_loss(i, s.primary, s.secondary, c), 4 * base, 1e-12 * base);
  EXPECT_THROW(conduction_loss(i, SampledTrace(Grid::make(100, 1e-5)), s.secondary, c), Error);
}

TEST(Quadrature, TrapezoidAndSimpsonAgree) {
  const auto s = sine(1.0, 200);
  std::vector<double> f;
  for (double x : s.values) f.push_back(std::exp(x) * (1.5 + x));
  const double t = periodic_mean(f, QuadratureRule::Trapezoid);
  const double p = periodic_mean(f, QuadratureRule::Simpson);
  EXPECT_NEAR(t, p, 1e-3 * std::abs(t));
  std::vector<double> odd(7, 1.0);
  EXPECT_THROW(periodic_mean(odd, QuadratureRule::Simpson), Error);
}

TEST(Zvs, ZeroCurrentIsHard) {
  const auto inst = commutation_instants({0.2, 0.3, 0.1}, kGrid);
  for (const auto& z : soft_switching_check(SampledTrace(kGrid, 0.0), inst)) {
    EXPECT_FALSE(z.zvs);
    EXPECT_EQ(z.margin, 0.0);
  }
}

TEST(Zvs, SignFlipFlipsEveryFlag) {
  const PhaseShiftTuple t{0.1, 0.3, 0.2};
  const auto inst = commutation_instants(t, kGrid);
  auto i = PeriodicCurrent(CircuitParams{}, t, 200, 160).sample(kGrid);
  const auto a = soft_switching_check(i, inst);
  for (double& x : i.values) x = -x;
  const auto b = soft_switching_check(i, inst);
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].current != 0.0) EXPECT_NE(a[k].zvs, b[k].zvs);
  }
}

TEST(Zvs, ShiftInvariance) {
  const PhaseShiftTuple t{0.1, 0.3, 0.2};
  auto inst = commutation_instants(t, kGrid);
  const auto i = PeriodicCurrent(CircuitParams{}, t, 200, 160).sample(kGrid);
  const auto a = soft_switching_check(i, inst);
  const int shift = 37;
  for (auto& c : inst) {
    const long idx = (std::lround(c.time / kGrid.dt()) + shift) % kGrid.size();
    c.time = kGrid.time(static_cast<int>(idx));
  }
  const auto b = soft_switching_check(rotate(i, shift), inst);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].zvs, b[k].zvs);
}

TEST(Zvs, OffGridInstantIsDomainError) {
  std::vector<Commutation> c{{0, true, 0.3 * kGrid.dt()}};
  try {
    soft_switching_check(SampledTrace(kGrid, 1.0), c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Domain);
  }
}

TEST(Zvs, HeavyLoadSpsIsFullySoft) {
  const auto r = oracle_report(CircuitParams{}, 200, 200, {0, 0.4, 0});
  EXPECT_GT(r.average_power, 800.0);
  EXPECT_EQ(r.zvs.size(), 8u);
  EXPECT_EQ(r.hard_switching_count(), 0);
}

TEST(Report, OracleMatchesSampledPath) {
  CircuitParams c;
  const PhaseShiftTuple t{0.2, 0.3, 0.1};
  const auto exact = oracle_report(c, 200, 160, t);
  const auto sampled = report_from_trace(oracle_state(c, 200, 160, t, kGrid), t, c);
  EXPECT_NEAR(exact.current_stress, sampled.current_stress, 1e-9 * exact.current_stress);
  EXPECT_NEAR(exact.average_power, sampled.average_power, 1e-3 * exact.average_power);
  EXPECT_NEAR(exact.conduction_loss, sampled.conduction_loss, 1e-3 * exact.conduction_loss);
  for (std::size_t k = 0; k < exact.zvs.size(); ++k) EXPECT_EQ(exact.zvs[k].zvs, sampled.zvs[k].zvs);
}

TEST(Report, ZeroTransferMatchedVoltages) {
  const auto r = evaluate_performance(CircuitParams{}, 200, 200, {0, 0, 0}, OracleBackend{});
  EXPECT_NEAR(r.average_power, 0.0, 1e-9);
  EXPECT_NEAR(r.current_stress, 0.0, 1e-9);
}

TEST(Report, InvariantsOverSweep) {
  auto rng = make_stream(100);
  CircuitParams c;
  for (int trial = 0; trial < 100; ++trial) {
    const PhaseShiftTuple t{uniform01(rng), uniform(rng, 0.02, 1.0), uniform01(rng)};
    const auto a = evaluate_performance(c, 200, 160, t, OracleBackend{});
    const auto b = evaluate_performance(c, 200, 160, t, OracleBackend{});
    EXPECT_GE(a.current_stress, 0.0);
    EXPECT_GE(a.conduction_loss, 0.0);
    EXPECT_GT(a.efficiency_proxy, 0.0);
    EXPECT_LE(a.efficiency_proxy, 1.0);
    EXPECT_EQ(a.current_stress, b.current_stress);
    EXPECT_EQ(a.average_power, b.average_power);
  }
}

TEST(Report, NullSurrogateIsAnError) {
  EXPECT_THROW(evaluate_performance(CircuitParams{}, 200, 160, {0, 0.2, 0},
                                    static_cast<const SurrogatePair*>(nullptr)),
               Error);
}
