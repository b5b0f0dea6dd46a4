#pragma once

// Waveform-derived converter metrics.
//
// ZVS polarity table. i_L > 0 flows out of primary leg A, through the
// inductor and transformer, into secondary leg C. A commutation is soft when
// the current discharges the switching node toward the incoming switch:
//
//   leg  rising (upper on)  falling (upper off)
//   A    i_L < 0            i_L > 0
//   B    i_L > 0            i_L < 0
//   C    i_L > 0            i_L < 0
//   D    i_L < 0            i_L > 0
//
// i_L == 0 at the instant counts as hard switching.
//
// Device attribution for conduction loss. Each bridge has devices
// (upper A/C, lower A/C, upper B/D, lower B/D) = (S1, S2, S3, S4):
//   s = +1  -> S1, S4     s = -1 -> S2, S3     s = 0 -> S1, S3
// The zero state is charged to the upper pair; since exactly one device per
// leg conducts, the total does not depend on that choice. Secondary devices
// carry n * i_L.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "modkit/converter.hpp"
#include "modkit/error.hpp"
#include "modkit/simulator.hpp"
#include "modkit/surrogate.hpp"

namespace modkit {

inline double current_stress(const SampledTrace& i_L) {
  if (i_L.values.empty()) throw Error(ErrorKind::Domain, "current trace is empty");
  const auto [lo, hi] = std::minmax_element(i_L.values.begin(), i_L.values.end());
  return *hi - *lo;
}

enum class QuadratureRule { Trapezoid, Simpson };

// Mean of a periodic sampled function over one period.
inline double periodic_mean(std::span<const double> f, QuadratureRule rule) {
  const std::size_t n = f.size();
  if (n == 0) throw Error(ErrorKind::Domain, "empty integrand");
  double acc = 0.0;
  if (rule == QuadratureRule::Trapezoid) {
    // Cyclic trapezoid: every interior node has weight 1.
    for (double x : f) acc += x;
    return acc / static_cast<double>(n);
  }
  if (n % 2 != 0) throw Error(ErrorKind::Domain, "Simpson rule needs an even sample count");
  for (std::size_t k = 0; k < n; ++k) acc += (k % 2 == 0 ? 2.0 : 4.0) * f[k];
  return acc / (3.0 * static_cast<double>(n));
}

// R_on * mean((indicator * current)^2) for one device.
inline double device_conduction_loss(const SampledTrace& indicator, const SampledTrace& current,
                                     double r_on,
                                     QuadratureRule rule = QuadratureRule::Trapezoid) {
  require_same_grid(indicator, current);
  std::vector<double> f(current.size());
  for (std::size_t k = 0; k < f.size(); ++k) {
    const double x = indicator[k] * current[k];
    f[k] = x * x;
  }
  return r_on * periodic_mean(f, rule);
}

// Conduction indicators of the four devices of a bridge (see header).
inline std::array<SampledTrace, 4> device_indicators(const SampledTrace& s) {
  std::array<SampledTrace, 4> d{SampledTrace(s.grid), SampledTrace(s.grid),
                                SampledTrace(s.grid), SampledTrace(s.grid)};
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double v = s[k];
    const bool s1 = v >= 0.0;  // +1 and 0
    const bool s4 = v > 0.0;
    const bool s2 = v < 0.0;
    const bool s3 = v <= 0.0;  // -1 and 0
    d[0][k] = s1;
    d[1][k] = s2;
    d[2][k] = s3;
    d[3][k] = s4;
  }
  return d;
}

inline double conduction_loss(const SampledTrace& i_L, const SampledTrace& s_pri,
                              const SampledTrace& s_sec, const CircuitParams& circuit,
                              QuadratureRule rule = QuadratureRule::Trapezoid) {
  require_same_grid(i_L, s_pri);
  require_same_grid(i_L, s_sec);
  SampledTrace i_sec = i_L;
  for (double& x : i_sec.values) x *= circuit.n;
  double total = 0.0;
  for (const auto& d : device_indicators(s_pri)) total += device_conduction_loss(d, i_L, circuit.R_on, rule);
  for (const auto& d : device_indicators(s_sec)) total += device_conduction_loss(d, i_sec, circuit.R_on, rule);
  return total;
}

struct ZvsResult {
  Commutation commutation;
  double current = 0.0;
  bool zvs = false;
  double margin = 0.0;  // |i_L| at the instant
};

// Required sign of i_L for a soft transition (see table above).
inline double zvs_required_sign(int leg, bool rising) {
  const bool positive_when_rising = leg == 1 || leg == 2;
  return (positive_when_rising == rising) ? 1.0 : -1.0;
}

inline ZvsResult classify_commutation(const Commutation& c, double current) {
  const double sign = zvs_required_sign(c.leg, c.rising);
  return {c, current, sign * current > 0.0, std::abs(current)};
}

inline std::vector<ZvsResult> soft_switching_check(const SampledTrace& i_L,
                                                   std::span<const Commutation> instants) {
  const Grid& g = i_L.grid;
  std::vector<ZvsResult> out;
  for (const auto& c : instants) {
    const double pos = c.time / g.dt();
    const long idx = std::lround(pos);
    if (std::abs(pos - static_cast<double>(idx)) > 1e-6 || idx < 0 || idx >= g.size()) {
      throw Error(ErrorKind::Domain, "commutation instant is not on the grid");
    }
    out.push_back(classify_commutation(c, i_L[static_cast<std::size_t>(idx)]));
  }
  return out;
}

struct PerformanceReport {
  double current_stress = 0.0;   // A, peak to peak
  double conduction_loss = 0.0;  // W, device on-resistance
  double resistive_loss = 0.0;   // W, R_L
  double average_power = 0.0;    // W, primary -> secondary positive
  double efficiency_proxy = 1.0;
  std::vector<ZvsResult> zvs;

  int hard_switching_count() const {
    return static_cast<int>(std::count_if(zvs.begin(), zvs.end(),
                                          [](const ZvsResult& z) { return !z.zvs; }));
  }
};

inline double efficiency_proxy(double power, double conduction, double resistive) {
  const double p = std::abs(power);
  const double den = p + conduction + resistive;
  if (den <= 0.0) return 1.0;
  return std::clamp(p / den, std::numeric_limits<double>::min(), 1.0);
}

// Metrics assembled from a sampled state (any backend).
inline PerformanceReport report_from_trace(const StateTrace& st, const PhaseShiftTuple& tuple,
                                           const CircuitParams& circuit) {
  const Grid& g = st.grid();
  const auto sw = switching_functions(tuple, g);
  const auto inst = commutation_instants(tuple, g);
  PerformanceReport r;
  r.current_stress = current_stress(st.i_L);
  r.conduction_loss = conduction_loss(st.i_L, sw.primary, sw.secondary, circuit);
  std::vector<double> sq(st.i_L.size());
  for (std::size_t k = 0; k < sq.size(); ++k) sq[k] = st.i_L[k] * st.i_L[k];
  r.resistive_loss = circuit.R_L * periodic_mean(sq, QuadratureRule::Trapezoid);
  r.average_power = average_power(st, circuit.n);
  r.zvs = soft_switching_check(st.i_L, inst);
  r.efficiency_proxy = efficiency_proxy(r.average_power, r.conduction_loss, r.resistive_loss);
  return r;
}

// Exact oracle metrics for stiff dc links: stress from the segment-boundary
// extrema, losses and power from closed-form integrals, ZVS at the exact
// commutation phases.
inline PerformanceReport oracle_report(const CircuitParams& circuit, double v1, double v2,
                                       const PhaseShiftTuple& tuple) {
  const PeriodicCurrent pc(circuit, tuple, v1, v2);
  PerformanceReport r;
  const auto& b = pc.boundary_currents();
  const auto [lo, hi] = std::minmax_element(b.begin(), b.end());
  r.current_stress = *hi - *lo;
  const double ms = pc.mean_square();
  r.conduction_loss = 2.0 * circuit.R_on * (1.0 + circuit.n * circuit.n) * ms;
  r.resistive_loss = pc.resistive_loss();
  r.average_power = pc.output_power();
  const auto off = leg_offsets(tuple);
  const double T = circuit.period();
  for (int leg = 0; leg < 4; ++leg) {
    for (bool rising : {true, false}) {
      const double t = detail::wrap01(off[static_cast<std::size_t>(leg)] + (rising ? 0.0 : 0.5)) * T;
      r.zvs.push_back(classify_commutation({leg, rising, t}, pc.current_at(t)));
    }
  }
  std::stable_sort(r.zvs.begin(), r.zvs.end(), [](const ZvsResult& a, const ZvsResult& c) {
    return a.commutation.time < c.commutation.time;
  });
  r.efficiency_proxy = efficiency_proxy(r.average_power, r.conduction_loss, r.resistive_loss);
  return r;
}

// Oracle state on a grid with stiff dc links.
inline StateTrace oracle_state(const CircuitParams& circuit, double v1, double v2,
                               const PhaseShiftTuple& tuple, const Grid& grid) {
  const PeriodicCurrent pc(circuit, tuple, v1, v2);
  auto v = ideal_bridge_voltages(tuple, v1, v2, grid);
  return {pc.sample(grid), SampledTrace(grid, v1), SampledTrace(grid, v2), std::move(v.v_p),
          std::move(v.v_s)};
}

struct OracleBackend {};
using Backend = std::variant<OracleBackend, const SurrogatePair*>;

inline PerformanceReport evaluate_performance(const CircuitParams& circuit, double v1, double v2,
                                              const PhaseShiftTuple& tuple,
                                              const Backend& backend) {
  if (std::holds_alternative<OracleBackend>(backend)) {
    return oracle_report(circuit, v1, v2, tuple);
  }
  const SurrogatePair* p = std::get<const SurrogatePair*>(backend);
  if (!p) throw Error(ErrorKind::InvalidParams, "surrogate backend requires a checkpoint");
  if (std::abs(p->v1 - v1) > 1e-9 * v1 || std::abs(p->v2 - v2) > 1e-9 * v2) {
    throw Error(ErrorKind::InvalidParams,
                "surrogate was trained at different dc-link voltages");
  }
  try {
    return report_from_trace(surrogate_state(*p, tuple), tuple, circuit);
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("surrogate backend: ") + e.what());
  }
}

}  // namespace modkit
