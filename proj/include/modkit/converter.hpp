#pragma once

// Phase-shift modulation of a dual active bridge: strategy semantics,
// leg-level shift tuples, three-level switching functions and synthetic
// commutation ringing.
//
// Conventions used throughout modkit:
//  * Every phase ratio is a fraction of the HALF switching period, so a
//    ratio of 1 shifts a leg by T_s/2.
//  * A SampledTrace holds K samples at t_k = k*dt, k = 0..K-1. For
//    piecewise-constant waveforms (bridge voltages, switching functions)
//    sample k is the level held over the interval (t_{k-1}, t_k]; index -1
//    wraps to K-1. Switching functions are therefore sampled at interval
//    midpoints.
//  * Leg A = S1/S2, leg B = S3/S4 (primary); leg C = S5/S6, leg D = S7/S8
//    (secondary). Leg A's upper switch turns on at t = 0.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "modkit/error.hpp"

namespace modkit {

enum class Strategy { SPS, DPS, EPS1, EPS2, TPS, HYBRID };

inline constexpr std::array<Strategy, 6> kAllStrategies = {
    Strategy::SPS, Strategy::DPS, Strategy::EPS1,
    Strategy::EPS2, Strategy::TPS, Strategy::HYBRID};

// Sub-patterns a HYBRID design may resolve to.
inline constexpr std::array<Strategy, 3> kHybridVariants = {
    Strategy::EPS1, Strategy::EPS2, Strategy::DPS};

constexpr int strategy_dof(Strategy s) {
  switch (s) {
    case Strategy::SPS: return 1;
    case Strategy::DPS: return 2;
    case Strategy::EPS1: return 2;
    case Strategy::EPS2: return 2;
    case Strategy::TPS: return 3;
    case Strategy::HYBRID: return 2;
  }
  return 0;
}

constexpr std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::SPS: return "SPS";
    case Strategy::DPS: return "DPS";
    case Strategy::EPS1: return "EPS1";
    case Strategy::EPS2: return "EPS2";
    case Strategy::TPS: return "TPS";
    case Strategy::HYBRID: return "HYBRID";
  }
  return "?";
}

inline std::string upper_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

inline std::optional<Strategy> strategy_from_name(std::string_view name) {
  const std::string key = upper_ascii(name);
  for (Strategy s : kAllStrategies) {
    if (key == strategy_name(s)) return s;
  }
  return std::nullopt;
}

// Design variables of one strategy. Value order:
//   SPS                    {D_o}
//   DPS, EPS1, EPS2, HYBRID {D_i, D_o}
//   TPS                    {D_1, D_o, D_2}
struct ModulationParams {
  Strategy strategy = Strategy::SPS;
  std::vector<double> values;
  // HYBRID only: the sub-pattern (EPS1, EPS2 or DPS) the values apply to.
  std::optional<Strategy> variant;

  bool operator==(const ModulationParams&) const = default;
};

struct PhaseShiftTuple {
  double d13 = 0.0;  // <S1,S3>
  double d15 = 0.0;  // <S1,S5>; negative values reverse the power flow
  double d57 = 0.0;  // <S5,S7>

  bool operator==(const PhaseShiftTuple&) const = default;
};

inline void validate(const ModulationParams& p) {
  const auto dof = static_cast<std::size_t>(strategy_dof(p.strategy));
  if (p.values.size() != dof) {
    throw Error(ErrorKind::InvalidParams,
                std::string(strategy_name(p.strategy)) + " expects " +
                    std::to_string(dof) + " values, got " +
                    std::to_string(p.values.size()));
  }
  for (double v : p.values) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(ErrorKind::Range, "phase ratio " + std::to_string(v) +
                                        " outside [0, 1]");
    }
  }
  if (p.variant) {
    if (p.strategy != Strategy::HYBRID ||
        std::find(kHybridVariants.begin(), kHybridVariants.end(), *p.variant) ==
            kHybridVariants.end()) {
      throw Error(ErrorKind::InvalidParams, "variant is only valid for HYBRID "
                                            "and must be EPS1, EPS2 or DPS");
    }
  }
}

inline void validate(const PhaseShiftTuple& t) {
  auto in = [](double v, double lo) { return v >= lo && v <= 1.0; };
  if (!in(t.d13, 0.0) || !in(t.d57, 0.0) || !in(t.d15, -1.0)) {
    throw Error(ErrorKind::Range, "phase shift tuple out of range");
  }
}

inline PhaseShiftTuple to_phase_shift_tuple(const ModulationParams& p) {
  validate(p);
  const auto& v = p.values;
  auto pattern = p.strategy;
  if (pattern == Strategy::HYBRID) {
    if (!p.variant) {
      throw Error(ErrorKind::InvalidParams,
                  "HYBRID parameters need a resolved variant");
    }
    pattern = *p.variant;
  }
  switch (pattern) {
    case Strategy::SPS: return {0.0, v[0], 0.0};
    case Strategy::DPS: return {v[0], v[1], v[0]};
    case Strategy::EPS1: return {v[0], v[1], 0.0};
    case Strategy::EPS2: return {0.0, v[1], v[0]};
    case Strategy::TPS: return {v[0], v[1], v[2]};
    case Strategy::HYBRID: break;
  }
  throw Error(ErrorKind::Internal, "unreachable strategy");
}

// Uniform sampling grid over one switching period.
struct Grid {
  int samples_per_period = 200;
  double period = 1e-5;

  static Grid make(int samples_per_period, double period) {
    if (samples_per_period < 8 || samples_per_period % 2 != 0) {
      throw Error(ErrorKind::Domain,
                  "samples per period must be even and >= 8");
    }
    if (!(period > 0.0) || !std::isfinite(period)) {
      throw Error(ErrorKind::Domain, "period must be positive");
    }
    return Grid{samples_per_period, period};
  }

  int size() const { return samples_per_period; }
  double dt() const { return period / samples_per_period; }
  double time(int k) const { return period * k / samples_per_period; }

  bool operator==(const Grid&) const = default;
};

struct SampledTrace {
  Grid grid;
  std::vector<double> values;

  SampledTrace() = default;
  explicit SampledTrace(const Grid& g, double fill = 0.0)
      : grid(g), values(static_cast<std::size_t>(g.size()), fill) {}
  SampledTrace(const Grid& g, std::vector<double> v) : grid(g), values(std::move(v)) {
    if (values.size() != static_cast<std::size_t>(g.size())) {
      throw Error(ErrorKind::Dimension, "trace length does not match grid");
    }
  }

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t k) { return values[k]; }
  double operator[](std::size_t k) const { return values[k]; }
  // Cyclic access; k may be negative or >= K.
  double at_cyclic(long k) const {
    const long n = static_cast<long>(values.size());
    return values[static_cast<std::size_t>(((k % n) + n) % n)];
  }
};

inline void require_same_grid(const SampledTrace& a, const SampledTrace& b) {
  if (!(a.grid == b.grid) || a.size() != b.size()) {
    throw Error(ErrorKind::Dimension, "traces are not on a shared grid");
  }
}

namespace detail {

inline double wrap01(double x) { return x - std::floor(x); }

// 50%-duty leg: upper switch on for phase in [0, 1/2).
inline double leg_state(double phase) { return wrap01(phase) < 0.5 ? 1.0 : 0.0; }

}  // namespace detail

// Leg phase offsets (fraction of the full period) at which each leg's upper
// switch turns on.
inline std::array<double, 4> leg_offsets(const PhaseShiftTuple& t) {
  return {0.0, 0.5 * (1.0 + t.d13), 0.5 * t.d15,
          0.5 * t.d15 + 0.5 * (1.0 + t.d57)};
}

// Instantaneous bridge switching functions at a phase in [0, 1).
inline std::pair<double, double> switching_state(const PhaseShiftTuple& t,
                                                 double phase) {
  const auto off = leg_offsets(t);
  const double qa = detail::leg_state(phase - off[0]);
  const double qb = detail::leg_state(phase - off[1]);
  const double qc = detail::leg_state(phase - off[2]);
  const double qd = detail::leg_state(phase - off[3]);
  return {qa - qb, qc - qd};
}

struct SwitchingFunctions {
  SampledTrace primary;
  SampledTrace secondary;
};

inline SwitchingFunctions switching_functions(const PhaseShiftTuple& tuple,
                                              const Grid& grid) {
  validate(tuple);
  SwitchingFunctions out{SampledTrace(grid), SampledTrace(grid)};
  const int n = grid.size();
  for (int k = 0; k < n; ++k) {
    const double phase = (k - 0.5) / n;
    const auto [sp, ss] = switching_state(tuple, phase);
    out.primary[k] = sp;
    out.secondary[k] = ss;
  }
  return out;
}

struct BridgeVoltages {
  SampledTrace v_p;
  SampledTrace v_s;
};

inline BridgeVoltages ideal_bridge_voltages(const PhaseShiftTuple& tuple,
                                            double v_c1, double v_c2,
                                            const Grid& grid) {
  if (!(v_c1 > 0.0) || !(v_c2 > 0.0)) {
    throw Error(ErrorKind::Domain, "dc-link voltages must be positive");
  }
  auto s = switching_functions(tuple, grid);
  for (auto& x : s.primary.values) x *= v_c1;
  for (auto& x : s.secondary.values) x *= v_c2;
  return {std::move(s.primary), std::move(s.secondary)};
}

// One leg transition. `rising` means the leg's upper switch turns on.
struct Commutation {
  int leg = 0;  // 0..3 = A, B, C, D
  bool rising = true;
  double time = 0.0;  // seconds within [0, T_s)
};

// The eight leg transitions of one period, snapped to the nearest grid
// instant and sorted by time.
inline std::vector<Commutation> commutation_instants(const PhaseShiftTuple& tuple,
                                                     const Grid& grid) {
  validate(tuple);
  const auto off = leg_offsets(tuple);
  const int n = grid.size();
  std::vector<Commutation> out;
  for (int leg = 0; leg < 4; ++leg) {
    for (bool rising : {true, false}) {
      const double phase = detail::wrap01(off[leg] + (rising ? 0.0 : 0.5));
      const long idx = std::lround(phase * n) % n;
      out.push_back({leg, rising, grid.time(static_cast<int>(idx))});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Commutation& a, const Commutation& b) {
                     return a.time < b.time;
                   });
  return out;
}

struct RingingConfig {
  double amplitude_ratio = 0.3;
  double frequency = 1e6;
  double damping_tau = 0.5e-6;
  bool enabled = false;

  void validate() const {
    if (!(amplitude_ratio >= 0.0) || !(frequency > 0.0) || !(damping_tau > 0.0)) {
      throw Error(ErrorKind::Domain, "invalid ringing configuration");
    }
  }
};

// A level change of a sampled waveform: the old level is held up to t_index,
// the new one from there on.
struct Edge {
  int index = 0;
  double height = 0.0;
};

inline std::vector<Edge> detect_edges(const SampledTrace& trace) {
  std::vector<Edge> edges;
  const int n = static_cast<int>(trace.size());
  for (int m = 0; m < n; ++m) {
    const double step = trace[(m + 1) % n] - trace[m];
    if (step != 0.0) edges.push_back({m, step});
  }
  return edges;
}

// Adds H*ratio*exp(-tau/damping)*sin(2*pi*f*tau) after every edge, where tau
// is the time since the edge, until the envelope falls below 1e-3 of its
// initial value. Ringing wraps around the period.
inline SampledTrace inject_nonideality(const SampledTrace& trace,
                                       std::span<const Edge> edges,
                                       const RingingConfig& cfg) {
  if (!cfg.enabled) return trace;
  cfg.validate();
  SampledTrace out = trace;
  if (cfg.amplitude_ratio == 0.0) return out;
  const int n = static_cast<int>(trace.size());
  const double dt = trace.grid.dt();
  const int horizon = std::min(
      n, static_cast<int>(std::ceil(cfg.damping_tau * std::log(1e3) / dt)) + 1);
  for (const auto& e : edges) {
    if (e.index < 0 || e.index >= n) {
      throw Error(ErrorKind::Domain, "edge index off the grid");
    }
    const double amp = e.height * cfg.amplitude_ratio;
    for (int j = 1; j <= horizon; ++j) {
      const double tau = j * dt;
      const double env = std::exp(-tau / cfg.damping_tau);
      if (env < 1e-3) break;
      out[static_cast<std::size_t>((e.index + j) % n)] +=
          amp * env * std::sin(2.0 * std::numbers::pi * cfg.frequency * tau);
    }
  }
  return out;
}

}  // namespace modkit
