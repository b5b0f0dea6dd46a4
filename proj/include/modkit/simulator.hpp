#pragma once

// Steady-state reference simulation of the dual active bridge.
//
// Inductor branch:  L di/dt = -R_L i + v_p - n v_s
// DC links:         C1 dv_C1/dt = i_1 - s_pri i,  i_1 = (V_src - v_C1)/R_src
//                   C2 dv_C2/dt = n s_sec i - i_2, i_2 = v_C2 / R_load
//
// Two solvers are provided. steady_state_current() and PeriodicCurrent use
// the exact exponential solution of the inductor branch with stiff dc links
// and close the period with an affine fixed point. simulate_full() integrates
// the coupled three-state system with fixed-step RK4 until the cycle-to-cycle
// change falls below a tolerance.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "modkit/converter.hpp"
#include "modkit/error.hpp"

namespace modkit {

struct CircuitParams {
  double L = 30e-6;      // leakage inductance [H]
  double R_L = 0.1;      // equivalent series resistance [ohm]
  double n = 1.0;        // turn ratio
  double C1 = 470e-6;    // input capacitor [F]
  double C2 = 470e-6;    // output capacitor [F]
  double f_s = 100e3;    // switching frequency [Hz]
  double R_on = 0.05;    // per-switch on-resistance [ohm]

  double period() const { return 1.0 / f_s; }

  void validate() const {
    if (!(L > 0.0) || !(C1 > 0.0) || !(C2 > 0.0) || !(f_s > 0.0)) {
      throw Error(ErrorKind::Domain, "L, C1, C2 and f_s must be positive");
    }
    if (!(R_L >= 0.0) || !(R_on >= 0.0)) {
      throw Error(ErrorKind::Domain, "R_L and R_on must be non-negative");
    }
    if (!(n > 0.0)) throw Error(ErrorKind::Domain, "turn ratio must be positive");
  }

  bool operator==(const CircuitParams&) const = default;
};

struct OperatingConditions {
  double P_r = 1000.0;
  double P_a = 600.0;
  double V_1r = 200.0;
  double V_2r = 200.0;
  double V_2a = 160.0;

  void validate() const {
    const std::pair<const char*, double> fields[] = {
        {"P_r", P_r}, {"P_a", P_a}, {"V_1r", V_1r}, {"V_2r", V_2r}, {"V_2a", V_2a}};
    for (const auto& [name, v] : fields) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw ValidationError(name, "must be positive");
      }
    }
    if (P_a > P_r) throw ValidationError("P_a", "requires P_a <= P_r");
    if (V_2a > 1.5 * V_2r) throw ValidationError("V_2a", "requires V_2a <= 1.5 * V_2r");
  }

  bool operator==(const OperatingConditions&) const = default;
};

struct LoadModel {
  double source_voltage = 200.0;
  double source_resistance = 0.0;  // 0 pins v_C1 to the source
  double load_resistance = 25.0;

  void validate() const {
    if (!(source_voltage > 0.0)) throw Error(ErrorKind::Domain, "source voltage must be positive");
    if (!(source_resistance >= 0.0)) throw Error(ErrorKind::Domain, "R_src must be >= 0");
    if (!(load_resistance > 0.0)) throw Error(ErrorKind::Domain, "load resistance must be positive");
  }
};

struct StateTrace {
  SampledTrace i_L;
  SampledTrace v_C1;
  SampledTrace v_C2;
  SampledTrace v_p;
  SampledTrace v_s;

  const Grid& grid() const { return i_L.grid; }
};

namespace detail {

// One interval of the inductor branch: i_next = a*i + b(u).
struct BranchStep {
  double a = 1.0;
  double gain = 0.0;  // b(u) = gain * u

  BranchStep(const CircuitParams& c, double h) {
    if (c.R_L > 0.0) {
      const double x = -c.R_L * h / c.L;
      a = std::exp(x);
      gain = -std::expm1(x) / c.R_L;
    } else {
      gain = h / c.L;
    }
  }
  double operator()(double i, double u) const { return a * i + gain * u; }
};

}  // namespace detail

// Periodic inductor current for sampled (piecewise-constant) bridge voltages.
// Sample k of v_p, v_s drives the interval (t_{k-1}, t_k]. With R_L = 0 the
// dc level is undetermined; the zero-mean solution is returned.
inline SampledTrace steady_state_current(const CircuitParams& circuit,
                                         const SampledTrace& v_p,
                                         const SampledTrace& v_s) {
  if (circuit.R_L < 0.0) throw Error(ErrorKind::Domain, "R_L must be >= 0");
  circuit.validate();
  require_same_grid(v_p, v_s);
  const Grid& grid = v_p.grid;
  const int n = grid.size();
  const detail::BranchStep step(circuit, grid.dt());
  auto forcing = [&](int k) { return v_p.at_cyclic(k) - circuit.n * v_s.at_cyclic(k); };

  // Propagate from i(0) = 0; i(T) = a^K i(0) + S.
  SampledTrace i(grid);
  double x = 0.0;
  for (int k = 1; k <= n; ++k) {
    x = step(x, forcing(k));
    if (k < n) i[static_cast<std::size_t>(k)] = x;
  }
  const double S = x;

  double i0 = 0.0;
  if (circuit.R_L > 0.0) {
    const double one_minus_aK = -std::expm1(-circuit.R_L * grid.period / circuit.L);
    if (std::abs(one_minus_aK) < 1e-14) {
      throw Error(ErrorKind::Internal, "degenerate periodic fixed point");
    }
    i0 = S / one_minus_aK;
    // i_k(i0) = a^k i0 + i_k(0)
    double ak = 1.0;
    i[0] = i0;
    for (int k = 1; k < n; ++k) {
      ak *= step.a;
      i[static_cast<std::size_t>(k)] += ak * i0;
    }
  } else {
    double scale = 0.0;
    for (int k = 0; k < n; ++k) scale = std::max(scale, std::abs(forcing(k)));
    if (std::abs(S) > 1e-9 * (1.0 + scale * step.gain * n)) {
      throw Error(ErrorKind::Domain,
                  "no periodic solution: net volt-seconds with R_L = 0");
    }
    double mean = 0.0;
    for (double v : i.values) mean += v;
    mean /= n;
    for (double& v : i.values) v -= mean;
  }
  return i;
}

// i(T) obtained by stepping once more from the last sample.
inline double end_of_period_current(const CircuitParams& circuit,
                                    const SampledTrace& i_L,
                                    const SampledTrace& v_p,
                                    const SampledTrace& v_s) {
  const detail::BranchStep step(circuit, i_L.grid.dt());
  return step(i_L.values.back(), v_p[0] - circuit.n * v_s[0]);
}

// Exact periodic inductor current for the ideal (edge-exact) bridge
// waveforms of a shift tuple with stiff dc links v1, v2.
class PeriodicCurrent {
 public:
  PeriodicCurrent(const CircuitParams& circuit, const PhaseShiftTuple& tuple,
                  double v1, double v2)
      : circuit_(circuit), v1_(v1), v2_(v2) {
    circuit.validate();
    validate(tuple);
    if (!(v1 > 0.0) || !(v2 > 0.0)) {
      throw Error(ErrorKind::Domain, "dc-link voltages must be positive");
    }
    const double T = circuit.period();
    std::vector<double> cuts{0.0, 1.0};
    for (double off : leg_offsets(tuple)) {
      cuts.push_back(detail::wrap01(off));
      cuts.push_back(detail::wrap01(off + 0.5));
    }
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t j = 0; j + 1 < cuts.size(); ++j) {
      const double a = cuts[j], b = cuts[j + 1];
      if (b - a <= 1e-15) continue;
      const auto [sp, ss] = switching_state(tuple, 0.5 * (a + b));
      start_.push_back(a * T);
      length_.push_back((b - a) * T);
      s_pri_.push_back(sp);
      s_sec_.push_back(ss);
      u_.push_back(v1 * sp - circuit.n * v2 * ss);
    }

    // Affine map over the period from i(0) = 0.
    double x = 0.0;
    double a_total = 1.0;
    for (std::size_t j = 0; j < u_.size(); ++j) {
      const detail::BranchStep st(circuit, length_[j]);
      x = st(x, u_[j]);
      a_total *= st.a;
    }
    double i0 = 0.0;
    if (circuit.R_L > 0.0) {
      i0 = x / (-std::expm1(-circuit.R_L * T / circuit.L));
    }
    i_start_.resize(u_.size() + 1);
    i_start_[0] = i0;
    for (std::size_t j = 0; j < u_.size(); ++j) {
      const detail::BranchStep st(circuit, length_[j]);
      i_start_[j + 1] = st(i_start_[j], u_[j]);
    }
    if (circuit.R_L == 0.0) {
      // Lossless: remove the mean so the solution is the symmetric one.
      const double m = integral_current() / T;
      for (double& v : i_start_) v -= m;
    }
    (void)a_total;
  }

  double current_at(double t) const {
    const double T = circuit_.period();
    t -= std::floor(t / T) * T;
    std::size_t j = static_cast<std::size_t>(
        std::upper_bound(start_.begin(), start_.end(), t) - start_.begin());
    j = j == 0 ? 0 : j - 1;
    const detail::BranchStep st(circuit_, t - start_[j]);
    return st(i_start_[j], u_[j]);
  }

  SampledTrace sample(const Grid& grid) const {
    SampledTrace out(grid);
    for (int k = 0; k < grid.size(); ++k) {
      out[static_cast<std::size_t>(k)] = current_at(grid.time(k));
    }
    return out;
  }

  // Current values at every segment boundary; the extrema of i_L lie here.
  const std::vector<double>& boundary_currents() const { return i_start_; }

  // Mean power leaving the primary dc link into the bridge.
  double input_power() const { return mean_weighted(s_pri_, v1_); }
  // Mean power delivered into the secondary dc link (positive = pri -> sec).
  double output_power() const { return mean_weighted(s_sec_, circuit_.n * v2_); }
  // Mean R_L dissipation.
  double resistive_loss() const { return circuit_.R_L * mean_square(); }

  double mean_square() const {
    double acc = 0.0;
    for (std::size_t j = 0; j < u_.size(); ++j) {
      acc += segment_integral(j, /*squared=*/true);
    }
    return acc / circuit_.period();
  }

  double integral_current() const {
    double acc = 0.0;
    for (std::size_t j = 0; j < u_.size(); ++j) acc += segment_integral(j, false);
    return acc;
  }

 private:
  double mean_weighted(const std::vector<double>& s, double scale) const {
    double acc = 0.0;
    for (std::size_t j = 0; j < u_.size(); ++j) {
      if (s[j] != 0.0) acc += s[j] * segment_integral(j, false);
    }
    return scale * acc / circuit_.period();
  }

  // Integral of i (or i^2) over segment j.
  double segment_integral(std::size_t j, bool squared) const {
    const double h = length_[j];
    const double is = i_start_[j];
    if (circuit_.R_L > 0.0) {
      const double tau = circuit_.L / circuit_.R_L;
      const double inf = u_[j] / circuit_.R_L;
      const double d = is - inf;
      const double e1 = -std::expm1(-h / tau);
      if (!squared) return inf * h + d * tau * e1;
      const double e2 = -std::expm1(-2.0 * h / tau);
      return inf * inf * h + 2.0 * inf * d * tau * e1 + d * d * 0.5 * tau * e2;
    }
    const double ie = is + u_[j] * h / circuit_.L;
    if (!squared) return 0.5 * (is + ie) * h;
    return h * (is * is + is * ie + ie * ie) / 3.0;
  }

  CircuitParams circuit_;
  double v1_, v2_;
  std::vector<double> start_, length_, s_pri_, s_sec_, u_, i_start_;
};

// Mean secondary power n*v_s*i_L over one period (positive = primary to
// secondary). Sample k of v_s holds over (t_{k-1}, t_k]; the current over
// that interval is integrated with the trapezoid rule.
inline double average_power(const StateTrace& trace, double turn_ratio) {
  require_same_grid(trace.i_L, trace.v_s);
  const auto& i = trace.i_L;
  const long n = static_cast<long>(i.size());
  double acc = 0.0;
  for (long k = 0; k < n; ++k) {
    acc += trace.v_s.at_cyclic(k) * 0.5 * (i.at_cyclic(k - 1) + i.at_cyclic(k));
  }
  return turn_ratio * acc / static_cast<double>(n);
}

struct FullSimOptions {
  int max_cycles = 100000;
  double tol = 1e-8;
  // (i_L, v_C1, v_C2) at t = 0; defaults to (0, V_src, V_src / n).
  std::optional<std::array<double, 3>> initial;
};

struct FullSimResult {
  StateTrace trace;
  bool converged = false;
  int cycles = 0;
  double residual = 0.0;
  std::vector<double> cycle_start_v_c2;
};

inline FullSimResult integrate_cycles(const CircuitParams& circuit,
                                      const LoadModel& load,
                                      const PhaseShiftTuple& tuple,
                                      const Grid& grid,
                                      const FullSimOptions& opts) {
  circuit.validate();
  load.validate();
  if (opts.max_cycles < 1) throw Error(ErrorKind::Domain, "max_cycles must be >= 1");
  const auto sw = switching_functions(tuple, grid);
  const int n = grid.size();
  const double dt = grid.dt();
  const bool stiff_source = load.source_resistance == 0.0;

  using State = std::array<double, 3>;
  auto deriv = [&](const State& x, double sp, double ss) {
    const double di = (-circuit.R_L * x[0] + sp * x[1] - circuit.n * ss * x[2]) / circuit.L;
    const double i1 = stiff_source ? 0.0 : (load.source_voltage - x[1]) / load.source_resistance;
    const double dv1 = stiff_source ? 0.0 : (i1 - sp * x[0]) / circuit.C1;
    const double dv2 = (circuit.n * ss * x[0] - x[2] / load.load_resistance) / circuit.C2;
    return State{di, dv1, dv2};
  };
  auto axpy = [](const State& x, double h, const State& d) {
    return State{x[0] + h * d[0], x[1] + h * d[1], x[2] + h * d[2]};
  };

  State x = opts.initial.value_or(
      State{0.0, load.source_voltage, load.source_voltage / circuit.n});
  if (stiff_source) x[1] = load.source_voltage;

  FullSimResult res;
  res.trace = {SampledTrace(grid), SampledTrace(grid), SampledTrace(grid),
               SampledTrace(grid), SampledTrace(grid)};
  for (int cycle = 1; cycle <= opts.max_cycles; ++cycle) {
    const State start = x;
    res.cycle_start_v_c2.push_back(x[2]);
    double imax = 0.0;
    for (int k = 0; k < n; ++k) {
      auto& tr = res.trace;
      const auto ku = static_cast<std::size_t>(k);
      tr.i_L[ku] = x[0];
      tr.v_C1[ku] = x[1];
      tr.v_C2[ku] = x[2];
      imax = std::max(imax, std::abs(x[0]));
      // Interval (t_k, t_{k+1}] is driven by sample k+1.
      const double sp = sw.primary.at_cyclic(k + 1);
      const double ss = sw.secondary.at_cyclic(k + 1);
      const State k1 = deriv(x, sp, ss);
      const State k2 = deriv(axpy(x, 0.5 * dt, k1), sp, ss);
      const State k3 = deriv(axpy(x, 0.5 * dt, k2), sp, ss);
      const State k4 = deriv(axpy(x, dt, k3), sp, ss);
      for (int c = 0; c < 3; ++c) {
        x[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
      }
    }
    if (!std::isfinite(x[0]) || !std::isfinite(x[1]) || !std::isfinite(x[2])) {
      throw ConvergenceError("state diverged", std::numeric_limits<double>::infinity());
    }
    const double r_i = std::abs(x[0] - start[0]) / (1.0 + imax);
    const double r_v1 = std::abs(x[1] - start[1]) / (1.0 + std::abs(start[1]));
    const double r_v2 = std::abs(x[2] - start[2]) / (1.0 + std::abs(start[2]));
    res.residual = std::max({r_i, r_v1, r_v2});
    res.cycles = cycle;
    if (res.residual < opts.tol) {
      res.converged = true;
      break;
    }
  }
  for (int k = 0; k < n; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    res.trace.v_p[ku] = sw.primary[ku] * res.trace.v_C1[ku];
    res.trace.v_s[ku] = sw.secondary[ku] * res.trace.v_C2[ku];
  }
  return res;
}

inline StateTrace simulate_full(const CircuitParams& circuit, const LoadModel& load,
                                const PhaseShiftTuple& tuple, const Grid& grid,
                                int max_cycles, double tol) {
  FullSimOptions opts;
  opts.max_cycles = max_cycles;
  opts.tol = tol;
  auto res = integrate_cycles(circuit, load, tuple, grid, opts);
  if (!res.converged) {
    throw ConvergenceError("no periodic steady state after " +
                               std::to_string(res.cycles) + " cycles",
                           res.residual);
  }
  return std::move(res.trace);
}

}  // namespace modkit
