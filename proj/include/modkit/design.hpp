#pragma once

// Optimizer-in-the-loop modulation design.
//
// The objective over the strategy box is
//   f(D) = metric(D) + w * ((P(D) - P_a) / P_r)^2,   w = 1e3 * metric_scale
// evaluated at V_1r / V_2a. Metric scales: current stress 2 P_r / V_1r,
// conduction loss 0.01 P_r, hard-switching count 1.
//
// The winning point is trimmed on the oracle (D_o only) so the delivered
// power meets P_a, and the final report always comes from the oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "modkit/converter.hpp"
#include "modkit/error.hpp"
#include "modkit/metrics.hpp"
#include "modkit/optimizer.hpp"
#include "modkit/parallel.hpp"
#include "modkit/simulator.hpp"
#include "modkit/surrogate.hpp"

namespace modkit {

enum class ObjectiveKind { CurrentStress, ConductionLoss, ZvsCount };
enum class BackendKind { Oracle, Surrogate };

inline std::string_view objective_name(ObjectiveKind o) {
  switch (o) {
    case ObjectiveKind::CurrentStress: return "current_stress";
    case ObjectiveKind::ConductionLoss: return "conduction_loss";
    case ObjectiveKind::ZvsCount: return "zvs_count";
  }
  return "";
}

// Accepts "current_stress", "Current stress", "CURRENT-STRESS", ...
inline std::optional<ObjectiveKind> objective_from_name(std::string_view s) {
  std::string key;
  for (char c : s) {
    if (c == ' ' || c == '-') c = '_';
    key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  for (auto o : {ObjectiveKind::CurrentStress, ObjectiveKind::ConductionLoss, ObjectiveKind::ZvsCount}) {
    if (key == objective_name(o)) return o;
  }
  return std::nullopt;
}

inline std::string_view backend_name(BackendKind b) {
  return b == BackendKind::Oracle ? "oracle" : "surrogate";
}

inline std::optional<BackendKind> backend_from_name(std::string_view s) {
  const auto u = upper_ascii(s);
  if (u == "ORACLE") return BackendKind::Oracle;
  if (u == "SURROGATE") return BackendKind::Surrogate;
  return std::nullopt;
}

struct DesignSpec {
  Strategy strategy = Strategy::TPS;
  ObjectiveKind objective = ObjectiveKind::CurrentStress;
  OperatingConditions conditions;
  Algorithm algorithm = Algorithm::PSO;
  BackendKind backend = BackendKind::Oracle;
  int budget = 3000;
  int population = 30;
  std::uint64_t seed = 1;
  CircuitParams circuit;
  std::string checkpoint;       // required for the surrogate backend
  double penalty_weight = 0.0;  // 0 = 1e3 * metric scale

  void validate() const {
    conditions.validate();
    circuit.validate();
    if (population < 4) throw ValidationError("population", "must be >= 4");
    if (budget < population) throw ValidationError("budget", "must be >= population");
    if (!(penalty_weight >= 0.0)) throw ValidationError("penalty_weight", "must be >= 0");
    if (backend == BackendKind::Surrogate && checkpoint.empty()) {
      throw ValidationError("checkpoint", "required for the surrogate backend");
    }
  }

  int generations() const { return budget / population; }

  bool operator==(const DesignSpec&) const = default;
};

inline double metric_scale(const DesignSpec& s) {
  switch (s.objective) {
    case ObjectiveKind::CurrentStress: return 2.0 * s.conditions.P_r / s.conditions.V_1r;
    case ObjectiveKind::ConductionLoss: return 0.01 * s.conditions.P_r;
    case ObjectiveKind::ZvsCount: return 1.0;
  }
  return 1.0;
}

inline double penalty_weight(const DesignSpec& s) {
  return s.penalty_weight > 0.0 ? s.penalty_weight : 1e3 * metric_scale(s);
}

inline double metric_value(ObjectiveKind o, const PerformanceReport& r) {
  switch (o) {
    case ObjectiveKind::CurrentStress: return r.current_stress;
    case ObjectiveKind::ConductionLoss: return r.conduction_loss;
    case ObjectiveKind::ZvsCount: return static_cast<double>(r.hard_switching_count());
  }
  return 0.0;
}

inline double objective_value(const DesignSpec& s, const PerformanceReport& r) {
  const double e = (r.average_power - s.conditions.P_a) / s.conditions.P_r;
  return metric_value(s.objective, r) + penalty_weight(s) * e * e;
}

// Parameters for a point of the box. `pattern` is the strategy itself or,
// for HYBRID, the resolved sub-pattern.
inline ModulationParams params_at(Strategy strategy, std::optional<Strategy> variant,
                                  std::span<const double> x) {
  ModulationParams p{strategy, std::vector<double>(x.begin(), x.end()), variant};
  return p;
}

inline Objective make_objective(const DesignSpec& spec, std::optional<Strategy> variant,
                                const Backend& backend) {
  spec.validate();
  return [spec, variant, backend](std::span<const double> x) {
    const auto tuple = to_phase_shift_tuple(params_at(spec.strategy, variant, x));
    const auto r = evaluate_performance(spec.circuit, spec.conditions.V_1r,
                                        spec.conditions.V_2a, tuple, backend);
    return objective_value(spec, r);
  };
}

// Index of D_o in the parameter vector.
inline std::size_t outer_index(Strategy s) { return s == Strategy::SPS ? 0 : 1; }

inline double oracle_power(const DesignSpec& s, const ModulationParams& p) {
  return PeriodicCurrent(s.circuit, to_phase_shift_tuple(p), s.conditions.V_1r,
                         s.conditions.V_2a)
      .output_power();
}

// Bisection for g(x) = 0 on [a, b] with g(a), g(b) of opposite sign.
inline double bisect(const std::function<double(double)>& g, double a, double b, int iters = 60) {
  double ga = g(a);
  for (int i = 0; i < iters; ++i) {
    const double m = 0.5 * (a + b);
    const double gm = g(m);
    if ((gm < 0.0) == (ga < 0.0)) {
      a = m;
      ga = gm;
    } else {
      b = m;
    }
  }
  return 0.5 * (a + b);
}

// Moves D_o to the nearest value delivering exactly P_a (oracle), keeping
// the other ratios. Returns the input when no crossing is found.
inline ModulationParams trim_power(const DesignSpec& s, ModulationParams p) {
  const std::size_t j = outer_index(s.strategy);
  auto g = [&](double d) {
    auto q = p;
    q.values[j] = d;
    return oracle_power(s, q) - s.conditions.P_a;
  };
  const double d0 = p.values[j];
  const double g0 = g(d0);
  if (g0 == 0.0) return p;
  constexpr double step = 0.0025;
  for (int k = 1; k <= 400; ++k) {
    for (double dir : {-1.0, 1.0}) {
      const double a = std::clamp(d0 + dir * (k - 1) * step, 0.0, 1.0);
      const double b = std::clamp(d0 + dir * k * step, 0.0, 1.0);
      if (a == b) continue;
      const double ga = k == 1 ? g0 : g(a);
      const double gb = g(b);
      if ((ga < 0.0) != (gb < 0.0) || gb == 0.0) {
        p.values[j] = gb == 0.0 ? b : bisect(g, std::min(a, b), std::max(a, b));
        return p;
      }
    }
  }
  return p;
}

struct DesignOutcome {
  DesignSpec spec;
  ModulationParams best_params;
  Strategy resolved_strategy = Strategy::TPS;
  PhaseShiftTuple tuple;
  PerformanceReport report;  // oracle
  double power_error = 0.0;  // W, delivered - P_a
  double objective = 0.0;    // oracle objective at best_params
  std::vector<double> convergence_trace;
  long evaluations = 0;
  std::optional<PerformanceReport> surrogate_report;  // steering-backend view
  bool success = false;
};

class InfeasibleDesignError : public Error {
 public:
  explicit InfeasibleDesignError(DesignOutcome best)
      : Error(ErrorKind::Infeasible,
              "no candidate within 5% of P_a (best power error " +
                  std::to_string(best.power_error) + " W)"),
        best_(std::move(best)) {}
  const DesignOutcome& best() const noexcept { return best_; }

 private:
  DesignOutcome best_;
};

inline DesignOutcome design_variant(const DesignSpec& spec, std::optional<Strategy> variant,
                                    const SurrogatePair* pair) {
  Backend backend = OracleBackend{};
  if (spec.backend == BackendKind::Surrogate) {
    if (!pair) throw Error(ErrorKind::InvalidParams, "surrogate backend requires a checkpoint");
    backend = pair;
  }
  const auto f = make_objective(spec, variant, backend);
  OptimizerConfig cfg;
  cfg.population = spec.population;
  cfg.generations = spec.generations();
  cfg.seed = spec.seed;
  const auto dof = static_cast<std::size_t>(strategy_dof(spec.strategy));
  const auto res = optimize(spec.algorithm, f, Bounds::unit(dof), cfg);

  DesignOutcome out;
  out.spec = spec;
  out.resolved_strategy = variant.value_or(spec.strategy);
  out.best_params = trim_power(spec, params_at(spec.strategy, variant, res.best));
  out.tuple = to_phase_shift_tuple(out.best_params);
  out.report = oracle_report(spec.circuit, spec.conditions.V_1r, spec.conditions.V_2a, out.tuple);
  out.power_error = out.report.average_power - spec.conditions.P_a;
  out.objective = objective_value(spec, out.report);
  out.convergence_trace = res.trace;
  out.evaluations = res.evaluations;
  if (spec.backend == BackendKind::Surrogate) {
    out.surrogate_report = evaluate_performance(spec.circuit, spec.conditions.V_1r,
                                                spec.conditions.V_2a, out.tuple, backend);
  }
  out.success = std::abs(out.power_error) <= 0.01 * spec.conditions.P_a;
  return out;
}

inline DesignOutcome design(const DesignSpec& spec, const SurrogatePair* pair = nullptr) {
  spec.validate();
  std::vector<std::optional<Strategy>> variants;
  if (spec.strategy == Strategy::HYBRID) {
    for (auto v : kHybridVariants) variants.emplace_back(v);
  } else {
    variants.emplace_back(std::nullopt);
  }
  std::optional<DesignOutcome> best;
  for (const auto& v : variants) {
    auto o = design_variant(spec, v, pair);
    // Prefer power-feasible outcomes, then the lower oracle objective.
    const bool better = !best || (o.success && !best->success) ||
                        (o.success == best->success && o.objective < best->objective);
    if (better) best = std::move(o);
  }
  if (std::abs(best->power_error) > 0.05 * spec.conditions.P_a) {
    throw InfeasibleDesignError(std::move(*best));
  }
  return std::move(*best);
}

// ------------------------------------------------------------ references

// SPS outer ratio in [0, 1/2] delivering P_a (oracle); none when out of reach.
inline std::optional<double> sps_outer_ratio(const CircuitParams& c, double v1, double v2,
                                             double power) {
  auto g = [&](double d) {
    return PeriodicCurrent(c, PhaseShiftTuple{0.0, d, 0.0}, v1, v2).output_power() - power;
  };
  if (g(0.5) < 0.0 || g(0.0) > 0.0) return std::nullopt;
  return bisect(g, 0.0, 0.5);
}

struct SweepPoint {
  double power = 0.0;
  std::optional<DesignOutcome> outcome;
  std::string error;                // failure message when outcome is absent
  std::optional<double> sps_do;     // SPS reference at the same power
  std::optional<double> sps_stress;
};

inline std::vector<SweepPoint> sweep_power(const DesignSpec& spec, const std::vector<double>& powers,
                                           const SurrogatePair* pair = nullptr) {
  for (double p : powers) {
    if (!(p > 0.0) || p > spec.conditions.P_r) {
      throw ValidationError("power_grid", "every power must lie in (0, P_r]");
    }
  }
  std::vector<SweepPoint> out(powers.size());
  for (std::size_t i = 0; i < powers.size(); ++i) {
    auto& pt = out[i];
    pt.power = powers[i];
    DesignSpec s = spec;
    s.conditions.P_a = powers[i];
    try {
      pt.outcome = design(s, pair);
    } catch (const InfeasibleDesignError& e) {
      pt.error = std::string(error_prefix(e.kind())) + ": " + e.what();
    } catch (const Error& e) {
      pt.error = std::string(error_prefix(e.kind())) + ": " + e.what();
    }
    const auto& c = spec.conditions;
    if (auto d = sps_outer_ratio(spec.circuit, c.V_1r, c.V_2a, powers[i])) {
      pt.sps_do = d;
      pt.sps_stress = oracle_report(spec.circuit, c.V_1r, c.V_2a, {0.0, *d, 0.0}).current_stress;
    }
  }
  return out;
}

// Evenly spaced powers P_r/n, 2 P_r/n, ..., P_r.
inline std::vector<double> default_power_grid(double p_rated, int n = 10) {
  std::vector<double> g;
  for (int k = 1; k <= n; ++k) g.push_back(p_rated * k / n);
  return g;
}

struct StressCell {
  double d1 = 0.0;
  double d2 = 0.0;
  std::optional<double> d_o;
  std::optional<double> stress;  // empty when P_a is out of reach
};

// Current stress over a (D_1, D_2) grid of TPS inner ratios, with D_o solved
// per cell for the first crossing of P_a (scan then bisection); cells that
// cannot reach P_a within 0.5% are left empty.
inline std::vector<StressCell> stress_grid(const CircuitParams& c, double v1, double v2,
                                           double power, int n = 41) {
  std::vector<StressCell> cells(static_cast<std::size_t>(n * n));
  parallel_for(cells.size(), [&](std::size_t idx) {
    auto& cell = cells[idx];
    cell.d1 = static_cast<double>(idx / static_cast<std::size_t>(n)) / (n - 1);
    cell.d2 = static_cast<double>(idx % static_cast<std::size_t>(n)) / (n - 1);
    auto g = [&](double d) {
      return PeriodicCurrent(c, {cell.d1, d, cell.d2}, v1, v2).output_power() - power;
    };
    constexpr int kScan = 100;
    double a = 0.0, ga = g(0.0);
    for (int k = 1; k <= kScan; ++k) {
      const double b = static_cast<double>(k) / kScan;
      const double gb = g(b);
      if (ga < 0.0 && gb >= 0.0) {
        const double d = bisect(g, a, b);
        if (std::abs(g(d)) <= 0.005 * power) {
          cell.d_o = d;
          cell.stress = oracle_report(c, v1, v2, {cell.d1, d, cell.d2}).current_stress;
        }
        return;
      }
      a = b;
      ga = gb;
    }
  });
  return cells;
}

}  // namespace modkit
