#pragma once

// Box-constrained metaheuristics: DE (rand/1/bin), PSO (global best) and a
// real-coded GA. Every random draw comes from a stream keyed by
// (seed, generation, member), and a generation's candidates are evaluated
// by index, so serial and parallel runs agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "modkit/converter.hpp"
#include "modkit/error.hpp"
#include "modkit/parallel.hpp"
#include "modkit/random.hpp"

namespace modkit {

enum class Algorithm { PSO, DE, GA };

inline std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::PSO: return "PSO";
    case Algorithm::DE: return "DE";
    case Algorithm::GA: return "GA";
  }
  return "";
}

inline std::optional<Algorithm> algorithm_from_name(std::string_view s) {
  const auto u = upper_ascii(s);
  for (Algorithm a : {Algorithm::PSO, Algorithm::DE, Algorithm::GA}) {
    if (u == algorithm_name(a)) return a;
  }
  return std::nullopt;
}

struct Bounds {
  std::vector<double> lo, hi;

  std::size_t dims() const { return lo.size(); }
  double range(std::size_t d) const { return hi[d] - lo[d]; }
  double clip(std::size_t d, double x) const { return std::clamp(x, lo[d], hi[d]); }

  void validate() const {
    if (lo.empty() || lo.size() != hi.size()) {
      throw Error(ErrorKind::Dimension, "bounds must have matching non-empty lo/hi");
    }
    for (std::size_t d = 0; d < lo.size(); ++d) {
      if (!(hi[d] > lo[d]) || !std::isfinite(lo[d]) || !std::isfinite(hi[d])) {
        throw Error(ErrorKind::Domain, "bounds have zero volume");
      }
    }
  }

  static Bounds unit(std::size_t dims) {
    return {std::vector<double>(dims, 0.0), std::vector<double>(dims, 1.0)};
  }
};

struct OptimizerConfig {
  int population = 30;
  int generations = 100;  // including the initial population
  std::uint64_t seed = 1;
  std::vector<std::vector<double>> initial;  // optional seeds for the first members

  // DE
  double de_f = 0.7;
  double de_cr = 0.9;
  // PSO
  double pso_inertia = 0.72;
  double pso_c1 = 1.49;
  double pso_c2 = 1.49;
  // GA
  double ga_crossover = 0.9;
  double ga_blend_alpha = 0.5;
  double ga_sigma = 0.1;  // fraction of the range
  int ga_elite = 2;
};

struct OptimizeResult {
  std::vector<double> best;
  double best_value = std::numeric_limits<double>::infinity();
  std::vector<double> trace;  // best-so-far after each generation
  long evaluations = 0;
};

using Objective = std::function<double(std::span<const double>)>;

namespace detail {

inline double safe_eval(const Objective& f, std::span<const double> x) {
  double v;
  try {
    v = f(x);
  } catch (const Error&) {
    return std::numeric_limits<double>::infinity();
  }
  return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
}

inline std::vector<double> evaluate_all(const Objective& f,
                                        const std::vector<std::vector<double>>& xs) {
  std::vector<double> out(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) { out[i] = safe_eval(f, xs[i]); });
  return out;
}

inline std::vector<std::vector<double>> initial_population(const Bounds& b,
                                                           const OptimizerConfig& cfg) {
  std::vector<std::vector<double>> pop(static_cast<std::size_t>(cfg.population));
  for (std::size_t i = 0; i < pop.size(); ++i) {
    if (i < cfg.initial.size()) {
      if (cfg.initial[i].size() != b.dims()) {
        throw Error(ErrorKind::Dimension, "initial point has the wrong dimension");
      }
      pop[i] = cfg.initial[i];
      for (std::size_t d = 0; d < b.dims(); ++d) pop[i][d] = b.clip(d, pop[i][d]);
      continue;
    }
    auto rng = make_stream(cfg.seed, 0, i);
    pop[i].resize(b.dims());
    for (std::size_t d = 0; d < b.dims(); ++d) pop[i][d] = uniform(rng, b.lo[d], b.hi[d]);
  }
  return pop;
}

struct Tracker {
  OptimizeResult res;
  void offer(const std::vector<double>& x, double v) {
    if (v < res.best_value || res.best.empty()) {
      res.best_value = v;
      res.best = x;
    }
  }
  void offer_all(const std::vector<std::vector<double>>& xs, const std::vector<double>& vs) {
    for (std::size_t i = 0; i < xs.size(); ++i) offer(xs[i], vs[i]);
    res.evaluations += static_cast<long>(xs.size());
  }
  void end_generation() { res.trace.push_back(res.best_value); }
};

inline std::size_t pick_other(std::mt19937_64& rng, std::size_t n,
                              std::initializer_list<std::size_t> taken) {
  for (;;) {
    const std::size_t c = uniform_index(rng, n);
    if (std::find(taken.begin(), taken.end(), c) == taken.end()) return c;
  }
}

inline OptimizeResult run_de(const Objective& f, const Bounds& b, const OptimizerConfig& cfg) {
  const std::size_t P = static_cast<std::size_t>(cfg.population);
  if (P < 4) throw Error(ErrorKind::InvalidParams, "DE needs a population of at least 4");
  const std::size_t D = b.dims();
  auto pop = initial_population(b, cfg);
  auto fit = evaluate_all(f, pop);
  Tracker t;
  t.offer_all(pop, fit);
  t.end_generation();
  for (int g = 1; g < cfg.generations; ++g) {
    std::vector<std::vector<double>> trial(P, std::vector<double>(D));
    for (std::size_t i = 0; i < P; ++i) {
      auto rng = make_stream(cfg.seed, static_cast<std::uint64_t>(g), i);
      const std::size_t r1 = pick_other(rng, P, {i});
      const std::size_t r2 = pick_other(rng, P, {i, r1});
      const std::size_t r3 = pick_other(rng, P, {i, r1, r2});
      const std::size_t jrand = uniform_index(rng, D);
      for (std::size_t d = 0; d < D; ++d) {
        const bool cross = uniform01(rng) < cfg.de_cr || d == jrand;
        trial[i][d] = cross ? b.clip(d, pop[r1][d] + cfg.de_f * (pop[r2][d] - pop[r3][d]))
                            : pop[i][d];
      }
    }
    const auto tf = evaluate_all(f, trial);
    t.offer_all(trial, tf);
    for (std::size_t i = 0; i < P; ++i) {
      if (tf[i] <= fit[i]) {
        pop[i] = std::move(trial[i]);
        fit[i] = tf[i];
      }
    }
    t.end_generation();
  }
  return t.res;
}

inline OptimizeResult run_pso(const Objective& f, const Bounds& b, const OptimizerConfig& cfg) {
  const std::size_t P = static_cast<std::size_t>(cfg.population);
  const std::size_t D = b.dims();
  auto x = initial_population(b, cfg);
  std::vector<std::vector<double>> v(P, std::vector<double>(D));
  for (std::size_t i = 0; i < P; ++i) {
    auto rng = make_stream(cfg.seed, 0, P + i);
    for (std::size_t d = 0; d < D; ++d) {
      const double vmax = 0.5 * b.range(d);
      v[i][d] = uniform(rng, -vmax, vmax) * 0.5;
    }
  }
  auto fx = evaluate_all(f, x);
  auto pbest = x;
  auto pfit = fx;
  Tracker t;
  t.offer_all(x, fx);
  t.end_generation();
  for (int g = 1; g < cfg.generations; ++g) {
    const std::vector<double> gbest = t.res.best;
    for (std::size_t i = 0; i < P; ++i) {
      auto rng = make_stream(cfg.seed, static_cast<std::uint64_t>(g), i);
      for (std::size_t d = 0; d < D; ++d) {
        const double vmax = 0.5 * b.range(d);
        const double r1 = uniform01(rng), r2 = uniform01(rng);
        double vel = cfg.pso_inertia * v[i][d] + cfg.pso_c1 * r1 * (pbest[i][d] - x[i][d]) +
                     cfg.pso_c2 * r2 * (gbest[d] - x[i][d]);
        vel = std::clamp(vel, -vmax, vmax);
        double pos = x[i][d] + vel;
        if (pos < b.lo[d] || pos > b.hi[d]) {
          pos = b.clip(d, pos);
          vel = 0.0;
        }
        v[i][d] = vel;
        x[i][d] = pos;
      }
    }
    fx = evaluate_all(f, x);
    t.offer_all(x, fx);
    for (std::size_t i = 0; i < P; ++i) {
      if (fx[i] < pfit[i]) {
        pfit[i] = fx[i];
        pbest[i] = x[i];
      }
    }
    t.end_generation();
  }
  return t.res;
}

inline OptimizeResult run_ga(const Objective& f, const Bounds& b, const OptimizerConfig& cfg) {
  const std::size_t P = static_cast<std::size_t>(cfg.population);
  if (P < 2) throw Error(ErrorKind::InvalidParams, "GA needs a population of at least 2");
  const std::size_t D = b.dims();
  const std::size_t elite = std::min<std::size_t>(P - 1, static_cast<std::size_t>(std::max(0, cfg.ga_elite)));
  auto pop = initial_population(b, cfg);
  auto fit = evaluate_all(f, pop);
  Tracker t;
  t.offer_all(pop, fit);
  t.end_generation();
  for (int g = 1; g < cfg.generations; ++g) {
    std::vector<std::size_t> order(P);
    for (std::size_t i = 0; i < P; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return fit[a] < fit[c]; });
    std::vector<std::vector<double>> next;
    std::vector<double> next_fit;
    for (std::size_t e = 0; e < elite; ++e) {
      next.push_back(pop[order[e]]);
      next_fit.push_back(fit[order[e]]);
    }
    std::vector<std::vector<double>> children(P - elite, std::vector<double>(D));
    for (std::size_t c = 0; c < children.size(); ++c) {
      auto rng = make_stream(cfg.seed, static_cast<std::uint64_t>(g), c);
      auto tournament = [&]() {
        const std::size_t a = uniform_index(rng, P), d = uniform_index(rng, P);
        return fit[a] <= fit[d] ? a : d;
      };
      const std::size_t pa = tournament(), pb = tournament();
      const bool cross = uniform01(rng) < cfg.ga_crossover;
      for (std::size_t d = 0; d < D; ++d) {
        double gene = pop[pa][d];
        if (cross) {
          // Blend crossover: uniform on the parents' interval widened by alpha.
          const double lo = std::min(pop[pa][d], pop[pb][d]);
          const double hi = std::max(pop[pa][d], pop[pb][d]);
          const double ext = cfg.ga_blend_alpha * (hi - lo);
          gene = uniform(rng, lo - ext, hi + ext);
        }
        if (uniform01(rng) < 1.0 / static_cast<double>(D)) {
          gene += cfg.ga_sigma * b.range(d) * standard_normal(rng);
        }
        children[c][d] = b.clip(d, gene);
      }
    }
    const auto cf = evaluate_all(f, children);
    t.offer_all(children, cf);
    for (std::size_t c = 0; c < children.size(); ++c) {
      next.push_back(std::move(children[c]));
      next_fit.push_back(cf[c]);
    }
    pop = std::move(next);
    fit = std::move(next_fit);
    t.end_generation();
  }
  return t.res;
}

}  // namespace detail

inline OptimizeResult optimize(Algorithm algorithm, const Objective& f, const Bounds& bounds,
                               const OptimizerConfig& cfg) {
  bounds.validate();
  if (cfg.population < 1 || cfg.generations < 1) {
    throw Error(ErrorKind::InvalidParams, "population and generations must be positive");
  }
  switch (algorithm) {
    case Algorithm::DE: return detail::run_de(f, bounds, cfg);
    case Algorithm::PSO: return detail::run_pso(f, bounds, cfg);
    case Algorithm::GA: return detail::run_ga(f, bounds, cfg);
  }
  throw Error(ErrorKind::Internal, "unknown algorithm");
}

}  // namespace modkit
