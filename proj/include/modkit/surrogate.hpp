#pragma once

// Hierarchical recurrent surrogate of the converter.
//
// ModNet (switch level) predicts the bridge voltages one sample at a time:
//   input  [v_p(k-1), v_s(k-1), s_pri(k), s_sec(k)]  (voltages normalized)
//   output [v_p(k), v_s(k)]
// CirNet (system level) advances the inductor current with a residual head:
//   input  [i(k), v_p(k+1), v_s(k+1)]                (all normalized)
//   output y,  i(k+1) = i(k) + y
//
// Both are trained with teacher forcing and evaluated free-running. Sample k
// of a voltage trace holds over (t_{k-1}, t_k], matching the simulator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "modkit/converter.hpp"
#include "modkit/dataset.hpp"
#include "modkit/error.hpp"
#include "modkit/lngru.hpp"
#include "modkit/random.hpp"
#include "modkit/simulator.hpp"

namespace modkit {

// ------------------------------------------------------------ normalization

enum Channel { kVp = 0, kVs = 1, kI = 2 };

struct Normalizer {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> scale{1.0, 1.0, 1.0};

  double normalize(int c, double x) const { return (x - mean[c]) / scale[c]; }
  double denormalize(int c, double z) const { return z * scale[c] + mean[c]; }

  static Normalizer fit(const std::vector<const Sequence*>& seqs) {
    if (seqs.empty()) throw Error(ErrorKind::Dataset, "cannot fit normalizer on an empty split");
    Normalizer n;
    for (int c = 0; c < 3; ++c) {
      double sum = 0.0, sq = 0.0, count = 0.0;
      for (const auto* s : seqs) {
        const auto& tr = c == kVp ? s->v_p : c == kVs ? s->v_s : s->i_L;
        for (double x : tr.values) {
          sum += x;
          sq += x * x;
          count += 1.0;
        }
      }
      const double mu = sum / count;
      const double var = std::max(0.0, sq / count - mu * mu);
      n.mean[c] = mu;
      n.scale[c] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return n;
  }
};

// ------------------------------------------------------------ configuration

enum class VoltageSource { ModNet, Ideal };

struct TrainConfig {
  double lambda_d = 1.0;
  double lambda_p = 1.0;
  double learning_rate = 1e-3;
  int epochs = 2000;          // CirNet stage
  int modnet_epochs = 2000;   // ModNet stage
  int batch_size = 0;         // 0 = full batch
  std::uint64_t seed = 1;
  bool teacher_forcing = true;
  double grad_clip = 1.0;
  int edge_window = 3;            // ModNet anchoring excludes this many samples around edges
  int collocation_count = 40;     // unlabeled operating points for the physics term
  int collocation_refresh = 10;   // epochs between free-run state refreshes
  int validate_every = 50;        // epochs between free-running validation passes

  void validate() const {
    if (!(lambda_d >= 0.0) || !(lambda_p >= 0.0)) {
      throw Error(ErrorKind::Domain, "loss weights must be non-negative");
    }
    if (lambda_d == 0.0 && lambda_p == 0.0) {
      throw Error(ErrorKind::Domain, "lambda_d and lambda_p cannot both be zero");
    }
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::Domain, "learning rate must be positive");
    if (epochs < 0 || modnet_epochs < 0 || batch_size < 0 || collocation_count < 0) {
      throw Error(ErrorKind::Domain, "counts must be non-negative");
    }
    if (!(grad_clip > 0.0)) throw Error(ErrorKind::Domain, "grad_clip must be positive");
    if (edge_window < 0 || collocation_refresh < 1 || validate_every < 1) {
      throw Error(ErrorKind::Domain, "invalid schedule settings");
    }
  }
};

struct SurrogatePair {
  SequenceModelParams modnet;  // 4 -> 2
  SequenceModelParams cirnet;  // 3 -> 1
  Normalizer norm;
  VoltageSource source = VoltageSource::ModNet;
  TrainConfig train_config;
  CircuitParams circuit;
  Grid grid;
  double v1 = 200.0;  // dc links the ideal waveforms are built from
  double v2 = 160.0;
  Strategy strategy = Strategy::TPS;
};

inline constexpr int kModNetInputs = 4;
inline constexpr int kCirNetInputs = 3;
inline constexpr int kHidden = 32;
inline constexpr int kLayers = 2;

enum class InitMode { Random, Zero };

// Untrained pair wired to a dataset's circuit, grid and training statistics.
inline SurrogatePair make_surrogate(const Dataset& ds, InitMode init, std::uint64_t seed,
                                    VoltageSource source = VoltageSource::ModNet) {
  SurrogatePair p;
  if (init == InitMode::Random) {
    p.modnet = random_model(kModNetInputs, kHidden, 2, kLayers, seed * 2 + 1);
    p.cirnet = random_model(kCirNetInputs, kHidden, 1, kLayers, seed * 2 + 2, 0.1);
  } else {
    p.modnet = zero_model(kModNetInputs, kHidden, 2, kLayers);
    p.cirnet = zero_model(kCirNetInputs, kHidden, 1, kLayers);
  }
  p.norm = Normalizer::fit(ds.select(SplitName::Train));
  p.source = source;
  p.circuit = ds.config.circuit;
  p.grid = ds.config.grid;
  p.v1 = ds.config.load.source_voltage;
  p.v2 = ds.config.secondary_voltage;
  p.strategy = ds.config.strategy;
  return p;
}

// ------------------------------------------------------------ physics loss

// r_k = L (i_pred[k+1] - i_true[k]) - (v_p[k+1] - n v_s[k+1] - R_L i_true[k]) dt
// for k = 0 .. M-2, where M is the common length of the inputs.
inline std::vector<double> physics_residual(const std::vector<double>& i_pred,
                                            const std::vector<double>& i_true,
                                            const std::vector<double>& v_p,
                                            const std::vector<double>& v_s,
                                            const CircuitParams& c, double dt) {
  const std::size_t m = i_true.size();
  if (i_pred.size() != m || v_p.size() != m || v_s.size() != m) {
    throw Error(ErrorKind::Dimension, "physics residual inputs differ in length");
  }
  std::vector<double> r(m > 0 ? m - 1 : 0);
  for (std::size_t k = 0; k + 1 < m; ++k) {
    r[k] = c.L * (i_pred[k + 1] - i_true[k]) -
           (v_p[k + 1] - c.n * v_s[k + 1] - c.R_L * i_true[k]) * dt;
  }
  return r;
}

// Residual in units of the current scale: r / (L * current_scale).
inline std::vector<double> normalized_physics_residual(
    const std::vector<double>& i_pred, const std::vector<double>& i_true,
    const std::vector<double>& v_p, const std::vector<double>& v_s,
    const CircuitParams& c, double dt, double current_scale) {
  auto r = physics_residual(i_pred, i_true, v_p, v_s, c, dt);
  for (double& x : r) x /= c.L * current_scale;
  return r;
}

namespace detail {

inline double mean_square(const std::vector<std::vector<double>>& rows) {
  double acc = 0.0, count = 0.0;
  for (const auto& row : rows) {
    for (double x : row) {
      acc += x * x;
      count += 1.0;
    }
  }
  return count > 0.0 ? acc / count : 0.0;
}

inline void check_weights(double lambda_d, double lambda_p) {
  if (!(lambda_d >= 0.0) || !(lambda_p >= 0.0)) {
    throw Error(ErrorKind::Domain, "loss weights must be non-negative");
  }
}

}  // namespace detail

struct LossTerms {
  double total = 0.0;
  double data = 0.0;
  double physics = 0.0;
};

// lambda_d * mean((pred - truth)^2) + lambda_p * mean(residual^2), each mean
// taken over all N x T entries.
inline LossTerms loss_cir_terms(const std::vector<std::vector<double>>& predictions,
                                const std::vector<std::vector<double>>& truth,
                                const std::vector<std::vector<double>>& residuals,
                                double lambda_d, double lambda_p) {
  detail::check_weights(lambda_d, lambda_p);
  if (predictions.size() != truth.size()) {
    throw Error(ErrorKind::Dimension, "prediction and truth counts differ");
  }
  std::vector<std::vector<double>> err(predictions.size());
  for (std::size_t j = 0; j < predictions.size(); ++j) {
    if (predictions[j].size() != truth[j].size()) {
      throw Error(ErrorKind::Dimension, "prediction and truth lengths differ");
    }
    err[j].resize(truth[j].size());
    for (std::size_t k = 0; k < truth[j].size(); ++k) err[j][k] = predictions[j][k] - truth[j][k];
  }
  LossTerms t;
  t.data = detail::mean_square(err);
  t.physics = detail::mean_square(residuals);
  t.total = lambda_d * t.data + lambda_p * t.physics;
  return t;
}

inline double loss_cir(const std::vector<std::vector<double>>& predictions,
                       const std::vector<std::vector<double>>& truth,
                       const std::vector<std::vector<double>>& residuals,
                       double lambda_d, double lambda_p) {
  return loss_cir_terms(predictions, truth, residuals, lambda_d, lambda_p).total;
}

// Samples whose cyclic distance to every level change of the ideal
// waveform exceeds `edge_window`. A level change between samples m and m+1
// is located at sample m+1, the first sample at the new level.
inline std::vector<bool> edge_mask(const BridgeVoltages& ideal, int edge_window) {
  const int n = static_cast<int>(ideal.v_p.size());
  std::vector<int> dist(static_cast<std::size_t>(n), n);
  for (const auto* tr : {&ideal.v_p, &ideal.v_s}) {
    for (const auto& e : detect_edges(*tr)) {
      const int at = (e.index + 1) % n;
      for (int k = 0; k < n; ++k) {
        const int d = std::abs(k - at);
        auto& slot = dist[static_cast<std::size_t>(k)];
        slot = std::min(slot, std::min(d, n - d));
      }
    }
  }
  std::vector<bool> mask(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) mask[static_cast<std::size_t>(k)] = dist[static_cast<std::size_t>(k)] > edge_window;
  return mask;
}

// Data term: MSE against the measured waveforms over every sample of both
// channels. Physics term: MSE against the ideal three-level waveform over the
// samples selected by edge_mask (0 when that set is empty).
inline LossTerms modnet_loss_terms(const std::vector<BridgeVoltages>& predictions,
                                   const std::vector<BridgeVoltages>& truth,
                                   const std::vector<BridgeVoltages>& ideal,
                                   double lambda_d, double lambda_p, int edge_window) {
  detail::check_weights(lambda_d, lambda_p);
  if (predictions.size() != truth.size() || predictions.size() != ideal.size()) {
    throw Error(ErrorKind::Dimension, "modnet loss inputs differ in count");
  }
  double data = 0.0, phys = 0.0, n_data = 0.0, n_phys = 0.0;
  for (std::size_t j = 0; j < predictions.size(); ++j) {
    require_same_grid(predictions[j].v_p, truth[j].v_p);
    require_same_grid(predictions[j].v_p, ideal[j].v_p);
    const auto mask = edge_mask(ideal[j], edge_window);
    for (std::size_t k = 0; k < mask.size(); ++k) {
      const double ep = predictions[j].v_p[k] - truth[j].v_p[k];
      const double es = predictions[j].v_s[k] - truth[j].v_s[k];
      data += ep * ep + es * es;
      n_data += 2.0;
      if (mask[k]) {
        const double ip = predictions[j].v_p[k] - ideal[j].v_p[k];
        const double is = predictions[j].v_s[k] - ideal[j].v_s[k];
        phys += ip * ip + is * is;
        n_phys += 2.0;
      }
    }
  }
  LossTerms t;
  t.data = n_data > 0.0 ? data / n_data : 0.0;
  t.physics = n_phys > 0.0 ? phys / n_phys : 0.0;
  t.total = lambda_d * t.data + lambda_p * t.physics;
  return t;
}

inline double modnet_loss(const std::vector<BridgeVoltages>& predictions,
                          const std::vector<BridgeVoltages>& truth,
                          const std::vector<BridgeVoltages>& ideal, double lambda_d,
                          double lambda_p, int edge_window) {
  return modnet_loss_terms(predictions, truth, ideal, lambda_d, lambda_p, edge_window).total;
}

// ------------------------------------------------------------ rollouts

// Batched sequences are stored time-major: seq[k] is (channels x B).
using Batch = std::vector<MatrixXd>;

namespace detail {

inline BridgeVoltages ideal_for(const SurrogatePair& p, const PhaseShiftTuple& t) {
  return ideal_bridge_voltages(t, p.v1, p.v2, p.grid);
}

// Exogenous switching inputs for ModNet: (2 x B) per step.
inline Batch switching_batch(const SurrogatePair& p, const std::vector<PhaseShiftTuple>& tuples) {
  const int K = p.grid.size();
  const auto B = static_cast<Eigen::Index>(tuples.size());
  Batch out(static_cast<std::size_t>(K), MatrixXd(2, B));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto sw = switching_functions(tuples[static_cast<std::size_t>(b)], p.grid);
    for (int k = 0; k < K; ++k) {
      out[static_cast<std::size_t>(k)](0, b) = sw.primary[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(k)](1, b) = sw.secondary[static_cast<std::size_t>(k)];
    }
  }
  return out;
}

// Normalized voltages (2 x B per step) from physical traces.
inline Batch voltage_batch(const SurrogatePair& p, const std::vector<BridgeVoltages>& v) {
  const int K = p.grid.size();
  const auto B = static_cast<Eigen::Index>(v.size());
  Batch out(static_cast<std::size_t>(K), MatrixXd(2, B));
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& vb = v[static_cast<std::size_t>(b)];
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      out[ku](0, b) = p.norm.normalize(kVp, vb.v_p[ku]);
      out[ku](1, b) = p.norm.normalize(kVs, vb.v_s[ku]);
    }
  }
  return out;
}

}  // namespace detail

namespace detail {

// Normalized ideal bridge levels for switching states (2 x B).
inline MatrixXd ideal_level(const SurrogatePair& p, const MatrixXd& sw) {
  MatrixXd out(2, sw.cols());
  out.row(0) = ((p.v1 * sw.row(0).array() - p.norm.mean[kVp]) / p.norm.scale[kVp]).matrix();
  out.row(1) = ((p.v2 * sw.row(1).array() - p.norm.mean[kVs]) / p.norm.scale[kVs]).matrix();
  return out;
}

}  // namespace detail

// Free-running ModNet over one period, batched. The network output is a
// correction added to the commanded ideal level. v0 (2 x B, normalized) is
// the voltage at sample K-1 of the previous period.
inline Batch modnet_rollout_batch(const SurrogatePair& p, const Batch& switching,
                                  const MatrixXd& v0) {
  const auto B = v0.cols();
  HiddenState h = zero_state(p.modnet, B);
  Batch out;
  out.reserve(switching.size());
  MatrixXd x(kModNetInputs, B);
  MatrixXd prev = v0;
  for (std::size_t k = 0; k < switching.size(); ++k) {
    x.topRows(2) = prev;
    x.bottomRows(2) = switching[k];
    prev = model_step(p.modnet, h, x, nullptr, k) + detail::ideal_level(p, switching[k]);
    out.push_back(prev);
  }
  return out;
}

// Free-running CirNet. volts[k] (2 x B) are normalized voltages for sample k;
// returns K+1 normalized currents (the last one closes the period).
inline Batch cirnet_rollout_batch(const SequenceModelParams& cirnet, const Batch& volts,
                                  const MatrixXd& i0) {
  const auto B = i0.cols();
  const std::size_t K = volts.size();
  HiddenState h = zero_state(cirnet, B);
  Batch out;
  out.reserve(K + 1);
  out.push_back(i0);
  MatrixXd x(kCirNetInputs, B);
  for (std::size_t k = 0; k < K; ++k) {
    x.row(0) = out.back();
    x.bottomRows(2) = volts[(k + 1) % K];
    const MatrixXd y = model_step(cirnet, h, x, nullptr, k);
    out.push_back(out.back() + y);
  }
  return out;
}

// Normalized voltages CirNet sees for each tuple. v0 (physical) seeds the
// ModNet rollout; when absent the ideal level at sample K-1 is used.
inline Batch surrogate_voltages(const SurrogatePair& p, const std::vector<PhaseShiftTuple>& tuples,
                                const std::vector<std::array<double, 2>>* v0 = nullptr) {
  std::vector<BridgeVoltages> ideal;
  ideal.reserve(tuples.size());
  for (const auto& t : tuples) ideal.push_back(detail::ideal_for(p, t));
  if (p.source == VoltageSource::Ideal) return detail::voltage_batch(p, ideal);
  const auto B = static_cast<Eigen::Index>(tuples.size());
  MatrixXd start(2, B);
  const int K = p.grid.size();
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto bu = static_cast<std::size_t>(b);
    const double vp = v0 ? (*v0)[bu][0] : ideal[bu].v_p[static_cast<std::size_t>(K - 1)];
    const double vs = v0 ? (*v0)[bu][1] : ideal[bu].v_s[static_cast<std::size_t>(K - 1)];
    start(0, b) = p.norm.normalize(kVp, vp);
    start(1, b) = p.norm.normalize(kVs, vs);
  }
  return modnet_rollout_batch(p, detail::switching_batch(p, tuples), start);
}

inline BridgeVoltages modnet_rollout(const SurrogatePair& p, const PhaseShiftTuple& tuple,
                                     std::optional<std::array<double, 2>> v0 = std::nullopt) {
  const auto ideal = detail::ideal_for(p, tuple);
  MatrixXd start(2, 1);
  const auto last = static_cast<std::size_t>(p.grid.size() - 1);
  start(0, 0) = p.norm.normalize(kVp, v0 ? (*v0)[0] : ideal.v_p[last]);
  start(1, 0) = p.norm.normalize(kVs, v0 ? (*v0)[1] : ideal.v_s[last]);
  const auto out = modnet_rollout_batch(p, detail::switching_batch(p, {tuple}), start);
  BridgeVoltages v{SampledTrace(p.grid), SampledTrace(p.grid)};
  for (std::size_t k = 0; k < out.size(); ++k) {
    v.v_p[k] = p.norm.denormalize(kVp, out[k](0, 0));
    v.v_s[k] = p.norm.denormalize(kVs, out[k](1, 0));
  }
  return v;
}

// Normalized initial currents that make each free-run half-wave
// antisymmetric: i(K/2) = -i(0), solved by secant iteration.
inline MatrixXd periodic_initial_current(const SurrogatePair& p, const Batch& volts) {
  const int K = p.grid.size();
  const auto B = volts.front().cols();
  const double off = p.norm.mean[kI] / p.norm.scale[kI];
  // In normalized units the condition is z(K/2) + z(0) + 2*off = 0.
  auto g = [&](const MatrixXd& z0) {
    const auto tr = cirnet_rollout_batch(p.cirnet, volts, z0);
    return MatrixXd(tr[static_cast<std::size_t>(K / 2)] + z0 + MatrixXd::Constant(1, B, 2.0 * off));
  };
  MatrixXd x0 = MatrixXd::Constant(1, B, -off);
  MatrixXd g0 = g(x0);
  MatrixXd x1 = x0 - 0.5 * g0;  // slope is close to 2 for an integrator
  for (int it = 0; it < 3; ++it) {
    const MatrixXd g1 = g(x1);
    MatrixXd x2 = x1;
    for (Eigen::Index b = 0; b < B; ++b) {
      const double den = g1(0, b) - g0(0, b);
      x2(0, b) = std::abs(den) > 1e-12 ? x1(0, b) - g1(0, b) * (x1(0, b) - x0(0, b)) / den
                                       : x1(0, b);
    }
    x0 = x1;
    g0 = g1;
    x1 = x2;
  }
  return x1;
}

// Predicted inductor current over one period. With i0 absent the periodic
// (antisymmetric) starting value is solved for.
inline SampledTrace cirnet_rollout(const SurrogatePair& p, const PhaseShiftTuple& tuple,
                                   std::optional<double> i0 = std::nullopt,
                                   std::optional<std::array<double, 2>> v0 = std::nullopt) {
  std::vector<std::array<double, 2>> starts;
  if (v0) starts.push_back(*v0);
  const Batch volts = surrogate_voltages(p, {tuple}, v0 ? &starts : nullptr);
  MatrixXd z0(1, 1);
  if (i0) {
    z0(0, 0) = p.norm.normalize(kI, *i0);
  } else {
    z0 = periodic_initial_current(p, volts);
  }
  const auto tr = cirnet_rollout_batch(p.cirnet, volts, z0);
  SampledTrace out(p.grid);
  for (int k = 0; k < p.grid.size(); ++k) {
    out[static_cast<std::size_t>(k)] = p.norm.denormalize(kI, tr[static_cast<std::size_t>(k)](0, 0));
  }
  return out;
}

// Surrogate estimate of the full state for a tuple: predicted v_p, v_s and
// the periodic i_L. v_C1/v_C2 are the dc-link levels.
inline StateTrace surrogate_state(const SurrogatePair& p, const PhaseShiftTuple& tuple) {
  const Batch volts = surrogate_voltages(p, {tuple});
  const MatrixXd z0 = periodic_initial_current(p, volts);
  const auto tr = cirnet_rollout_batch(p.cirnet, volts, z0);
  StateTrace st{SampledTrace(p.grid), SampledTrace(p.grid, p.v1), SampledTrace(p.grid, p.v2),
                SampledTrace(p.grid), SampledTrace(p.grid)};
  for (int k = 0; k < p.grid.size(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    st.i_L[ku] = p.norm.denormalize(kI, tr[ku](0, 0));
    st.v_p[ku] = p.norm.denormalize(kVp, volts[ku](0, 0));
    st.v_s[ku] = p.norm.denormalize(kVs, volts[ku](1, 0));
  }
  return st;
}

// ------------------------------------------------------------ evaluation

inline double mean_absolute_error(const std::vector<SampledTrace>& pred,
                                  const std::vector<SampledTrace>& truth) {
  if (pred.size() != truth.size()) throw Error(ErrorKind::Dimension, "trace counts differ");
  double acc = 0.0, count = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    require_same_grid(pred[j], truth[j]);
    for (std::size_t k = 0; k < pred[j].size(); ++k) {
      acc += std::abs(pred[j][k] - truth[j][k]);
      count += 1.0;
    }
  }
  return count > 0.0 ? acc / count : 0.0;
}

// Free-running predictions for a set of sequences: i0 is the measured
// current at sample 0, ModNet starts from the measured voltages at K-1.
inline std::vector<SampledTrace> predict_currents(const SurrogatePair& p,
                                                  const std::vector<const Sequence*>& seqs) {
  if (seqs.empty()) return {};
  const int K = p.grid.size();
  const auto last = static_cast<std::size_t>(K - 1);
  std::vector<PhaseShiftTuple> tuples;
  std::vector<std::array<double, 2>> v0;
  MatrixXd z0(1, static_cast<Eigen::Index>(seqs.size()));
  for (std::size_t j = 0; j < seqs.size(); ++j) {
    tuples.push_back(seqs[j]->tuple);
    v0.push_back({seqs[j]->v_p[last], seqs[j]->v_s[last]});
    z0(0, static_cast<Eigen::Index>(j)) = p.norm.normalize(kI, seqs[j]->i_L[0]);
  }
  const Batch volts = surrogate_voltages(p, tuples, &v0);
  const auto tr = cirnet_rollout_batch(p.cirnet, volts, z0);
  std::vector<SampledTrace> out(seqs.size(), SampledTrace(p.grid));
  for (std::size_t j = 0; j < seqs.size(); ++j) {
    for (int k = 0; k < K; ++k) {
      out[j][static_cast<std::size_t>(k)] =
          p.norm.denormalize(kI, tr[static_cast<std::size_t>(k)](0, static_cast<Eigen::Index>(j)));
    }
  }
  return out;
}

// Free-running MAE of the inductor current in amperes.
inline double evaluate_mae(const SurrogatePair& p, const Dataset& ds, SplitName split) {
  const auto seqs = ds.select(split);
  if (seqs.empty()) throw Error(ErrorKind::Dataset, "split is empty");
  std::vector<SampledTrace> truth;
  for (const auto* s : seqs) truth.push_back(s->i_L);
  return mean_absolute_error(predict_currents(p, seqs), truth);
}

struct MaeTriple {
  double train = 0.0;
  double validation = 0.0;
  double test = 0.0;
};

inline MaeTriple evaluate_mae_all(const SurrogatePair& p, const Dataset& ds) {
  auto one = [&](SplitName s) {
    return ds.split(s).empty() ? std::numeric_limits<double>::quiet_NaN()
                               : evaluate_mae(p, ds, s);
  };
  return {one(SplitName::Train), one(SplitName::Validation), one(SplitName::Test)};
}

// ------------------------------------------------------------ training

struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  VectorXd m, v;
  long t = 0;

  void step(VectorXd& theta, const VectorXd& g) {
    if (m.size() != theta.size()) {
      m = VectorXd::Zero(theta.size());
      v = VectorXd::Zero(theta.size());
    }
    ++t;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

inline void clip_gradient(VectorXd& g, double max_norm) {
  const double n = g.norm();
  if (n > max_norm) g *= max_norm / n;
}

struct EpochRecord {
  std::string stage;  // "modnet" or "cirnet"
  int epoch = 0;
  double loss = 0.0;
  double l_d = 0.0;
  double l_p = 0.0;
  double val_mae = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
};

struct TrainResult {
  SurrogatePair pair;
  std::vector<EpochRecord> history;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, int batch_size,
                                                         std::uint64_t seed, int stage,
                                                         int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (batch_size <= 0 || static_cast<std::size_t>(batch_size) >= n) return {order};
  auto rng = make_stream(seed, static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(epoch));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

inline Batch gather(const Batch& full, const std::vector<std::size_t>& cols) {
  Batch out(full.size());
  for (std::size_t k = 0; k < full.size(); ++k) {
    out[k].resize(full[k].rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
      out[k].col(static_cast<Eigen::Index>(j)) = full[k].col(static_cast<Eigen::Index>(cols[j]));
    }
  }
  return out;
}

inline Batch concat(const Batch& a, const Batch& b) {
  if (a.empty()) return b;
  if (b.empty() || b.front().cols() == 0) return a;
  Batch out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    out[k].resize(a[k].rows(), a[k].cols() + b[k].cols());
    out[k] << a[k], b[k];
  }
  return out;
}

inline bool finite(double x) { return std::isfinite(x); }

}  // namespace detail

// Stage 1: ModNet on teacher-forced voltages.
inline void train_modnet(SurrogatePair& p, const Dataset& ds, const TrainConfig& cfg,
                         std::vector<EpochRecord>& history) {
  const auto train = ds.select(SplitName::Train);
  const auto val = ds.select(SplitName::Validation);
  const int K = p.grid.size();
  const auto N = static_cast<Eigen::Index>(train.size());

  std::vector<BridgeVoltages> truth, ideal;
  std::vector<PhaseShiftTuple> tuples;
  for (const auto* s : train) {
    truth.push_back({s->v_p, s->v_s});
    ideal.push_back(detail::ideal_for(p, s->tuple));
    tuples.push_back(s->tuple);
  }
  const Batch target = detail::voltage_batch(p, truth);
  const Batch anchor = detail::voltage_batch(p, ideal);
  const Batch sw = detail::switching_batch(p, tuples);
  Batch inputs(static_cast<std::size_t>(K), MatrixXd(kModNetInputs, N));
  Batch mask(static_cast<std::size_t>(K), MatrixXd(1, N));
  for (Eigen::Index b = 0; b < N; ++b) {
    const auto m = edge_mask(ideal[static_cast<std::size_t>(b)], cfg.edge_window);
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      inputs[ku].block(0, b, 2, 1) = target[static_cast<std::size_t>((k + K - 1) % K)].col(b);
      inputs[ku].block(2, b, 2, 1) = sw[ku].col(b);
      mask[ku](0, b) = m[ku] ? 1.0 : 0.0;
    }
  }

  // Validation: free-running voltage MAE (normalized units).
  std::vector<PhaseShiftTuple> vt;
  MatrixXd v0(2, static_cast<Eigen::Index>(val.size()));
  std::vector<BridgeVoltages> vtruth;
  for (std::size_t j = 0; j < val.size(); ++j) {
    vt.push_back(val[j]->tuple);
    vtruth.push_back({val[j]->v_p, val[j]->v_s});
    v0(0, static_cast<Eigen::Index>(j)) = p.norm.normalize(kVp, val[j]->v_p[static_cast<std::size_t>(K - 1)]);
    v0(1, static_cast<Eigen::Index>(j)) = p.norm.normalize(kVs, val[j]->v_s[static_cast<std::size_t>(K - 1)]);
  }
  const Batch vsw = val.empty() ? Batch{} : detail::switching_batch(p, vt);
  const Batch vtarget = val.empty() ? Batch{} : detail::voltage_batch(p, vtruth);
  auto validate = [&]() {
    if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto out = modnet_rollout_batch(p, vsw, v0);
    double acc = 0.0;
    for (std::size_t k = 0; k < out.size(); ++k) acc += (out[k] - vtarget[k]).cwiseAbs().sum();
    return acc / static_cast<double>(2 * K * val.size());
  };

  Adam opt;
  opt.lr = cfg.learning_rate;
  VectorXd theta = flatten(p.modnet);
  VectorXd best = theta;
  double best_val = validate();
  SequenceModelParams grad = zero_model(kModNetInputs, kHidden, 2, kLayers);
  for (int epoch = 1; epoch <= cfg.modnet_epochs; ++epoch) {
    double e_loss = 0.0, e_d = 0.0, e_p = 0.0, e_w = 0.0;
    for (const auto& cols : detail::minibatches(train.size(), cfg.batch_size, cfg.seed, 1, epoch)) {
      const Batch x = detail::gather(inputs, cols);
      const Batch y = detail::gather(target, cols);
      const Batch a = detail::gather(anchor, cols);
      const Batch m = detail::gather(mask, cols);
      SequenceCache cache;
      Batch out = forward_sequence(p.modnet, x, &cache);
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += a[k];
      double n_mask = 0.0;
      for (const auto& mk : m) n_mask += 2.0 * mk.sum();
      const double n_all = 2.0 * K * static_cast<double>(cols.size());
      double ld = 0.0, lp = 0.0;
      Batch dout(out.size());
      for (std::size_t k = 0; k < out.size(); ++k) {
        const MatrixXd e = out[k] - y[k];
        MatrixXd ea = out[k] - a[k];
        ea.array().rowwise() *= m[k].row(0).array();
        ld += e.squaredNorm();
        lp += ea.squaredNorm();
        dout[k] = (2.0 * cfg.lambda_d / n_all) * e;
        if (n_mask > 0.0) dout[k] += (2.0 * cfg.lambda_p / n_mask) * ea;
      }
      ld /= n_all;
      lp = n_mask > 0.0 ? lp / n_mask : 0.0;
      const double loss = cfg.lambda_d * ld + cfg.lambda_p * lp;
      if (!detail::finite(loss)) throw TrainingError("modnet loss is not finite", epoch);
      unflatten(VectorXd::Zero(theta.size()), grad);
      backward_sequence(p.modnet, cache, dout, grad);
      VectorXd g = flatten(grad);
      clip_gradient(g, cfg.grad_clip);
      opt.step(theta, g);
      unflatten(theta, p.modnet);
      const double w = static_cast<double>(cols.size());
      e_loss += w * loss;
      e_d += w * ld;
      e_p += w * lp;
      e_w += w;
    }
    EpochRecord rec{"modnet", epoch, e_loss / e_w, e_d / e_w, e_p / e_w};
    if (epoch % cfg.validate_every == 0 || epoch == cfg.modnet_epochs) {
      rec.val_mae = validate();
      if (!(rec.val_mae >= best_val)) {  // also true while best_val is NaN
        best_val = rec.val_mae;
        best = theta;
      }
    }
    history.push_back(rec);
  }
  if (!val.empty()) unflatten(best, p.modnet);
}

// Stage 2: CirNet with the voltage source frozen.
inline void train_cirnet(SurrogatePair& p, const Dataset& ds, const TrainConfig& cfg,
                         std::vector<EpochRecord>& history) {
  const auto train = ds.select(SplitName::Train);
  const auto val = ds.select(SplitName::Validation);
  const int K = p.grid.size();
  const auto last = static_cast<std::size_t>(K - 1);
  const double dt = p.grid.dt();
  const auto& c = p.circuit;
  const double i_scale = p.norm.scale[kI];

  auto tuples_of = [](const std::vector<const Sequence*>& seqs) {
    std::vector<PhaseShiftTuple> t;
    for (const auto* s : seqs) t.push_back(s->tuple);
    return t;
  };
  auto starts_of = [&](const std::vector<const Sequence*>& seqs) {
    std::vector<std::array<double, 2>> v0;
    for (const auto* s : seqs) v0.push_back({s->v_p[last], s->v_s[last]});
    return v0;
  };

  // Labeled sequences: teacher-forced currents, voltages from the source.
  const auto tstarts = starts_of(train);
  const Batch volts = surrogate_voltages(p, tuples_of(train), &tstarts);
  const auto N = static_cast<Eigen::Index>(train.size());
  Batch cur(static_cast<std::size_t>(K), MatrixXd(1, N));
  for (Eigen::Index b = 0; b < N; ++b) {
    for (int k = 0; k < K; ++k) {
      cur[static_cast<std::size_t>(k)](0, b) =
          p.norm.normalize(kI, train[static_cast<std::size_t>(b)]->i_L[static_cast<std::size_t>(k)]);
    }
  }

  // Physics increment c_k = (v_p - n v_s - R_L i)(k+1) dt / (L sigma_i) for
  // a state i(k) (normalized) and voltages (normalized).
  auto physics_target = [&](const MatrixXd& z, const MatrixXd& v) {
    MatrixXd out(1, z.cols());
    for (Eigen::Index b = 0; b < z.cols(); ++b) {
      const double vp = p.norm.denormalize(kVp, v(0, b));
      const double vs = p.norm.denormalize(kVs, v(1, b));
      const double i = p.norm.denormalize(kI, z(0, b));
      out(0, b) = (vp - c.n * vs - c.R_L * i) * dt / (c.L * i_scale);
    }
    return out;
  };

  auto build_inputs = [&](const Batch& states, const Batch& v) {
    const auto B = states.front().cols();
    Batch x(static_cast<std::size_t>(K), MatrixXd(kCirNetInputs, B));
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      x[ku].row(0) = states[ku];
      x[ku].bottomRows(2) = v[static_cast<std::size_t>((k + 1) % K)];
    }
    return x;
  };

  const Batch x_lab = build_inputs(cur, volts);
  Batch inc_lab(static_cast<std::size_t>(K)), phys_lab(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    inc_lab[ku] = cur[static_cast<std::size_t>((k + 1) % K)] - cur[ku];
    phys_lab[ku] = physics_target(cur[ku], volts[static_cast<std::size_t>((k + 1) % K)]);
  }

  // Collocation points: unlabeled operating points in the strategy box.
  const bool use_colloc = cfg.lambda_p > 0.0 && cfg.collocation_count > 0;
  std::vector<PhaseShiftTuple> ctuples;
  if (use_colloc) {
    const auto pts = halton_points(static_cast<std::size_t>(cfg.collocation_count), 3,
                                   cfg.seed ^ 0xc011ULL);
    for (std::size_t j = 0; j < pts.size(); ++j) {
      ctuples.push_back(to_phase_shift_tuple(params_from_unit(p.strategy, pts[j], j)));
    }
  }
  const Batch cvolts = use_colloc ? surrogate_voltages(p, ctuples) : Batch{};
  Batch x_col, phys_col;
  auto refresh_collocation = [&]() {
    const MatrixXd z0 = periodic_initial_current(p, cvolts);
    Batch states = cirnet_rollout_batch(p.cirnet, cvolts, z0);
    states.pop_back();
    x_col = build_inputs(states, cvolts);
    phys_col.assign(static_cast<std::size_t>(K), MatrixXd());
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      phys_col[ku] = physics_target(states[ku], cvolts[static_cast<std::size_t>((k + 1) % K)]);
    }
  };

  auto validate = [&]() {
    if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<SampledTrace> truth;
    for (const auto* s : val) truth.push_back(s->i_L);
    return mean_absolute_error(predict_currents(p, val), truth);
  };

  Adam opt;
  opt.lr = cfg.learning_rate;
  VectorXd theta = flatten(p.cirnet);
  VectorXd best = theta;
  double best_val = validate();
  SequenceModelParams grad = zero_model(kCirNetInputs, kHidden, 1, kLayers);
  const auto n_col = static_cast<std::size_t>(ctuples.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (use_colloc && (epoch - 1) % cfg.collocation_refresh == 0) refresh_collocation();
    const auto batches = detail::minibatches(train.size(), cfg.batch_size, cfg.seed, 2, epoch);
    double e_loss = 0.0, e_d = 0.0, e_p = 0.0, e_w = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& cols = batches[bi];
      std::vector<std::size_t> ccols;
      for (std::size_t j = bi; j < n_col; j += batches.size()) ccols.push_back(j);
      const auto nl = static_cast<Eigen::Index>(cols.size());
      const Batch x = detail::concat(detail::gather(x_lab, cols),
                                     use_colloc ? detail::gather(x_col, ccols) : Batch{});
      SequenceCache cache;
      const Batch out = forward_sequence(p.cirnet, x, &cache);
      const double n_d = static_cast<double>(K * nl);
      const double n_p = static_cast<double>(K) * static_cast<double>(nl + static_cast<Eigen::Index>(ccols.size()));
      double ld = 0.0, lp = 0.0;
      Batch dout(out.size());
      const Batch inc = detail::gather(inc_lab, cols);
      const Batch pl = detail::gather(phys_lab, cols);
      const Batch pc = use_colloc ? detail::gather(phys_col, ccols) : Batch{};
      for (std::size_t k = 0; k < out.size(); ++k) {
        const MatrixXd e = out[k].leftCols(nl) - inc[k];
        MatrixXd r(1, out[k].cols());
        r.leftCols(nl) = out[k].leftCols(nl) - pl[k];
        if (out[k].cols() > nl) r.rightCols(out[k].cols() - nl) = out[k].rightCols(out[k].cols() - nl) - pc[k];
        ld += e.squaredNorm();
        lp += r.squaredNorm();
        dout[k] = (2.0 * cfg.lambda_p / n_p) * r;
        dout[k].leftCols(nl) += (2.0 * cfg.lambda_d / n_d) * e;
      }
      ld /= n_d;
      lp /= n_p;
      const double loss = cfg.lambda_d * ld + cfg.lambda_p * lp;
      if (!detail::finite(loss)) throw TrainingError("cirnet loss is not finite", epoch);
      unflatten(VectorXd::Zero(theta.size()), grad);
      backward_sequence(p.cirnet, cache, dout, grad);
      VectorXd g = flatten(grad);
      clip_gradient(g, cfg.grad_clip);
      opt.step(theta, g);
      unflatten(theta, p.cirnet);
      const double w = static_cast<double>(cols.size());
      e_loss += w * loss;
      e_d += w * ld;
      e_p += w * lp;
      e_w += w;
    }
    EpochRecord rec{"cirnet", epoch, e_loss / e_w, e_d / e_w, e_p / e_w};
    if (epoch % cfg.validate_every == 0 || epoch == cfg.epochs) {
      try {
        rec.val_mae = validate();
      } catch (const NumericError&) {
        rec.val_mae = std::numeric_limits<double>::infinity();
      }
      if (!(rec.val_mae >= best_val)) {
        best_val = rec.val_mae;
        best = theta;
      }
    }
    history.push_back(rec);
  }
  if (!val.empty()) unflatten(best, p.cirnet);
}

// Two-stage training: ModNet (skipped for the ideal voltage source), then
// CirNet with ModNet frozen.
inline TrainResult train(SurrogatePair pair, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.split(SplitName::Train).empty()) throw Error(ErrorKind::Dataset, "training split is empty");
  pair.train_config = cfg;
  TrainResult res;
  if (pair.source == VoltageSource::ModNet) train_modnet(pair, ds, cfg, res.history);
  train_cirnet(pair, ds, cfg, res.history);
  res.pair = std::move(pair);
  return res;
}

// ------------------------------------------------------------ checkpoints

namespace detail {

inline nlohmann::ordered_json model_json(const SequenceModelParams& m) {
  const VectorXd flat = flatten(m);
  return {{"architecture",
           {{"cell", "ln-gru"},
            {"layers", m.num_layers()},
            {"input_dim", m.input_dim},
            {"hidden_dim", m.hidden_dim},
            {"output_dim", m.output_dim},
            {"parameter_count", flat.size()}}},
          {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

inline SequenceModelParams model_from_json(const nlohmann::json& j) {
  const auto& a = j.at("architecture");
  if (a.at("cell").get<std::string>() != "ln-gru") {
    throw Error(ErrorKind::Parse, "unsupported cell type");
  }
  auto m = zero_model(a.at("input_dim"), a.at("hidden_dim"), a.at("output_dim"), a.at("layers"));
  const auto v = j.at("parameters").get<std::vector<double>>();
  unflatten(Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())), m);
  return m;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json checkpoint_json(const SurrogatePair& p) {
  const auto& t = p.train_config;
  nlohmann::ordered_json j;
  j["format"] = "modkit-surrogate";
  j["version"] = kCheckpointVersion;
  j["parameter_order"] =
      "per layer: W (3H x in), U (3H x H), gain (3H), bias (3H), row-major, gates r,z,n; "
      "then readout W (out x H), readout b (out)";
  j["voltage_source"] = p.source == VoltageSource::ModNet ? "modnet" : "ideal";
  j["strategy"] = strategy_name(p.strategy);
  j["modnet"] = detail::model_json(p.modnet);
  j["cirnet"] = detail::model_json(p.cirnet);
  j["normalization"] = {{"channels", {"v_p", "v_s", "i_L"}},
                        {"mean", p.norm.mean},
                        {"scale", p.norm.scale}};
  j["train_config"] = {{"lambda_d", t.lambda_d},
                       {"lambda_p", t.lambda_p},
                       {"learning_rate", t.learning_rate},
                       {"epochs", t.epochs},
                       {"modnet_epochs", t.modnet_epochs},
                       {"batch_size", t.batch_size},
                       {"seed", t.seed},
                       {"teacher_forcing", t.teacher_forcing},
                       {"grad_clip", t.grad_clip},
                       {"edge_window", t.edge_window},
                       {"collocation_count", t.collocation_count},
                       {"collocation_refresh", t.collocation_refresh},
                       {"validate_every", t.validate_every}};
  j["circuit"] = detail::circuit_json(p.circuit);
  j["grid"] = {{"samples_per_period", p.grid.samples_per_period}, {"period", p.grid.period}};
  j["v1"] = p.v1;
  j["v2"] = p.v2;
  return j;
}

inline SurrogatePair surrogate_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw Error(ErrorKind::Parse, "unsupported checkpoint version");
    }
    SurrogatePair p;
    p.source = j.at("voltage_source").get<std::string>() == "ideal" ? VoltageSource::Ideal
                                                                    : VoltageSource::ModNet;
    p.strategy = strategy_from_name(j.at("strategy").get<std::string>()).value_or(Strategy::TPS);
    p.modnet = detail::model_from_json(j.at("modnet"));
    p.cirnet = detail::model_from_json(j.at("cirnet"));
    if (p.modnet.input_dim != kModNetInputs || p.modnet.output_dim != 2 ||
        p.cirnet.input_dim != kCirNetInputs || p.cirnet.output_dim != 1) {
      throw Error(ErrorKind::Dimension, "checkpoint networks have the wrong interface");
    }
    p.norm.mean = j.at("normalization").at("mean").get<std::array<double, 3>>();
    p.norm.scale = j.at("normalization").at("scale").get<std::array<double, 3>>();
    const auto& t = j.at("train_config");
    auto& c = p.train_config;
    c.lambda_d = t.at("lambda_d");
    c.lambda_p = t.at("lambda_p");
    c.learning_rate = t.at("learning_rate");
    c.epochs = t.at("epochs");
    c.modnet_epochs = t.at("modnet_epochs");
    c.batch_size = t.at("batch_size");
    c.seed = t.at("seed");
    c.teacher_forcing = t.at("teacher_forcing");
    c.grad_clip = t.at("grad_clip");
    c.edge_window = t.at("edge_window");
    c.collocation_count = t.at("collocation_count");
    c.collocation_refresh = t.at("collocation_refresh");
    c.validate_every = t.at("validate_every");
    p.circuit = detail::circuit_from_json(j.at("circuit"));
    p.grid = Grid::make(j.at("grid").at("samples_per_period"), j.at("grid").at("period"));
    p.v1 = j.at("v1");
    p.v2 = j.at("v2");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("bad checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const SurrogatePair& p, const std::filesystem::path& path) {
  detail::write_text(path, checkpoint_json(p).dump(1) + "\n");
}

inline SurrogatePair load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, std::string("bad checkpoint: ") + e.what());
  }
  return surrogate_from_json(j);
}

}  // namespace modkit
