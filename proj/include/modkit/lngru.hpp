#pragma once

// Stacked GRU with layer normalization on the gate pre-activations and an
// affine readout. Batches are columns; every matrix below is (rows x B).
//
// For one layer with input x and previous state h (gates r, z, n stacked in
// that order, LN normalizes each gate block over its H components):
//
//   a_r = W_r x + U_r h              r = sigmoid(g_r * LN(a_r) + b_r)
//   a_z = W_z x + U_z h              z = sigmoid(g_z * LN(a_z) + b_z)
//   a_n = W_n x + r * (U_n h)        n = tanh(g_n * LN(a_n) + b_n)
//   h'  = (1 - z) * n + z * h
//
//   LN(a) = (a - mean(a)) / sqrt(var(a) + 1e-5)
//
// Readout: y = R h_top + c.
//
// Flat parameter order (used by checkpoints and the optimizer): for each
// layer W (3H x in, row-major), U (3H x H, row-major), gain (3H), bias (3H);
// then R (out x H, row-major) and c (out).

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "modkit/error.hpp"
#include "modkit/random.hpp"

namespace modkit {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kLayerNormEps = 1e-5;

struct LayerParams {
  MatrixXd W;     // 3H x in
  MatrixXd U;     // 3H x H
  VectorXd gain;  // 3H
  VectorXd bias;  // 3H
};

struct SequenceModelParams {
  int input_dim = 0;
  int hidden_dim = 0;
  int output_dim = 0;
  std::vector<LayerParams> layers;
  MatrixXd readout_W;  // out x H
  VectorXd readout_b;  // out

  int num_layers() const { return static_cast<int>(layers.size()); }
};

inline std::size_t parameter_count(int input_dim, int hidden_dim, int output_dim,
                                   int num_layers) {
  const auto H = static_cast<std::size_t>(hidden_dim);
  std::size_t total = 0;
  for (int l = 0; l < num_layers; ++l) {
    const auto in = static_cast<std::size_t>(l == 0 ? input_dim : hidden_dim);
    total += 3 * H * (in + H + 2);
  }
  return total + static_cast<std::size_t>(output_dim) * (H + 1);
}

inline std::size_t parameter_count(const SequenceModelParams& p) {
  return parameter_count(p.input_dim, p.hidden_dim, p.output_dim, p.num_layers());
}

inline SequenceModelParams zero_model(int input_dim, int hidden_dim, int output_dim,
                                      int num_layers) {
  if (input_dim < 1 || hidden_dim < 1 || output_dim < 1 || num_layers < 1) {
    throw Error(ErrorKind::Dimension, "model dimensions must be positive");
  }
  SequenceModelParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.output_dim = output_dim;
  const int H = hidden_dim;
  for (int l = 0; l < num_layers; ++l) {
    const int in = l == 0 ? input_dim : H;
    p.layers.push_back({MatrixXd::Zero(3 * H, in), MatrixXd::Zero(3 * H, H),
                        VectorXd::Zero(3 * H), VectorXd::Zero(3 * H)});
  }
  p.readout_W = MatrixXd::Zero(output_dim, H);
  p.readout_b = VectorXd::Zero(output_dim);
  return p;
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit LN gains, zero
// biases. The readout is scaled by `readout_scale`.
inline SequenceModelParams random_model(int input_dim, int hidden_dim, int output_dim,
                                        int num_layers, std::uint64_t seed,
                                        double readout_scale = 1.0) {
  auto p = zero_model(input_dim, hidden_dim, output_dim, num_layers);
  auto rng = make_stream(seed, 0x9e1);
  auto fill = [&](MatrixXd& m, double s) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = uniform(rng, -s, s);
    }
  };
  for (int l = 0; l < num_layers; ++l) {
    auto& L = p.layers[static_cast<std::size_t>(l)];
    fill(L.W, 1.0 / std::sqrt(static_cast<double>(L.W.cols())));
    fill(L.U, 1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    L.gain.setOnes();
  }
  fill(p.readout_W, readout_scale / std::sqrt(static_cast<double>(hidden_dim)));
  return p;
}

// ------------------------------------------------------------ flattening

template <typename Fn>
void for_each_block(SequenceModelParams& p, Fn&& fn) {
  for (auto& L : p.layers) {
    fn(L.W);
    fn(L.U);
    fn(L.gain);
    fn(L.bias);
  }
  fn(p.readout_W);
  fn(p.readout_b);
}

inline VectorXd flatten(const SequenceModelParams& p) {
  VectorXd out(static_cast<Eigen::Index>(parameter_count(p)));
  Eigen::Index pos = 0;
  for_each_block(const_cast<SequenceModelParams&>(p), [&](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[pos++] = m(i, j);
    }
  });
  return out;
}

inline void unflatten(const VectorXd& flat, SequenceModelParams& p) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count(p))) {
    throw Error(ErrorKind::Dimension, "flat parameter vector has the wrong length");
  }
  Eigen::Index pos = 0;
  for_each_block(p, [&](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = flat[pos++];
    }
  });
}

// ------------------------------------------------------------ forward

struct LayerStepCache {
  MatrixXd x;       // in x B
  MatrixXd h_prev;  // H x B
  MatrixXd Uh;      // 3H x B
  MatrixXd a_hat;   // 3H x B normalized pre-activations
  MatrixXd inv_std; // 3 x B
  MatrixXd r, z, n; // H x B
};

namespace detail {

inline void layer_norm_block(const MatrixXd& a, MatrixXd& a_hat, MatrixXd& inv_std,
                             int block, int H) {
  const auto B = a.cols();
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto seg = a.col(b).segment(block * H, H);
    const double mu = seg.mean();
    const double var = (seg.array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(block, b) = is;
    a_hat.col(b).segment(block * H, H) = (seg.array() - mu) * is;
  }
}

inline void layer_norm_backward(const MatrixXd& a_hat, const MatrixXd& inv_std,
                                const MatrixXd& d_hat, MatrixXd& da, int block, int H) {
  for (Eigen::Index b = 0; b < a_hat.cols(); ++b) {
    const auto xh = a_hat.col(b).segment(block * H, H).array();
    const auto g = d_hat.col(b).segment(block * H, H).array();
    const double m1 = g.mean();
    const double m2 = (g * xh).mean();
    da.col(b).segment(block * H, H) = inv_std(block, b) * (g - m1 - xh * m2);
  }
}

inline MatrixXd sigmoid(const MatrixXd& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

}  // namespace detail

// One layer step. Fills `cache` when non-null.
inline MatrixXd layer_step(const LayerParams& P, int H, const MatrixXd& x,
                           const MatrixXd& h, LayerStepCache* cache) {
  const auto B = x.cols();
  MatrixXd Uh = P.U * h;
  MatrixXd a = P.W * x;
  a.topRows(2 * H) += Uh.topRows(2 * H);
  MatrixXd a_hat(3 * H, B), inv_std(3, B);
  detail::layer_norm_block(a, a_hat, inv_std, 0, H);
  detail::layer_norm_block(a, a_hat, inv_std, 1, H);
  auto affine = [&](int block) {
    return ((a_hat.middleRows(block * H, H).array().colwise() *
             P.gain.segment(block * H, H).array())
                .colwise() +
            P.bias.segment(block * H, H).array())
        .matrix();
  };
  MatrixXd r = detail::sigmoid(affine(0));
  MatrixXd z = detail::sigmoid(affine(1));
  a.bottomRows(H).array() += r.array() * Uh.bottomRows(H).array();
  detail::layer_norm_block(a, a_hat, inv_std, 2, H);
  MatrixXd n = affine(2).array().tanh().matrix();
  MatrixXd h_next = ((1.0 - z.array()) * n.array() + z.array() * h.array()).matrix();
  if (cache) {
    cache->x = x;
    cache->h_prev = h;
    cache->Uh = std::move(Uh);
    cache->a_hat = std::move(a_hat);
    cache->inv_std = std::move(inv_std);
    cache->r = std::move(r);
    cache->z = std::move(z);
    cache->n = std::move(n);
  }
  return h_next;
}

// Recurrent state of the whole stack (one H x B matrix per layer).
using HiddenState = std::vector<MatrixXd>;

inline HiddenState zero_state(const SequenceModelParams& p, Eigen::Index batch) {
  return HiddenState(p.layers.size(), MatrixXd::Zero(p.hidden_dim, batch));
}

// Advances the stack one step and returns the readout (out x B).
inline MatrixXd model_step(const SequenceModelParams& p, HiddenState& state,
                           const MatrixXd& x, std::vector<LayerStepCache>* cache = nullptr,
                           std::size_t step_index = 0) {
  if (x.rows() != p.input_dim) {
    throw Error(ErrorKind::Dimension, "input dimension does not match the model");
  }
  if (state.size() != p.layers.size()) {
    throw Error(ErrorKind::Dimension, "hidden state does not match the model");
  }
  if (cache) cache->resize(p.layers.size());
  const MatrixXd* input = &x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    state[l] = layer_step(p.layers[l], p.hidden_dim, *input, state[l],
                          cache ? &(*cache)[l] : nullptr);
    input = &state[l];
  }
  MatrixXd y = p.readout_W * state.back();
  y.colwise() += p.readout_b;
  if (!y.allFinite() || !state.back().allFinite()) {
    throw NumericError("non-finite activation at step " + std::to_string(step_index),
                       step_index);
  }
  return y;
}

struct SequenceCache {
  std::vector<std::vector<LayerStepCache>> steps;  // [t][layer]
  std::vector<MatrixXd> top;                        // h_top after step t
};

// Runs the stack over T inputs (each in x B). h0 defaults to zeros.
inline std::vector<MatrixXd> forward_sequence(const SequenceModelParams& p,
                                              const std::vector<MatrixXd>& inputs,
                                              SequenceCache* cache = nullptr,
                                              const HiddenState* h0 = nullptr) {
  if (inputs.empty()) return {};
  const auto B = inputs.front().cols();
  HiddenState state = h0 ? *h0 : zero_state(p, B);
  std::vector<MatrixXd> outputs;
  outputs.reserve(inputs.size());
  if (cache) {
    cache->steps.assign(inputs.size(), {});
    cache->top.assign(inputs.size(), MatrixXd());
  }
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (inputs[t].cols() != B) throw Error(ErrorKind::Dimension, "ragged batch");
    outputs.push_back(model_step(p, state, inputs[t], cache ? &cache->steps[t] : nullptr, t));
    if (cache) cache->top[t] = state.back();
  }
  return outputs;
}

// ------------------------------------------------------------ backward

// Gradient of one layer step. Accumulates parameter gradients into G and
// returns dx; dh is replaced by the gradient w.r.t. h_prev.
inline MatrixXd layer_step_backward(const LayerParams& P, int H, const LayerStepCache& c,
                                    MatrixXd& dh, LayerParams& G) {
  const auto B = c.x.cols();
  const auto r = c.r.array(), z = c.z.array(), n = c.n.array();
  MatrixXd d_hat(3 * H, B), da(3 * H, B);

  const auto dn = dh.array() * (1.0 - z);
  const auto dz = dh.array() * (c.h_prev.array() - n);
  MatrixXd dh_prev = (dh.array() * z).matrix();

  // n gate
  MatrixXd dy_n = (dn * (1.0 - n.square())).matrix();
  G.gain.segment(2 * H, H) += (dy_n.array() * c.a_hat.bottomRows(H).array()).rowwise().sum().matrix();
  G.bias.segment(2 * H, H) += dy_n.rowwise().sum();
  d_hat.bottomRows(H) = (dy_n.array().colwise() * P.gain.segment(2 * H, H).array()).matrix();
  detail::layer_norm_backward(c.a_hat, c.inv_std, d_hat, da, 2, H);
  const auto da_n = da.bottomRows(H).array();
  MatrixXd dr = (da_n * c.Uh.bottomRows(H).array()).matrix();

  // r, z gates
  MatrixXd dy_r = (dr.array() * r * (1.0 - r)).matrix();
  MatrixXd dy_z = (dz * z * (1.0 - z)).matrix();
  G.gain.segment(0, H) += (dy_r.array() * c.a_hat.topRows(H).array()).rowwise().sum().matrix();
  G.gain.segment(H, H) += (dy_z.array() * c.a_hat.middleRows(H, H).array()).rowwise().sum().matrix();
  G.bias.segment(0, H) += dy_r.rowwise().sum();
  G.bias.segment(H, H) += dy_z.rowwise().sum();
  d_hat.topRows(H) = (dy_r.array().colwise() * P.gain.segment(0, H).array()).matrix();
  d_hat.middleRows(H, H) = (dy_z.array().colwise() * P.gain.segment(H, H).array()).matrix();
  detail::layer_norm_backward(c.a_hat, c.inv_std, d_hat, da, 0, H);
  detail::layer_norm_backward(c.a_hat, c.inv_std, d_hat, da, 1, H);

  MatrixXd dUh(3 * H, B);
  dUh.topRows(2 * H) = da.topRows(2 * H);
  dUh.bottomRows(H) = (da.bottomRows(H).array() * r).matrix();

  G.W.noalias() += da * c.x.transpose();
  G.U.noalias() += dUh * c.h_prev.transpose();
  dh_prev.noalias() += P.U.transpose() * dUh;
  dh = std::move(dh_prev);
  return P.W.transpose() * da;
}

// Backpropagation through time. d_outputs[t] is dLoss/dy_t (out x B);
// d_inputs (optional) receives dLoss/dx_t. Gradients accumulate into G,
// which must have the shape of p (see zero_model).
inline void backward_sequence(const SequenceModelParams& p, const SequenceCache& cache,
                              const std::vector<MatrixXd>& d_outputs,
                              SequenceModelParams& G,
                              std::vector<MatrixXd>* d_inputs = nullptr) {
  const std::size_t T = cache.steps.size();
  if (d_outputs.size() != T) throw Error(ErrorKind::Dimension, "gradient length mismatch");
  if (T == 0) return;
  const auto B = d_outputs.front().cols();
  const int H = p.hidden_dim;
  HiddenState dh(p.layers.size(), MatrixXd::Zero(H, B));
  if (d_inputs) d_inputs->assign(T, MatrixXd());
  for (std::size_t t = T; t-- > 0;) {
    const MatrixXd& dy = d_outputs[t];
    G.readout_W.noalias() += dy * cache.top[t].transpose();
    G.readout_b += dy.rowwise().sum();
    dh.back().noalias() += p.readout_W.transpose() * dy;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
      MatrixXd dx = layer_step_backward(p.layers[l], H, cache.steps[t][l], dh[l], G.layers[l]);
      if (l > 0) {
        dh[l - 1] += dx;
      } else if (d_inputs) {
        (*d_inputs)[t] = std::move(dx);
      }
    }
  }
}

}  // namespace modkit
