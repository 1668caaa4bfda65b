#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabb/common.hpp"
#include "tabb/datasets.hpp"
#include "tabb/numerics.hpp"

namespace tabb {

enum class WtarMode { variance, inverse_variance };

inline std::string to_string(WtarMode m) {
  return m == WtarMode::variance ? "variance" : "inverse_variance";
}

inline WtarMode wtar_mode_from_string(const std::string& s) {
  if (s == "variance") return WtarMode::variance;
  if (s == "inverse_variance") return WtarMode::inverse_variance;
  throw ConfigError("unknown wtar mode '" + s + "' (expected variance or inverse_variance)");
}

struct RepConfig {
  int latent_state_dim = 64;
  int latent_action_dim = 64;
  std::vector<int> state_encoder_hidden{256, 256};
  std::vector<int> state_action_encoder_hidden{256, 256};
  std::vector<int> f_ref_hidden{256, 256};
  Activation activation = Activation::relu;
  double learning_rate = 3e-4;
  int batch_size = 256;
  int wtar_refresh = 1000;
  double wtar_clamp_lo = 0.1;
  double wtar_clamp_hi = 10.0;
  bool wtar_normalize = true;
  WtarMode wtar_mode = WtarMode::variance;
};

// phi: state -> z_s. psi: state||action -> z_sa. f_ref: z_s||z_sa -> (r_hat, z_next_hat).
struct EncoderStack {
  MlpModule phi;
  MlpModule psi;
  MlpModule f_ref;
  int state_dim = 0;
  int action_dim = 0;
  int latent_state_dim = 0;
  int latent_action_dim = 0;
};

inline EncoderStack make_stack(int state_dim, int action_dim, const RepConfig& cfg, Rng& rng) {
  if (state_dim < 1 || action_dim < 1)
    throw std::invalid_argument("state and action dims must be >= 1");
  if (cfg.latent_state_dim < 1 || cfg.latent_action_dim < 1)
    throw ConfigError("latent dims must be >= 1");
  EncoderStack st;
  st.state_dim = state_dim;
  st.action_dim = action_dim;
  st.latent_state_dim = cfg.latent_state_dim;
  st.latent_action_dim = cfg.latent_action_dim;
  st.phi = make_module({state_dim, cfg.state_encoder_hidden, cfg.latent_state_dim,
                        cfg.activation},
                       cfg.learning_rate, rng, false);
  st.psi = make_module({state_dim + action_dim, cfg.state_action_encoder_hidden,
                        cfg.latent_action_dim, cfg.activation},
                       cfg.learning_rate, rng, false);
  st.f_ref = make_module({cfg.latent_state_dim + cfg.latent_action_dim, cfg.f_ref_hidden,
                          1 + cfg.latent_state_dim, cfg.activation},
                         cfg.learning_rate, rng, false);
  return st;
}

inline void freeze_encoders(EncoderStack& st) {
  st.phi.frozen = true;
  st.psi.frozen = true;
}

inline bool encoders_frozen(const EncoderStack& st) { return st.phi.frozen && st.psi.frozen; }

struct LatentTriple {
  std::vector<double> z_s;
  std::vector<double> z_sa;
  std::vector<double> z_s_next;
};

inline std::vector<double> encode_state(const EncoderStack& st, std::span<const double> s) {
  return mlp_apply(st.phi.spec, st.phi.params, s);
}

inline std::vector<double> encode_state_action(const EncoderStack& st, std::span<const double> s,
                                               std::span<const double> a) {
  std::vector<double> in;
  in.reserve(s.size() + a.size());
  in.insert(in.end(), s.begin(), s.end());
  in.insert(in.end(), a.begin(), a.end());
  return mlp_apply(st.psi.spec, st.psi.params, in);
}

inline LatentTriple encode(const EncoderStack& st, std::span<const double> s,
                           std::span<const double> a, std::span<const double> s_next) {
  LatentTriple t;
  t.z_s = encode_state(st, s);
  t.z_sa = encode_state_action(st, s, a);
  t.z_s_next = encode_state(st, s_next);
  return t;
}

struct TargetPrediction {
  double r_hat = 0.0;
  std::vector<double> z_next_hat;
};

inline TargetPrediction predict_target(const EncoderStack& st, std::span<const double> z_s,
                                       std::span<const double> z_sa) {
  if (static_cast<int>(z_s.size()) != st.latent_state_dim ||
      static_cast<int>(z_sa.size()) != st.latent_action_dim)
    throw std::invalid_argument("latent dims do not match the stack");
  std::vector<double> in;
  in.reserve(z_s.size() + z_sa.size());
  in.insert(in.end(), z_s.begin(), z_s.end());
  in.insert(in.end(), z_sa.begin(), z_sa.end());
  std::vector<double> out = mlp_apply(st.f_ref.spec, st.f_ref.params, in);
  TargetPrediction p;
  p.r_hat = out[0];
  p.z_next_hat.assign(out.begin() + 1, out.end());
  return p;
}

struct VarianceWeights {
  std::vector<double> diagonal;
  int samples = 0;
  double clamp_lo = 0.1;
  double clamp_hi = 10.0;
};

// Per-dimension weights from the variance of the target latents z_s; by
// default normalized to mean 1 across dimensions, always clamped.
inline VarianceWeights compute_wtar(const EncoderStack& st, const OfflineDataset& target,
                                    const RepConfig& cfg) {
  if (!target.from_target)
    throw std::invalid_argument("wtar is computed from target-domain data only");
  if (target.count < 2)
    throw std::invalid_argument("wtar needs at least 2 target samples; variance is undefined");
  const int d = st.latent_state_dim;
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  std::vector<double> m2(static_cast<size_t>(d), 0.0);
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < target.count; ++i) {
    std::vector<double> z = encode_state(st, target.state(i));
    ++n;
    for (int k = 0; k < d; ++k) {
      double delta = z[static_cast<size_t>(k)] - mean[static_cast<size_t>(k)];
      mean[static_cast<size_t>(k)] += delta / static_cast<double>(n);
      m2[static_cast<size_t>(k)] += delta * (z[static_cast<size_t>(k)] - mean[static_cast<size_t>(k)]);
    }
  }
  std::vector<double> var(static_cast<size_t>(d), 0.0);
  for (int k = 0; k < d; ++k)
    var[static_cast<size_t>(k)] = m2[static_cast<size_t>(k)] / static_cast<double>(n - 1);
  if (cfg.wtar_mode == WtarMode::inverse_variance)
    for (double& v : var) v = 1.0 / std::max(v, 1e-12);
  if (cfg.wtar_normalize) {
    double total = 0.0;
    for (double v : var) total += v;
    double avg = total / static_cast<double>(d);
    if (avg > 0.0)
      for (double& v : var) v /= avg;
    else
      for (double& v : var) v = 1.0;  // all-constant latents: symmetric limit
  }
  VarianceWeights w;
  w.clamp_lo = cfg.wtar_clamp_lo;
  w.clamp_hi = cfg.wtar_clamp_hi;
  w.samples = static_cast<int>(target.count);
  w.diagonal.resize(static_cast<size_t>(d));
  for (int k = 0; k < d; ++k)
    w.diagonal[static_cast<size_t>(k)] =
        std::clamp(var[static_cast<size_t>(k)], cfg.wtar_clamp_lo, cfg.wtar_clamp_hi);
  return w;
}

// Eq-style prediction loss for one transition: squared reward error plus the
// W-weighted squared latent next-state error. The next-state encoding is
// treated as a fixed regression target (no gradient through phi(s')).
inline double rep_sample_loss(const EncoderStack& st, std::span<const double> s,
                              std::span<const double> a, double r, std::span<const double> s_next,
                              const VarianceWeights& w) {
  LatentTriple t = encode(st, s, a, s_next);
  TargetPrediction p = predict_target(st, t.z_s, t.z_sa);
  double er = p.r_hat - r;
  double loss = er * er;
  for (int k = 0; k < st.latent_state_dim; ++k) {
    double ez = p.z_next_hat[static_cast<size_t>(k)] - t.z_s_next[static_cast<size_t>(k)];
    loss += w.diagonal[static_cast<size_t>(k)] * ez * ez;
  }
  return loss;
}

namespace detail {

struct RepWork {
  MlpWorkspace phi_ws, psi_ws, f_ws;
  ParamVector phi_grad, psi_grad, f_grad;
  std::vector<double> in_sa, in_z, dout, din;
};

// Forward + backward for one transition; accumulates scaled gradients and
// returns the sample loss. `scale` multiplies the loss gradient (1/batch).
inline double rep_backprop(EncoderStack& st, std::span<const double> s, std::span<const double> a,
                           double r, std::span<const double> s_next, const VarianceWeights& w,
                           double scale, bool update_encoders, RepWork& wk) {
  const int dz = st.latent_state_dim;
  const int dza = st.latent_action_dim;
  mlp_forward(st.phi.spec, st.phi.params, s, wk.phi_ws);
  const std::vector<double>& z_s = wk.phi_ws.act.back();
  wk.in_sa.assign(s.begin(), s.end());
  wk.in_sa.insert(wk.in_sa.end(), a.begin(), a.end());
  mlp_forward(st.psi.spec, st.psi.params, wk.in_sa, wk.psi_ws);
  const std::vector<double>& z_sa = wk.psi_ws.act.back();
  std::vector<double> z_next = mlp_apply(st.phi.spec, st.phi.params, s_next);
  wk.in_z.assign(z_s.begin(), z_s.end());
  wk.in_z.insert(wk.in_z.end(), z_sa.begin(), z_sa.end());
  mlp_forward(st.f_ref.spec, st.f_ref.params, wk.in_z, wk.f_ws);
  const std::vector<double>& out = wk.f_ws.act.back();
  double er = out[0] - r;
  double loss = er * er;
  wk.dout.assign(out.size(), 0.0);
  wk.dout[0] = 2.0 * er * scale;
  for (int k = 0; k < dz; ++k) {
    double ez = out[static_cast<size_t>(1 + k)] - z_next[static_cast<size_t>(k)];
    loss += w.diagonal[static_cast<size_t>(k)] * ez * ez;
    wk.dout[static_cast<size_t>(1 + k)] = 2.0 * w.diagonal[static_cast<size_t>(k)] * ez * scale;
  }
  wk.din.assign(static_cast<size_t>(dz + dza), 0.0);
  mlp_backward(st.f_ref.spec, st.f_ref.params, wk.f_ws, wk.dout, wk.f_grad,
               update_encoders ? &wk.din : nullptr);
  if (update_encoders) {
    std::span<const double> dz_s(wk.din.data(), static_cast<size_t>(dz));
    std::span<const double> dz_sa(wk.din.data() + dz, static_cast<size_t>(dza));
    mlp_backward(st.phi.spec, st.phi.params, wk.phi_ws, dz_s, wk.phi_grad, nullptr);
    mlp_backward(st.psi.spec, st.psi.params, wk.psi_ws, dz_sa, wk.psi_grad, nullptr);
  }
  return loss;
}

}  // namespace detail

// Stage 1 of the pretraining schedule: encoders and predictor are trained
// jointly on batches sampled uniformly from the union of both datasets, with
// the variance weights refreshed periodically from the target data.
inline std::vector<double> train_stage1(EncoderStack& st, const OfflineDataset& source,
                                        const OfflineDataset& target, int steps,
                                        const RepConfig& cfg, Rng& rng) {
  if (source.count < 1 || target.count < 1)
    throw std::invalid_argument("stage 1 needs non-empty source and target datasets");
  if (st.phi.frozen || st.psi.frozen || st.f_ref.frozen)
    throw std::invalid_argument("stage 1 requires an unfrozen stack");
  if (source.state_dim != target.state_dim || source.action_dim != target.action_dim)
    throw std::invalid_argument("source and target datasets disagree on dimensions");
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(std::max(steps, 0)));
  const std::int64_t total = source.count + target.count;
  const int batch = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, total));
  detail::RepWork wk;
  wk.phi_grad = zero_params(st.phi.spec);
  wk.psi_grad = zero_params(st.psi.spec);
  wk.f_grad = zero_params(st.f_ref.spec);
  VarianceWeights w;
  for (int step = 0; step < steps; ++step) {
    if (cfg.wtar_refresh > 0 ? step % cfg.wtar_refresh == 0 : step == 0)
      w = compute_wtar(st, target, cfg);
    std::fill(wk.phi_grad.values.begin(), wk.phi_grad.values.end(), 0.0);
    std::fill(wk.psi_grad.values.begin(), wk.psi_grad.values.end(), 0.0);
    std::fill(wk.f_grad.values.begin(), wk.f_grad.values.end(), 0.0);
    std::vector<int> idx = sample_indices(total, batch, rng);
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch);
    for (int i : idx) {
      const OfflineDataset& ds = i < source.count ? source : target;
      std::int64_t k = i < source.count ? i : i - source.count;
      loss += detail::rep_backprop(st, ds.state(k), ds.action(k), ds.rewards[static_cast<size_t>(k)],
                                   ds.next_state(k), w, scale, true, wk);
    }
    loss /= static_cast<double>(batch);
    if (!std::isfinite(loss))
      throw std::runtime_error("representation loss became non-finite at stage-1 step " +
                               std::to_string(step));
    st.f_ref.apply_grad(wk.f_grad);
    st.phi.apply_grad(wk.phi_grad);
    st.psi.apply_grad(wk.psi_grad);
    trace.push_back(loss);
  }
  return trace;
}

// Stage 2: encoders frozen, predictor refined on target-only batches.
inline std::vector<double> train_stage2(EncoderStack& st, const OfflineDataset& target, int steps,
                                        const RepConfig& cfg, Rng& rng) {
  if (target.count < 1) throw std::invalid_argument("stage 2 needs a non-empty target dataset");
  if (!encoders_frozen(st))
    throw std::invalid_argument("stage 2 requires frozen encoders (call freeze_encoders first)");
  if (st.f_ref.frozen) throw std::invalid_argument("stage 2 requires an unfrozen predictor");
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(std::max(steps, 0)));
  const int batch = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, target.count));
  detail::RepWork wk;
  wk.f_grad = zero_params(st.f_ref.spec);
  VarianceWeights w = compute_wtar(st, target, cfg);  // phi frozen: constant across steps
  for (int step = 0; step < steps; ++step) {
    std::fill(wk.f_grad.values.begin(), wk.f_grad.values.end(), 0.0);
    std::vector<int> idx = sample_indices(target.count, batch, rng);
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch);
    for (int i : idx)
      loss += detail::rep_backprop(st, target.state(i), target.action(i),
                                   target.rewards[static_cast<size_t>(i)], target.next_state(i), w,
                                   scale, false, wk);
    loss /= static_cast<double>(batch);
    if (!std::isfinite(loss))
      throw std::runtime_error("representation loss became non-finite at stage-2 step " +
                               std::to_string(step));
    st.f_ref.apply_grad(wk.f_grad);
    trace.push_back(loss);
  }
  return trace;
}

// Mean prediction loss over an entire dataset under fixed weights.
inline double rep_dataset_loss(const EncoderStack& st, const OfflineDataset& ds,
                               const VarianceWeights& w) {
  if (ds.count < 1) throw std::invalid_argument("empty dataset");
  double total = 0.0;
  for (std::int64_t i = 0; i < ds.count; ++i)
    total += rep_sample_loss(st, ds.state(i), ds.action(i), ds.rewards[static_cast<size_t>(i)],
                             ds.next_state(i), w);
  return total / static_cast<double>(ds.count);
}

}  // namespace tabb
