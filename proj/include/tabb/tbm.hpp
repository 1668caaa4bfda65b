#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabb/common.hpp"
#include "tabb/datasets.hpp"
#include "tabb/numerics.hpp"
#include "tabb/representation.hpp"

namespace tabb {

struct AnchorConfig {
  std::vector<int> value_hidden{256, 256};
  std::vector<int> critic_hidden{256, 256};  // throwaway helper critic
  Activation activation = Activation::relu;
  double learning_rate = 3e-4;
  double gamma = 0.99;
  double expectile = 0.7;
  int batch_size = 256;
  double target_update_rate = 5e-3;
};

// Latent-space value function trained exclusively on target-domain data.
struct AnchorValue {
  MlpModule net;  // z_s -> scalar
  double gamma = 0.99;
};

inline AnchorValue make_anchor(const EncoderStack& st, const AnchorConfig& cfg, Rng& rng) {
  AnchorValue a;
  a.gamma = cfg.gamma;
  a.net = make_module({st.latent_state_dim, cfg.value_hidden, 1, cfg.activation},
                      cfg.learning_rate, rng, false);
  return a;
}

inline double anchor_value(const AnchorValue& a, std::span<const double> z_s) {
  return mlp_apply(a.net.spec, a.net.params, z_s)[0];
}

inline void soft_update(ParamVector& target, const ParamVector& online, double rate) {
  if (target.values.size() != online.values.size())
    throw std::invalid_argument("soft_update: parameter size mismatch");
  for (size_t i = 0; i < target.values.size(); ++i)
    target.values[i] = (1.0 - rate) * target.values[i] + rate * online.values[i];
}

// Fits the anchor by expectile TD on target data: a helper critic over
// (z_s || z_sa) regresses to r + gamma*(1-terminal)*V(phi(s')) with a
// soft-updated target copy, and V is fit to that copy by the tau-expectile.
// Returns the per-step value-loss trace.
inline std::vector<double> train_anchor(AnchorValue& anchor, const EncoderStack& st,
                                        const OfflineDataset& target, int steps,
                                        const AnchorConfig& cfg, Rng& rng) {
  if (!target.from_target)
    throw std::invalid_argument("the anchor trains on target-domain data only");
  if (target.count < 1) throw std::invalid_argument("anchor training needs a non-empty dataset");
  if (!encoders_frozen(st))
    throw std::invalid_argument("anchor training requires frozen encoders");
  if (anchor.net.frozen) throw std::invalid_argument("anchor net is frozen");
  MlpModule critic = make_module({st.latent_state_dim + st.latent_action_dim, cfg.critic_hidden,
                                  1, cfg.activation},
                                 cfg.learning_rate, rng, false);
  ParamVector critic_target = critic.params;
  const int batch = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, target.count));
  MlpWorkspace cws, vws;
  ParamVector cgrad = zero_params(critic.spec);
  ParamVector vgrad = zero_params(anchor.net.spec);
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(std::max(steps, 0)));
  std::vector<double> in;
  double dout[1];
  for (int step = 0; step < steps; ++step) {
    std::vector<int> idx = sample_indices(target.count, batch, rng);
    std::fill(cgrad.values.begin(), cgrad.values.end(), 0.0);
    std::fill(vgrad.values.begin(), vgrad.values.end(), 0.0);
    double closs = 0.0, vloss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch);
    for (int i : idx) {
      LatentTriple t = encode(st, target.state(i), target.action(i), target.next_state(i));
      in.assign(t.z_s.begin(), t.z_s.end());
      in.insert(in.end(), t.z_sa.begin(), t.z_sa.end());
      mlp_forward(critic.spec, critic.params, in, cws);
      double q = cws.act.back()[0];
      double mask = target.terminals[static_cast<size_t>(i)] ? 0.0 : 1.0;
      double y = target.rewards[static_cast<size_t>(i)] +
                 cfg.gamma * mask * anchor_value(anchor, t.z_s_next);
      double u = q - y;
      closs += huber(u, 1.0);
      dout[0] = huber_grad(u, 1.0) * scale;
      mlp_backward(critic.spec, critic.params, cws, std::span<const double>(dout, 1), cgrad,
                   nullptr);
      double qt = mlp_apply(critic.spec, critic_target, in)[0];
      mlp_forward(anchor.net.spec, anchor.net.params, t.z_s, vws);
      double v = vws.act.back()[0];
      double uv = qt - v;
      vloss += expectile_loss(uv, cfg.expectile);
      dout[0] = -expectile_grad(uv, cfg.expectile) * scale;
      mlp_backward(anchor.net.spec, anchor.net.params, vws, std::span<const double>(dout, 1),
                   vgrad, nullptr);
    }
    closs *= scale;
    vloss *= scale;
    if (!std::isfinite(closs) || !std::isfinite(vloss))
      throw std::runtime_error("anchor loss became non-finite at step " + std::to_string(step));
    critic.apply_grad(cgrad);
    anchor.net.apply_grad(vgrad);
    soft_update(critic_target, critic.params, cfg.target_update_rate);
    trace.push_back(vloss);
  }
  return trace;
}

struct TbmScore {
  double value = 0.0;   // |y_real - y_tar|
  double y_real = 0.0;  // r + gamma*(1-terminal)*V(phi(s'))
  double y_tar = 0.0;   // r_hat + gamma*V(z_next_hat)
};

// The mismatch between the realized Bellman target of a source transition
// and the one implied by the target-domain predictor, both evaluated under
// the same anchor value.
inline TbmScore tbm_score(const EncoderStack& st, const AnchorValue& anchor,
                          std::span<const double> s, std::span<const double> a, double r,
                          std::span<const double> s_next, bool terminal) {
  LatentTriple t = encode(st, s, a, s_next);
  TargetPrediction p = predict_target(st, t.z_s, t.z_sa);
  TbmScore out;
  double mask = terminal ? 0.0 : 1.0;
  out.y_real = r + anchor.gamma * mask * anchor_value(anchor, t.z_s_next);
  out.y_tar = p.r_hat + anchor.gamma * anchor_value(anchor, p.z_next_hat);
  out.value = std::abs(out.y_real - out.y_tar);
  return out;
}

inline std::vector<TbmScore> tbm_score_batch(const EncoderStack& st, const AnchorValue& anchor,
                                             const Batch& b) {
  std::vector<TbmScore> out;
  out.reserve(static_cast<size_t>(b.size()));
  for (int i = 0; i < b.size(); ++i)
    out.push_back(tbm_score(st, anchor, b.state(i), b.action(i), b.rewards[static_cast<size_t>(i)],
                            b.next_state(i), b.terminals[static_cast<size_t>(i)] != 0));
  return out;
}

struct WeightVector {
  std::vector<double> w;
  double temperature = 0.3;
};

// Batch softmax over -score/temperature; temperature 1 is the plain
// exp(-score) normalization. Max-shifted so large scores cannot overflow.
inline WeightVector weights(std::span<const double> scores, double temperature) {
  if (scores.empty()) throw std::invalid_argument("weights: empty score batch");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("weights: temperature must be positive and finite");
  if (!all_finite(scores)) throw std::invalid_argument("weights: scores must be finite");
  WeightVector out;
  out.temperature = temperature;
  out.w.resize(scores.size());
  double best = -scores[0];
  for (double s : scores) best = std::max(best, -s);
  double total = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    out.w[i] = std::exp((-scores[i] - best) / temperature);
    total += out.w[i];
  }
  for (double& v : out.w) v /= total;
  return out;
}

inline WeightVector weights(const std::vector<TbmScore>& scores, double temperature) {
  std::vector<double> vals;
  vals.reserve(scores.size());
  for (const auto& s : scores) vals.push_back(s.value);
  return weights(vals, temperature);
}

inline double weight_entropy(std::span<const double> w) {
  double h = 0.0;
  for (double x : w)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

inline std::string format_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// CSV export of per-transition scores: index, tbm, y_real, y_tar, weight.
inline void write_tbm_csv(const std::string& path, const std::vector<TbmScore>& scores,
                          std::span<const double> w) {
  if (scores.size() != w.size())
    throw std::invalid_argument("write_tbm_csv: score/weight length mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "index,tbm,y_real,y_tar,weight\n";
  for (size_t i = 0; i < scores.size(); ++i)
    out << i << ',' << format_g17(scores[i].value) << ',' << format_g17(scores[i].y_real) << ','
        << format_g17(scores[i].y_tar) << ',' << format_g17(w[i]) << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace tabb
