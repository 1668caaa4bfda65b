#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabb/common.hpp"
#include "tabb/datasets.hpp"
#include "tabb/envs.hpp"
#include "tabb/numerics.hpp"
#include "tabb/representation.hpp"
#include "tabb/tbm.hpp"

namespace tabb {

enum class Variant { tabb, no_tbm, src_actor };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::tabb: return "tabb";
    case Variant::no_tbm: return "no_tbm";
    case Variant::src_actor: return "src_actor";
  }
  return "tabb";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "tabb") return Variant::tabb;
  if (s == "no_tbm") return Variant::no_tbm;
  if (s == "src_actor") return Variant::src_actor;
  throw ConfigError("unknown variant '" + s + "' (expected tabb, no_tbm, or src_actor)");
}

struct AgentConfig {
  std::vector<int> actor_hidden{256, 256};
  std::vector<int> critic_hidden{256, 256};
  std::vector<int> value_hidden{256, 256};
  Activation activation = Activation::relu;
  double learning_rate = 3e-4;
  double gamma = 0.99;
  double target_update_rate = 5e-3;
  int batch_size = 256;
  double expectile = 0.7;
  double beta = 3.0;
  double exp_adv_max = 100.0;
  double temperature = 0.3;
  bool y_tar_anchor = false;        // use the anchor V instead of V_eta in Bellman targets
  bool src_weight_rescale = false;  // multiply source weights by batch size
};

// Critic over (z_s || z_sa) with a soft-updated target copy, value over z_s,
// and a deterministic policy over the raw state.
struct AgentBundle {
  MlpModule critic;
  ParamVector critic_target;
  MlpModule value;
  MlpModule policy;
  AgentConfig cfg;
  int state_dim = 0;
  int action_dim = 0;
};

inline AgentBundle make_agent(const EncoderStack& st, const AgentConfig& cfg, Rng& rng) {
  AgentBundle b;
  b.cfg = cfg;
  b.state_dim = st.state_dim;
  b.action_dim = st.action_dim;
  b.critic = make_module({st.latent_state_dim + st.latent_action_dim, cfg.critic_hidden, 1,
                          cfg.activation},
                         cfg.learning_rate, rng, false);
  b.critic_target = b.critic.params;
  b.value = make_module({st.latent_state_dim, cfg.value_hidden, 1, cfg.activation},
                        cfg.learning_rate, rng, false);
  b.policy = make_module({st.state_dim, cfg.actor_hidden, st.action_dim, cfg.activation},
                         cfg.learning_rate, rng, false);
  return b;
}

inline double value_of(const AgentBundle& b, std::span<const double> z_s) {
  return mlp_apply(b.value.spec, b.value.params, z_s)[0];
}

inline std::vector<double> critic_input(const LatentTriple& t) {
  std::vector<double> in;
  in.reserve(t.z_s.size() + t.z_sa.size());
  in.insert(in.end(), t.z_s.begin(), t.z_s.end());
  in.insert(in.end(), t.z_sa.begin(), t.z_sa.end());
  return in;
}

struct CriticResult {
  double l_q_tar = 0.0;
  double l_q_src = 0.0;
  std::vector<double> weights;  // source-batch weights actually applied
};

// One critic step on a target batch plus a weighted source batch: Huber TD
// toward r + gamma*(1-terminal)*V(phi(s')), target part averaged, source part
// a weighted sum under the variant's transferability weights, followed by a
// soft update of the critic's target copy.
inline CriticResult critic_update(AgentBundle& b, const EncoderStack& st,
                                  const AnchorValue* anchor, Variant variant,
                                  const Batch& tar_batch, const Batch& src_batch) {
  if (!tar_batch.from_target || tar_batch.size() < 1)
    throw std::invalid_argument("critic_update needs a non-empty target-domain batch");
  if (src_batch.size() > 0 && src_batch.from_target)
    throw std::invalid_argument("critic_update: source batch is target-tagged");
  CriticResult res;
  if (src_batch.size() > 0) {
    if (variant == Variant::no_tbm) {
      res.weights.assign(static_cast<size_t>(src_batch.size()),
                         1.0 / static_cast<double>(src_batch.size()));
    } else {
      if (anchor == nullptr)
        throw std::invalid_argument("variant " + to_string(variant) +
                                    " requires a trained anchor for TBM weights");
      std::vector<TbmScore> scores = tbm_score_batch(st, *anchor, src_batch);
      res.weights = weights(scores, b.cfg.temperature).w;
    }
    if (b.cfg.src_weight_rescale)
      for (double& w : res.weights) w *= static_cast<double>(src_batch.size());
  }
  ParamVector grad = zero_params(b.critic.spec);
  MlpWorkspace ws;
  double dout[1];
  auto td = [&](const Batch& batch, int i, double scale, double& loss_acc) {
    LatentTriple t = encode(st, batch.state(i), batch.action(i), batch.next_state(i));
    std::vector<double> in = critic_input(t);
    mlp_forward(b.critic.spec, b.critic.params, in, ws);
    double q = ws.act.back()[0];
    double mask = batch.terminals[static_cast<size_t>(i)] ? 0.0 : 1.0;
    double vnext = b.cfg.y_tar_anchor ? anchor_value(*anchor, t.z_s_next)
                                      : value_of(b, t.z_s_next);
    double y = batch.rewards[static_cast<size_t>(i)] + b.cfg.gamma * mask * vnext;
    double u = q - y;
    loss_acc += scale * huber(u, 1.0);
    dout[0] = scale * huber_grad(u, 1.0);
    mlp_backward(b.critic.spec, b.critic.params, ws, std::span<const double>(dout, 1), grad,
                 nullptr);
  };
  if (b.cfg.y_tar_anchor && anchor == nullptr)
    throw std::invalid_argument("y_tar_anchor requires an anchor");
  const double tar_scale = 1.0 / static_cast<double>(tar_batch.size());
  for (int i = 0; i < tar_batch.size(); ++i) td(tar_batch, i, tar_scale, res.l_q_tar);
  for (int i = 0; i < src_batch.size(); ++i)
    td(src_batch, i, res.weights[static_cast<size_t>(i)], res.l_q_src);
  if (!std::isfinite(res.l_q_tar) || !std::isfinite(res.l_q_src))
    throw std::runtime_error("critic loss became non-finite");
  b.critic.apply_grad(grad);
  soft_update(b.critic_target, b.critic.params, b.cfg.target_update_rate);
  return res;
}

// Expectile regression of V_eta toward the critic's target copy.
inline double value_update(AgentBundle& b, const EncoderStack& st, const Batch& tar_batch) {
  if (!tar_batch.from_target || tar_batch.size() < 1)
    throw std::invalid_argument("value_update consumes target-domain batches only");
  ParamVector grad = zero_params(b.value.spec);
  MlpWorkspace ws;
  double dout[1];
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(tar_batch.size());
  for (int i = 0; i < tar_batch.size(); ++i) {
    LatentTriple t = encode(st, tar_batch.state(i), tar_batch.action(i), tar_batch.next_state(i));
    double qt = mlp_apply(b.critic.spec, b.critic_target, critic_input(t))[0];
    mlp_forward(b.value.spec, b.value.params, t.z_s, ws);
    double v = ws.act.back()[0];
    double u = qt - v;
    loss += expectile_loss(u, b.cfg.expectile);
    dout[0] = -expectile_grad(u, b.cfg.expectile) * scale;
    mlp_backward(b.value.spec, b.value.params, ws, std::span<const double>(dout, 1), grad,
                 nullptr);
  }
  loss *= scale;
  if (!std::isfinite(loss)) throw std::runtime_error("value loss became non-finite");
  b.value.apply_grad(grad);
  return loss;
}

namespace detail {

// Advantage-weighted regression step shared by the target-policy update and
// the src_actor variant's weighted source update. `sample_weights` empty
// means uniform mean weighting.
inline double awr_step(AgentBundle& b, const EncoderStack& st, const Batch& batch,
                       std::span<const double> sample_weights) {
  ParamVector grad = zero_params(b.policy.spec);
  MlpWorkspace ws;
  double loss = 0.0;
  std::vector<double> dout(static_cast<size_t>(b.action_dim));
  const double uniform = 1.0 / static_cast<double>(batch.size());
  for (int i = 0; i < batch.size(); ++i) {
    LatentTriple t = encode(st, batch.state(i), batch.action(i), batch.next_state(i));
    double q = mlp_apply(b.critic.spec, b.critic.params, critic_input(t))[0];
    double adv = q - value_of(b, t.z_s);
    double w = std::min(std::exp(b.cfg.beta * adv), b.cfg.exp_adv_max);
    if (!std::isfinite(w))
      throw std::runtime_error("advantage weight became non-finite in policy update");
    double scale = sample_weights.empty() ? uniform : sample_weights[static_cast<size_t>(i)];
    mlp_forward(b.policy.spec, b.policy.params, batch.state(i), ws);
    const std::vector<double>& pi = ws.act.back();
    auto a = batch.action(i);
    double err2 = 0.0;
    for (int k = 0; k < b.action_dim; ++k) {
      double e = pi[static_cast<size_t>(k)] - a[static_cast<size_t>(k)];
      err2 += e * e;
      dout[static_cast<size_t>(k)] = scale * w * 2.0 * e;
    }
    loss += scale * w * err2;
    mlp_backward(b.policy.spec, b.policy.params, ws, dout, grad, nullptr);
  }
  if (!std::isfinite(loss)) throw std::runtime_error("policy loss became non-finite");
  b.policy.apply_grad(grad);
  return loss;
}

}  // namespace detail

inline double policy_update(AgentBundle& b, const EncoderStack& st, const Batch& tar_batch) {
  if (!tar_batch.from_target || tar_batch.size() < 1)
    throw std::invalid_argument("policy_update consumes target-domain batches only");
  return detail::awr_step(b, st, tar_batch, {});
}

// src_actor variant: AWR on a source batch, each sample scaled by its
// transferability weight.
inline double policy_update_weighted(AgentBundle& b, const EncoderStack& st, const Batch& batch,
                                     std::span<const double> sample_weights) {
  if (batch.size() < 1 || static_cast<int>(sample_weights.size()) != batch.size())
    throw std::invalid_argument("policy_update_weighted: weight/batch size mismatch");
  return detail::awr_step(b, st, batch, sample_weights);
}

inline std::vector<double> policy_action(const AgentBundle& b, std::span<const double> obs) {
  std::vector<double> a = mlp_apply(b.policy.spec, b.policy.params, obs);
  for (double& x : a) x = std::clamp(x, -1.0, 1.0);
  return a;
}

struct EvalResult {
  double mean_return = 0.0;
  double normalized = 0.0;
};

// Deterministic-policy rollouts in the given env; read-only on the bundle.
inline EvalResult evaluate(const AgentBundle& b, const Env& env, const ScoreRefs& refs,
                           int episodes, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate needs at least one episode");
  Rng rng(Rng::stream_seed(seed, "eval"));
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    EnvState s = initial_state(env, rng);
    for (int t = 0; t < env.horizon(); ++t) {
      std::vector<double> obs = observe(env, s);
      StepResult r = step(env, s, policy_action(b, obs), rng);
      total += r.reward;
      if (r.terminal) break;
      s = r.next;
    }
  }
  EvalResult res;
  res.mean_return = total / static_cast<double>(episodes);
  res.normalized = normalized_score(res.mean_return, refs);
  return res;
}

struct MetricsRecord {
  std::int64_t step = 0;
  double l_q_tar = 0.0;
  double l_q_src = 0.0;
  double l_v = 0.0;
  double l_pi = 0.0;
  double weight_entropy = 0.0;
  double eval_return = 0.0;
  double normalized_score = 0.0;
  std::uint64_t seed = 0;
  std::string variant;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainLoopConfig {
  int steps = 0;
  Variant variant = Variant::tabb;
  std::uint64_t seed = 0;
  int eval_every = 1000;
  int eval_episodes = 20;
  Env target_env;
  ScoreRefs refs;
  std::uint64_t eval_seed_root = 0;
};

// Full agent training loop: per step one critic update on (target batch,
// weighted source batch), then target-only value and policy updates; the
// src_actor variant adds a weighted source policy update. Logged metrics are
// window means since the previous eval point.
inline std::vector<MetricsRecord> train_agent(AgentBundle& b, const EncoderStack& st,
                                              const AnchorValue* anchor,
                                              const OfflineDataset& source,
                                              const OfflineDataset& target,
                                              const TrainLoopConfig& cfg, Rng& rng,
                                              const MetricsSink& sink = {}) {
  if (source.from_target) throw std::invalid_argument("source dataset is target-tagged");
  if (!target.from_target) throw std::invalid_argument("target dataset is source-tagged");
  if (source.state_dim != target.state_dim || source.action_dim != target.action_dim)
    throw std::invalid_argument("source and target datasets disagree on dimensions");
  std::vector<MetricsRecord> trace;
  if (cfg.steps <= 0) return trace;
  const int tar_bs = static_cast<int>(std::min<std::int64_t>(b.cfg.batch_size, target.count));
  const int src_bs = static_cast<int>(std::min<std::int64_t>(b.cfg.batch_size, source.count));
  double wl_q_tar = 0.0, wl_q_src = 0.0, wl_v = 0.0, wl_pi = 0.0, went = 0.0;
  int window = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    Batch tar_b = sample_batch(target, tar_bs, rng);
    Batch src_b = sample_batch(source, src_bs, rng);
    CriticResult cres = critic_update(b, st, anchor, cfg.variant, tar_b, src_b);
    double lv = value_update(b, st, tar_b);
    double lpi = policy_update(b, st, tar_b);
    if (cfg.variant == Variant::src_actor)
      lpi += policy_update_weighted(b, st, src_b, cres.weights);
    wl_q_tar += cres.l_q_tar;
    wl_q_src += cres.l_q_src;
    wl_v += lv;
    wl_pi += lpi;
    went += weight_entropy(cres.weights);
    ++window;
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      EvalResult er = evaluate(b, cfg.target_env, cfg.refs, cfg.eval_episodes,
                               splitmix64(cfg.eval_seed_root ^ static_cast<std::uint64_t>(step)));
      MetricsRecord rec;
      rec.step = step;
      rec.l_q_tar = wl_q_tar / window;
      rec.l_q_src = wl_q_src / window;
      rec.l_v = wl_v / window;
      rec.l_pi = wl_pi / window;
      rec.weight_entropy = went / window;
      rec.eval_return = er.mean_return;
      rec.normalized_score = er.normalized;
      rec.seed = cfg.seed;
      rec.variant = to_string(cfg.variant);
      trace.push_back(rec);
      if (sink) sink(rec);
      wl_q_tar = wl_q_src = wl_v = wl_pi = went = 0.0;
      window = 0;
    }
  }
  return trace;
}

}  // namespace tabb
