#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tabb/common.hpp"
#include "tabb/datasets.hpp"
#include "tabb/envs.hpp"
#include "tabb/representation.hpp"
#include "tabb/tbm.hpp"

namespace tabb {

enum class ReplayMode { expected, sample };

inline std::string to_string(ReplayMode m) {
  return m == ReplayMode::expected ? "expected" : "sample";
}

inline ReplayMode replay_mode_from_string(const std::string& s) {
  if (s == "expected") return ReplayMode::expected;
  if (s == "sample") return ReplayMode::sample;
  throw ConfigError("unknown replay mode '" + s + "' (expected expected or sample)");
}

// One probed target successor: its probability, the latent distance from the
// predictor's z_next_hat, and the anchor value at the successor's latent.
struct SuccessorProbe {
  double prob = 0.0;
  double dist = 0.0;
  double v = 0.0;
};

struct OracleRecord {
  int index = 0;
  bool skipped = false;
  double tbm = 0.0;
  double delta = 0.0;   // oracle target Bellman error
  double y_real = 0.0;  // realized source-side Bellman target
  double y_rep = 0.0;   // replayed/expected target-side Bellman target
  double r = 0.0;
  double r_hat = 0.0;
  double r_tar = 0.0;  // replayed reward (expected mode: its expectation)
  double v_hat = 0.0;  // anchor value at z_next_hat
  std::vector<double> replay_next;  // sample mode: replayed next observation
  std::vector<SuccessorProbe> succ;
};

// Replays each chosen source transition's (state, action) under the target
// dynamics and reports |y_real - y_target| against the anchor value. For
// grid_slip in expected mode the replay is the exact outcome distribution
// from the transition table; otherwise a single seeded replay (point_mass
// dynamics are deterministic, so the single sample is already exact).
inline std::vector<OracleRecord> oracle_bellman_error(const EncoderStack& st,
                                                      const AnchorValue& anchor,
                                                      const Env& target_env,
                                                      const OfflineDataset& source,
                                                      std::int64_t max_transitions,
                                                      ReplayMode mode, std::uint64_t seed) {
  if (source.count < 1) throw std::invalid_argument("no transitions to diagnose");
  if (source.state_dim != target_env.state_dim() ||
      source.action_dim != target_env.action_dim())
    throw std::invalid_argument("dataset dimensions do not match the target env");
  const double gamma = anchor.gamma;
  std::int64_t n = std::min<std::int64_t>(std::max<std::int64_t>(max_transitions, 1),
                                          source.count);
  Rng pick(Rng::stream_seed(seed, "diagnose"));
  std::vector<int> chosen = sample_indices(source.count, static_cast<int>(n), pick);
  std::sort(chosen.begin(), chosen.end());
  const std::uint64_t replay_root = Rng::stream_seed(seed, "diagnose-replay");

  const bool grid_expected =
      target_env.spec.family == EnvFamily::grid_slip && mode == ReplayMode::expected;
  std::vector<std::vector<double>> cell_latent;
  std::vector<double> cell_value;
  if (grid_expected) {
    cell_latent.resize(static_cast<size_t>(target_env.grid_cells()));
    cell_value.resize(static_cast<size_t>(target_env.grid_cells()));
    for (int c = 0; c < target_env.grid_cells(); ++c) {
      EnvState s;
      s.cell = c;
      cell_latent[static_cast<size_t>(c)] = encode_state(st, observe(target_env, s));
      cell_value[static_cast<size_t>(c)] =
          anchor_value(anchor, cell_latent[static_cast<size_t>(c)]);
    }
  }

  std::vector<OracleRecord> records;
  records.reserve(chosen.size());
  for (int idx : chosen) {
    OracleRecord rec;
    rec.index = idx;
    auto s_obs = source.state(idx);
    auto a = source.action(idx);
    rec.r = source.rewards[static_cast<size_t>(idx)];
    bool terminal = source.terminals[static_cast<size_t>(idx)] != 0;
    LatentTriple t = encode(st, s_obs, a, source.next_state(idx));
    TargetPrediction p = predict_target(st, t.z_s, t.z_sa);
    rec.r_hat = p.r_hat;
    rec.v_hat = anchor_value(anchor, p.z_next_hat);
    rec.y_real = rec.r + gamma * (terminal ? 0.0 : 1.0) * anchor_value(anchor, t.z_s_next);
    rec.tbm = std::abs(rec.y_real - (rec.r_hat + gamma * rec.v_hat));
    EnvState s_env;
    try {
      s_env = state_from_obs(target_env, s_obs);
      validate_state(target_env, s_env);
      if (grid_expected) {
        int dir = grid_action_dir(a);
        rec.y_rep = 0.0;
        rec.r_tar = 0.0;
        for (const GridOutcome& o : grid_outcomes(target_env, s_env.cell, dir)) {
          double v = cell_value[static_cast<size_t>(o.next_cell)];
          rec.y_rep += o.prob * (o.reward + gamma * (o.terminal ? 0.0 : 1.0) * v);
          rec.r_tar += o.prob * o.reward;
          SuccessorProbe sp;
          sp.prob = o.prob;
          sp.v = v;
          double d2 = 0.0;
          const auto& zl = cell_latent[static_cast<size_t>(o.next_cell)];
          for (size_t k = 0; k < zl.size(); ++k) {
            double e = p.z_next_hat[k] - zl[k];
            d2 += e * e;
          }
          sp.dist = std::sqrt(d2);
          rec.succ.push_back(sp);
        }
      } else {
        Rng replay_rng(splitmix64(replay_root ^ static_cast<std::uint64_t>(idx)));
        StepResult rep = replay_once(target_env, s_env, a, replay_rng);
        rec.replay_next = observe(target_env, rep.next);
        std::vector<double> z_tar = encode_state(st, rec.replay_next);
        double v = anchor_value(anchor, z_tar);
        rec.r_tar = rep.reward;
        rec.y_rep = rep.reward + gamma * (rep.terminal ? 0.0 : 1.0) * v;
        SuccessorProbe sp;
        sp.prob = 1.0;
        sp.v = v;
        double d2 = 0.0;
        for (size_t k = 0; k < z_tar.size(); ++k) {
          double e = p.z_next_hat[k] - z_tar[k];
          d2 += e * e;
        }
        sp.dist = std::sqrt(d2);
        rec.succ.push_back(sp);
      }
      rec.delta = std::abs(rec.y_real - rec.y_rep);
    } catch (const std::invalid_argument&) {
      rec.skipped = true;
    }
    records.push_back(rec);
  }
  return records;
}

struct BoundReport {
  double epsilon = 0.0;
  double lipschitz = 0.0;
  double gamma = 0.99;
  int violations = 0;
  int total = 0;
  int skipped = 0;
};

// Checks delta <= tbm + (1 + gamma*L)*epsilon per record, with epsilon the
// worst predictor error over the probe set (reward branch and every probed
// successor's latent distance) and L the worst anchor-value ratio over the
// same latent pairs. A small absolute slack absorbs float rounding.
inline BoundReport theorem1_check(const std::vector<OracleRecord>& records, double gamma,
                                  double slack = 1e-9) {
  BoundReport rep;
  rep.gamma = gamma;
  for (const auto& r : records) {
    if (r.skipped) {
      ++rep.skipped;
      continue;
    }
    rep.epsilon = std::max(rep.epsilon, std::abs(r.r_hat - r.r_tar));
    for (const auto& sp : r.succ) {
      rep.epsilon = std::max(rep.epsilon, sp.dist);
      if (sp.dist > 1e-12)
        rep.lipschitz = std::max(rep.lipschitz, std::abs(r.v_hat - sp.v) / sp.dist);
    }
  }
  for (const auto& r : records) {
    if (r.skipped) continue;
    ++rep.total;
    double bound = r.tbm + (1.0 + gamma * rep.lipschitz) * rep.epsilon;
    if (r.delta > bound + slack) ++rep.violations;
  }
  if (rep.total == 0) throw std::invalid_argument("theorem1_check: probe set is empty");
  return rep;
}

// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> average_ranks(std::span<const double> x) {
  const size_t n = x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman needs two equal-length series of size >= 2");
  std::vector<double> rx = average_ranks(x);
  std::vector<double> ry = average_ranks(y);
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= rx.size();
  my /= ry.size();
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    double dx = rx[i] - mx;
    double dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;  // a constant series carries no rank signal
  return sxy / std::sqrt(sxx * syy);
}

struct CurveResult {
  std::vector<double> group_means;
  std::vector<int> group_sizes;
  std::vector<int> group_of;  // group index per input pair
  double spearman_rho = 0.0;
};

// Sorts (criterion, delta) pairs by criterion, splits them into equal-sized
// groups (remainder to the last group), and reports per-group mean delta
// plus the Spearman rank correlation.
inline CurveResult percentile_curve(const std::vector<std::pair<double, double>>& pairs,
                                    int groups) {
  const int n = static_cast<int>(pairs.size());
  if (groups < 1) throw std::invalid_argument("percentile_curve needs groups >= 1");
  if (n < 2 * groups)
    throw std::invalid_argument("percentile_curve: " + std::to_string(n) +
                                " samples are too few for " + std::to_string(groups) + " groups");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pairs[static_cast<size_t>(a)].first < pairs[static_cast<size_t>(b)].first;
  });
  CurveResult res;
  res.group_means.assign(static_cast<size_t>(groups), 0.0);
  res.group_sizes.assign(static_cast<size_t>(groups), 0);
  res.group_of.assign(static_cast<size_t>(n), 0);
  const int base = n / groups;
  for (int g = 0; g < groups; ++g) {
    int lo = g * base;
    int hi = g == groups - 1 ? n : lo + base;
    for (int k = lo; k < hi; ++k) {
      int idx = order[static_cast<size_t>(k)];
      res.group_of[static_cast<size_t>(idx)] = g;
      res.group_means[static_cast<size_t>(g)] += pairs[static_cast<size_t>(idx)].second;
      ++res.group_sizes[static_cast<size_t>(g)];
    }
    res.group_means[static_cast<size_t>(g)] /= res.group_sizes[static_cast<size_t>(g)];
  }
  std::vector<double> xs(static_cast<size_t>(n)), ys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    xs[static_cast<size_t>(i)] = pairs[static_cast<size_t>(i)].first;
    ys[static_cast<size_t>(i)] = pairs[static_cast<size_t>(i)].second;
  }
  res.spearman_rho = spearman(xs, ys);
  return res;
}

// Comparison criterion for the curve analysis: distance from each source
// transition's encoded next state to its nearest encoded target-domain next
// state, over a seeded subsample of the target dataset.
inline std::vector<double> next_state_mismatch(const EncoderStack& st,
                                               const OfflineDataset& source,
                                               const std::vector<int>& indices,
                                               const OfflineDataset& target, int target_sample,
                                               std::uint64_t seed) {
  if (target.count < 1) throw std::invalid_argument("empty target dataset");
  Rng rng(Rng::stream_seed(seed, "diagnose-mismatch"));
  int m = static_cast<int>(std::min<std::int64_t>(std::max(target_sample, 1), target.count));
  std::vector<int> tidx = sample_indices(target.count, m, rng);
  std::vector<std::vector<double>> tz;
  tz.reserve(tidx.size());
  for (int i : tidx) tz.push_back(encode_state(st, target.next_state(i)));
  std::vector<double> out;
  out.reserve(indices.size());
  for (int i : indices) {
    std::vector<double> z = encode_state(st, source.next_state(i));
    double best = std::numeric_limits<double>::infinity();
    for (const auto& zt : tz) {
      double d2 = 0.0;
      for (size_t k = 0; k < z.size(); ++k) {
        double e = z[k] - zt[k];
        d2 += e * e;
      }
      best = std::min(best, d2);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

// CSV export: index, criterion, tbm, oracle_delta, group.
inline void write_curve_csv(const std::string& path, const std::vector<int>& indices,
                            std::span<const double> criterion, std::span<const double> tbm,
                            std::span<const double> delta, std::span<const int> group) {
  if (indices.size() != criterion.size() || indices.size() != tbm.size() ||
      indices.size() != delta.size() || indices.size() != group.size())
    throw std::invalid_argument("write_curve_csv: column length mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "index,criterion,tbm,oracle_delta,group\n";
  for (size_t i = 0; i < indices.size(); ++i)
    out << indices[i] << ',' << format_g17(criterion[i]) << ',' << format_g17(tbm[i]) << ','
        << format_g17(delta[i]) << ',' << group[i] << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace tabb
