#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "tabb/common.hpp"
#include "tabb/envs.hpp"

namespace tabb {

enum class Tier { random, medium, medium_replay, medium_expert, expert };

inline std::string to_string(Tier t) {
  switch (t) {
    case Tier::random: return "random";
    case Tier::medium: return "medium";
    case Tier::medium_replay: return "medium-replay";
    case Tier::medium_expert: return "medium-expert";
    case Tier::expert: return "expert";
  }
  return "random";
}

inline Tier tier_from_string(const std::string& s) {
  if (s == "random") return Tier::random;
  if (s == "medium") return Tier::medium;
  if (s == "medium-replay" || s == "medium_replay" || s == "medium-replay-analog")
    return Tier::medium_replay;
  if (s == "medium-expert" || s == "medium_expert") return Tier::medium_expert;
  if (s == "expert") return Tier::expert;
  throw ConfigError("unknown tier '" + s +
                    "' (expected random, medium, medium-replay, medium-expert, or expert)");
}

struct ScoreRefs {
  double j_random = 0.0;
  double j_expert = 0.0;
};

// Linear map sending J_random to 0 and J_expert to 100; deliberately unclipped.
inline double normalized_score(double j_pi, const ScoreRefs& refs) {
  if (!std::isfinite(refs.j_random) || !std::isfinite(refs.j_expert))
    throw std::invalid_argument("score references must be finite");
  if (refs.j_expert <= refs.j_random)
    throw std::invalid_argument("degenerate score references: expert return must exceed random");
  return (j_pi - refs.j_random) / (refs.j_expert - refs.j_random) * 100.0;
}

struct OfflineDataset {
  EnvSpec env_spec;
  bool from_target = false;
  Tier tier = Tier::random;
  std::uint64_t seed = 0;
  double gamma = 0.99;  // discount used by the tier's expert policy
  ScoreRefs refs;
  int state_dim = 0;
  int action_dim = 0;
  std::int64_t count = 0;
  std::vector<double> states;       // count x state_dim, row-major
  std::vector<double> actions;      // count x action_dim
  std::vector<double> rewards;      // count
  std::vector<double> next_states;  // count x state_dim
  std::vector<std::uint8_t> terminals;

  std::span<const double> state(std::int64_t i) const {
    return {states.data() + i * state_dim, static_cast<size_t>(state_dim)};
  }
  std::span<const double> action(std::int64_t i) const {
    return {actions.data() + i * action_dim, static_cast<size_t>(action_dim)};
  }
  std::span<const double> next_state(std::int64_t i) const {
    return {next_states.data() + i * state_dim, static_cast<size_t>(state_dim)};
  }
};

struct Batch {
  std::vector<int> indices;
  bool from_target = false;
  int state_dim = 0;
  int action_dim = 0;
  std::vector<double> states;
  std::vector<double> actions;
  std::vector<double> rewards;
  std::vector<double> next_states;
  std::vector<std::uint8_t> terminals;

  int size() const { return static_cast<int>(indices.size()); }
  std::span<const double> state(int i) const {
    return {states.data() + static_cast<size_t>(i) * state_dim, static_cast<size_t>(state_dim)};
  }
  std::span<const double> action(int i) const {
    return {actions.data() + static_cast<size_t>(i) * action_dim, static_cast<size_t>(action_dim)};
  }
  std::span<const double> next_state(int i) const {
    return {next_states.data() + static_cast<size_t>(i) * state_dim,
            static_cast<size_t>(state_dim)};
  }
};

// A behavior policy maps (current state, rng) to an action vector.
using BehaviorPolicy = std::function<std::vector<double>(const EnvState&, Rng&)>;

inline std::vector<double> grid_one_hot_action(int dir) {
  std::vector<double> a(4, 0.0);
  a[static_cast<size_t>(dir)] = 1.0;
  return a;
}

inline BehaviorPolicy grid_eps_greedy(const std::vector<int>& greedy, double eps) {
  return [greedy, eps](const EnvState& s, Rng& rng) {
    int dir;
    if (eps > 0.0 && rng.uniform() < eps)
      dir = static_cast<int>(rng.uniform_int(4));
    else
      dir = greedy[static_cast<size_t>(s.cell)];
    return grid_one_hot_action(dir);
  };
}

inline constexpr double kPdKp = 2.0;
inline constexpr double kPdKd = 1.0;

// Proportional-derivative controller toward the goal with Gaussian
// exploration noise; sigma < 0 selects uniform random actions.
inline BehaviorPolicy pm_pd_policy(double sigma) {
  return [sigma](const EnvState& s, Rng& rng) {
    std::vector<double> a(2, 0.0);
    if (sigma < 0.0) {
      a[0] = rng.uniform(-1.0, 1.0);
      a[1] = rng.uniform(-1.0, 1.0);
      return a;
    }
    a[0] = kPdKp * (kPmGoalX - s.vec[0]) - kPdKd * s.vec[2];
    a[1] = kPdKp * (kPmGoalY - s.vec[1]) - kPdKd * s.vec[3];
    if (sigma > 0.0) {
      a[0] += sigma * rng.normal();
      a[1] += sigma * rng.normal();
    }
    a[0] = std::clamp(a[0], -1.0, 1.0);
    a[1] = std::clamp(a[1], -1.0, 1.0);
    return a;
  };
}

// One full episode; returns the undiscounted return.
inline double rollout_return(const Env& env, const BehaviorPolicy& policy, Rng& rng) {
  EnvState s = initial_state(env, rng);
  double total = 0.0;
  for (int t = 0; t < env.horizon(); ++t) {
    auto a = policy(s, rng);
    StepResult r = step(env, s, a, rng);
    total += r.reward;
    if (r.terminal) break;
    s = r.next;
  }
  return total;
}

// Monte Carlo score references for this environment: 200 episodes each of a
// uniform-random policy and the env's exact/near-optimal policy, seeded from
// the env description alone so refs are stable across datasets.
inline ScoreRefs score_refs_for(const Env& env, double gamma = 0.99, int episodes = 200) {
  std::string canon = to_string(env.spec.family) + "|" + to_string(env.spec.shift_kind) + "|" +
                      std::to_string(env.spec.shift_level) + "|" +
                      std::to_string(env.spec.horizon) + "|" +
                      std::to_string(env.spec.reward_scale) + "|" +
                      std::to_string(env.spec.grid_rows) + "x" +
                      std::to_string(env.spec.grid_cols) + "|" +
                      (env.is_target ? "target" : "source");
  Rng rng(Rng::stream_seed(fnv1a64(canon), "score-refs"));
  BehaviorPolicy random_pi, expert_pi;
  if (env.spec.family == EnvFamily::grid_slip) {
    DpResult dp = exact_dp(env, gamma);
    random_pi = grid_eps_greedy(dp.greedy, 1.0);
    expert_pi = grid_eps_greedy(dp.greedy, 0.0);
  } else {
    random_pi = pm_pd_policy(-1.0);
    expert_pi = pm_pd_policy(0.0);
  }
  ScoreRefs refs;
  for (int e = 0; e < episodes; ++e) refs.j_random += rollout_return(env, random_pi, rng);
  for (int e = 0; e < episodes; ++e) refs.j_expert += rollout_return(env, expert_pi, rng);
  refs.j_random /= episodes;
  refs.j_expert /= episodes;
  return refs;
}

inline double grid_eps_for(Tier tier, std::int64_t t, std::int64_t n, Rng& episode_rng,
                           bool episode_start, double& episode_eps) {
  switch (tier) {
    case Tier::random: return 1.0;
    case Tier::medium: return 0.4;
    case Tier::expert: return 0.1;
    case Tier::medium_expert:
      if (episode_start) episode_eps = episode_rng.uniform() < 0.5 ? 0.4 : 0.1;
      return episode_eps;
    case Tier::medium_replay: {
      double frac = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 1.0;
      return 1.0 + (0.4 - 1.0) * std::min(1.0, frac);
    }
  }
  return 1.0;
}

inline double pm_sigma_for(Tier tier, std::int64_t t, std::int64_t n, Rng& episode_rng,
                           bool episode_start, double& episode_sigma) {
  switch (tier) {
    case Tier::random: return -1.0;  // uniform random actions
    case Tier::medium: return 0.5;
    case Tier::expert: return 0.05;
    case Tier::medium_expert:
      if (episode_start) episode_sigma = episode_rng.uniform() < 0.5 ? 0.5 : 0.05;
      return episode_sigma;
    case Tier::medium_replay: {
      double frac = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 1.0;
      return 2.0 + (0.5 - 2.0) * std::min(1.0, frac);
    }
  }
  return 0.5;
}

// Rolls a tier-specific behavior policy in `env` for exactly n transitions
// (episodes reset at terminal or horizon) and freezes score references into
// the result.
inline OfflineDataset generate(const Env& env, Tier tier, std::int64_t n, std::uint64_t seed,
                               double gamma = 0.99) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  OfflineDataset ds;
  ds.env_spec = env.spec;
  ds.from_target = env.is_target;
  ds.tier = tier;
  ds.seed = seed;
  ds.gamma = gamma;
  ds.state_dim = env.state_dim();
  ds.action_dim = env.action_dim();
  ds.count = n;
  ds.refs = score_refs_for(env, gamma);
  ds.states.reserve(static_cast<size_t>(n) * ds.state_dim);
  ds.actions.reserve(static_cast<size_t>(n) * ds.action_dim);
  ds.rewards.reserve(static_cast<size_t>(n));
  ds.next_states.reserve(static_cast<size_t>(n) * ds.state_dim);
  ds.terminals.reserve(static_cast<size_t>(n));

  std::vector<int> greedy;
  if (env.spec.family == EnvFamily::grid_slip) greedy = exact_dp(env, gamma).greedy;

  Rng rng(Rng::stream_seed(seed, "data"));
  EnvState s{};
  bool need_reset = true;
  int steps_in_episode = 0;
  double episode_eps = 0.0, episode_sigma = 0.0;
  for (std::int64_t t = 0; t < n; ++t) {
    bool episode_start = need_reset;
    if (need_reset) {
      s = initial_state(env, rng);
      steps_in_episode = 0;
      need_reset = false;
    }
    std::vector<double> a;
    if (env.spec.family == EnvFamily::grid_slip) {
      double eps = grid_eps_for(tier, t, n, rng, episode_start, episode_eps);
      a = grid_eps_greedy(greedy, eps)(s, rng);
    } else {
      double sigma = pm_sigma_for(tier, t, n, rng, episode_start, episode_sigma);
      a = pm_pd_policy(sigma)(s, rng);
    }
    StepResult r = step(env, s, a, rng);
    auto obs = observe(env, s);
    auto next_obs = observe(env, r.next);
    ds.states.insert(ds.states.end(), obs.begin(), obs.end());
    ds.actions.insert(ds.actions.end(), a.begin(), a.end());
    ds.rewards.push_back(r.reward);
    ds.next_states.insert(ds.next_states.end(), next_obs.begin(), next_obs.end());
    ds.terminals.push_back(r.terminal ? 1 : 0);
    ++steps_in_episode;
    if (r.terminal || steps_in_episode >= env.horizon())
      need_reset = true;
    else
      s = r.next;
  }
  return ds;
}

// Uniform sample without replacement (Floyd's algorithm), then shuffled so
// every batch position is exchangeable. batch == count yields a permutation.
inline std::vector<int> sample_indices(std::int64_t count, int batch, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  if (batch > count)
    throw std::invalid_argument("batch size " + std::to_string(batch) + " exceeds dataset size " +
                                std::to_string(count));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(batch));
  std::unordered_set<int> seen;
  seen.reserve(static_cast<size_t>(batch) * 2);
  for (std::int64_t j = count - batch; j < count; ++j) {
    int t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(j) + 1));
    if (seen.count(t)) {
      out.push_back(static_cast<int>(j));
      seen.insert(static_cast<int>(j));
    } else {
      out.push_back(t);
      seen.insert(t);
    }
  }
  for (int i = batch - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(out[static_cast<size_t>(i)], out[static_cast<size_t>(j)]);
  }
  return out;
}

inline Batch sample_batch(const OfflineDataset& ds, int batch, Rng& rng) {
  Batch b;
  b.indices = sample_indices(ds.count, batch, rng);
  b.from_target = ds.from_target;
  b.state_dim = ds.state_dim;
  b.action_dim = ds.action_dim;
  b.states.reserve(static_cast<size_t>(batch) * ds.state_dim);
  b.actions.reserve(static_cast<size_t>(batch) * ds.action_dim);
  b.rewards.reserve(static_cast<size_t>(batch));
  b.next_states.reserve(static_cast<size_t>(batch) * ds.state_dim);
  b.terminals.reserve(static_cast<size_t>(batch));
  for (int idx : b.indices) {
    auto s = ds.state(idx);
    auto a = ds.action(idx);
    auto sn = ds.next_state(idx);
    b.states.insert(b.states.end(), s.begin(), s.end());
    b.actions.insert(b.actions.end(), a.begin(), a.end());
    b.rewards.push_back(ds.rewards[static_cast<size_t>(idx)]);
    b.next_states.insert(b.next_states.end(), sn.begin(), sn.end());
    b.terminals.push_back(ds.terminals[static_cast<size_t>(idx)]);
  }
  return b;
}

inline nlohmann::json env_spec_to_json(const EnvSpec& spec) {
  return nlohmann::json{{"family", to_string(spec.family)},
                        {"shift_kind", to_string(spec.shift_kind)},
                        {"shift_level", spec.shift_level},
                        {"horizon", spec.horizon},
                        {"reward_scale", spec.reward_scale},
                        {"grid_rows", spec.grid_rows},
                        {"grid_cols", spec.grid_cols}};
}

inline EnvSpec env_spec_from_json(const nlohmann::json& j) {
  EnvSpec spec;
  spec.family = env_family_from_string(j.at("family").get<std::string>());
  spec.shift_kind = shift_kind_from_string(j.at("shift_kind").get<std::string>());
  spec.shift_level = j.at("shift_level").get<double>();
  spec.horizon = j.at("horizon").get<int>();
  spec.reward_scale = j.at("reward_scale").get<double>();
  spec.grid_rows = j.at("grid_rows").get<int>();
  spec.grid_cols = j.at("grid_cols").get<int>();
  return spec;
}

inline constexpr char kDatasetMagic[8] = {'T', 'A', 'B', 'B', 'D', 'S', '1', '\0'};
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline nlohmann::json dataset_header(const OfflineDataset& ds) {
  return nlohmann::json{{"format_version", kDatasetFormatVersion},
                        {"kind", "dataset"},
                        {"env", env_spec_to_json(ds.env_spec)},
                        {"domain", ds.from_target ? "target" : "source"},
                        {"tier", to_string(ds.tier)},
                        {"seed", ds.seed},
                        {"gamma", ds.gamma},
                        {"count", ds.count},
                        {"state_dim", ds.state_dim},
                        {"action_dim", ds.action_dim},
                        {"score_refs",
                         {{"j_random", ds.refs.j_random}, {"j_expert", ds.refs.j_expert}}}};
}

inline void save_dataset(const OfflineDataset& ds, const std::string& path) {
  if (static_cast<std::int64_t>(ds.terminals.size()) != ds.count ||
      static_cast<std::int64_t>(ds.rewards.size()) != ds.count ||
      ds.states.size() != static_cast<size_t>(ds.count) * ds.state_dim ||
      ds.actions.size() != static_cast<size_t>(ds.count) * ds.action_dim ||
      ds.next_states.size() != static_cast<size_t>(ds.count) * ds.state_dim)
    throw std::invalid_argument("dataset arrays inconsistent with count");
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kDatasetMagic, kDatasetMagic + 8);
  std::string header = dataset_header(ds).dump();
  put_u32_le(buf, static_cast<std::uint32_t>(header.size()));
  buf.insert(buf.end(), header.begin(), header.end());
  for (std::int64_t i = 0; i < ds.count; ++i) {
    for (double x : ds.state(i)) put_f64_le(buf, x);
    for (double x : ds.action(i)) put_f64_le(buf, x);
    put_f64_le(buf, ds.rewards[static_cast<size_t>(i)]);
    for (double x : ds.next_state(i)) put_f64_le(buf, x);
    buf.push_back(ds.terminals[static_cast<size_t>(i)]);
  }
  put_u32_le(buf, crc32(buf.data(), buf.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> buf(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
  if (!in) throw std::runtime_error("read failed for '" + path + "'");
  return buf;
}

inline nlohmann::json parse_dataset_header(const std::vector<std::uint8_t>& buf,
                                           const std::string& path, size_t* payload_at) {
  if (buf.size() < 12)
    throw std::runtime_error("dataset '" + path + "' truncated: expected at least 12 bytes, got " +
                             std::to_string(buf.size()));
  if (!std::equal(kDatasetMagic, kDatasetMagic + 8, buf.begin()))
    throw std::runtime_error("dataset '" + path + "' has a bad magic header");
  std::uint32_t hlen = get_u32_le(buf.data() + 8);
  if (buf.size() < 12 + static_cast<size_t>(hlen))
    throw std::runtime_error("dataset '" + path + "' truncated: expected at least " +
                             std::to_string(12 + static_cast<size_t>(hlen)) + " bytes, got " +
                             std::to_string(buf.size()));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 12, buf.begin() + 12 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset '" + path + "' header is not valid JSON: " + e.what());
  }
  if (header.value("format_version", 0u) != kDatasetFormatVersion)
    throw std::runtime_error("dataset '" + path + "' has unsupported format version " +
                             header.value("format_version", nlohmann::json()).dump());
  if (payload_at) *payload_at = 12 + static_cast<size_t>(hlen);
  return header;
}

// Reads only magic + header; never touches the payload.
inline nlohmann::json inspect_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> head(12);
  in.read(reinterpret_cast<char*>(head.data()), 12);
  if (!in)
    throw std::runtime_error("dataset '" + path + "' truncated: expected at least 12 bytes");
  std::uint32_t hlen = get_u32_le(head.data() + 8);
  head.resize(12 + hlen);
  in.read(reinterpret_cast<char*>(head.data() + 12), hlen);
  if (!in)
    throw std::runtime_error("dataset '" + path + "' truncated: expected at least " +
                             std::to_string(12 + static_cast<size_t>(hlen)) + " bytes");
  return parse_dataset_header(head, path, nullptr);
}

inline OfflineDataset load_dataset(const std::string& path) {
  std::vector<std::uint8_t> buf = read_file_bytes(path);
  size_t at = 0;
  nlohmann::json header = parse_dataset_header(buf, path, &at);
  OfflineDataset ds;
  try {
    ds.env_spec = env_spec_from_json(header.at("env"));
    ds.from_target = header.at("domain").get<std::string>() == "target";
    ds.tier = tier_from_string(header.at("tier").get<std::string>());
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.gamma = header.at("gamma").get<double>();
    ds.count = header.at("count").get<std::int64_t>();
    ds.state_dim = header.at("state_dim").get<int>();
    ds.action_dim = header.at("action_dim").get<int>();
    ds.refs.j_random = header.at("score_refs").at("j_random").get<double>();
    ds.refs.j_expert = header.at("score_refs").at("j_expert").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset '" + path + "' header is missing fields: " + e.what());
  }
  if (ds.count < 0 || ds.state_dim < 1 || ds.action_dim < 1)
    throw std::runtime_error("dataset '" + path + "' header has invalid dimensions");
  const size_t record = 8 * (2 * static_cast<size_t>(ds.state_dim) +
                             static_cast<size_t>(ds.action_dim) + 1) + 1;
  const size_t expected = at + record * static_cast<size_t>(ds.count) + 4;
  if (buf.size() != expected)
    throw std::runtime_error("dataset '" + path + "' truncated or padded: expected " +
                             std::to_string(expected) + " bytes, got " +
                             std::to_string(buf.size()));
  std::uint32_t stored = get_u32_le(buf.data() + buf.size() - 4);
  std::uint32_t computed = crc32(buf.data(), buf.size() - 4);
  if (stored != computed)
    throw std::runtime_error("dataset '" + path + "' checksum mismatch: stored " +
                             std::to_string(stored) + ", computed " + std::to_string(computed));
  ds.states.resize(static_cast<size_t>(ds.count) * ds.state_dim);
  ds.actions.resize(static_cast<size_t>(ds.count) * ds.action_dim);
  ds.rewards.resize(static_cast<size_t>(ds.count));
  ds.next_states.resize(static_cast<size_t>(ds.count) * ds.state_dim);
  ds.terminals.resize(static_cast<size_t>(ds.count));
  const std::uint8_t* p = buf.data() + at;
  for (std::int64_t i = 0; i < ds.count; ++i) {
    for (int d = 0; d < ds.state_dim; ++d, p += 8)
      ds.states[static_cast<size_t>(i) * ds.state_dim + d] = get_f64_le(p);
    for (int d = 0; d < ds.action_dim; ++d, p += 8)
      ds.actions[static_cast<size_t>(i) * ds.action_dim + d] = get_f64_le(p);
    ds.rewards[static_cast<size_t>(i)] = get_f64_le(p);
    p += 8;
    for (int d = 0; d < ds.state_dim; ++d, p += 8)
      ds.next_states[static_cast<size_t>(i) * ds.state_dim + d] = get_f64_le(p);
    ds.terminals[static_cast<size_t>(i)] = *p++;
  }
  return ds;
}

}  // namespace tabb
