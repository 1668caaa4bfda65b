#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabb/common.hpp"

namespace tabb {

enum class EnvFamily { grid_slip, point_mass };
enum class ShiftKind { none, friction, morphology, kinematic };

inline std::string to_string(EnvFamily f) {
  return f == EnvFamily::grid_slip ? "grid_slip" : "point_mass";
}

inline EnvFamily env_family_from_string(const std::string& s) {
  if (s == "grid_slip") return EnvFamily::grid_slip;
  if (s == "point_mass") return EnvFamily::point_mass;
  throw ConfigError("unknown env family '" + s + "' (expected grid_slip or point_mass)");
}

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::none: return "none";
    case ShiftKind::friction: return "friction";
    case ShiftKind::morphology: return "morphology";
    case ShiftKind::kinematic: return "kinematic";
  }
  return "none";
}

inline ShiftKind shift_kind_from_string(const std::string& s) {
  if (s == "none") return ShiftKind::none;
  if (s == "friction") return ShiftKind::friction;
  if (s == "morphology") return ShiftKind::morphology;
  if (s == "kinematic") return ShiftKind::kinematic;
  throw ConfigError("unknown shift kind '" + s +
                    "' (expected none, friction, morphology, or kinematic)");
}

struct EnvSpec {
  EnvFamily family = EnvFamily::grid_slip;
  ShiftKind shift_kind = ShiftKind::none;
  double shift_level = 0.0;
  int horizon = 0;  // 0 -> family default (grid 100, point mass 200)
  double reward_scale = 1.0;
  int grid_rows = 8;
  int grid_cols = 8;
};

// Grid constants.
inline constexpr double kGridStepReward = -0.01;
inline constexpr double kGridGoalReward = 1.0;

// Point-mass constants.
inline constexpr double kPmDt = 0.05;
inline constexpr double kPmBaseDrag = 0.1;
inline constexpr double kPmBaseMass = 1.0;
inline constexpr double kPmArena = 1.0;
inline constexpr double kPmGoalX = 0.8;
inline constexpr double kPmGoalY = 0.8;
inline constexpr double kPmStartX = -0.8;
inline constexpr double kPmStartY = -0.8;
inline constexpr double kPmStartJitter = 0.05;

// An environment with its dynamics parameters fully resolved. Stateless:
// callers hold the current EnvState and pass an Rng stream into step().
struct Env {
  EnvSpec spec;
  bool is_target = false;
  // grid_slip dynamics
  double slip_prob = 0.0;
  int broken_action = -1;  // -1: all actions work
  // point_mass dynamics
  double drag = kPmBaseDrag;
  double mass = kPmBaseMass;
  double action_clip = std::numeric_limits<double>::infinity();  // axis-1 cap

  int grid_cells() const { return spec.grid_rows * spec.grid_cols; }
  int goal_cell() const { return grid_cells() - 1; }
  int state_dim() const {
    return spec.family == EnvFamily::grid_slip ? grid_cells() : 4;
  }
  int action_dim() const { return spec.family == EnvFamily::grid_slip ? 4 : 2; }
  int horizon() const { return spec.horizon; }
};

struct EnvPair {
  Env source;
  Env target;
};

// Discrete state lives in `cell`; continuous state in `vec` (x, y, vx, vy).
struct EnvState {
  int cell = 0;
  std::array<double, 4> vec{0.0, 0.0, 0.0, 0.0};
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool terminal = false;
  bool action_clipped = false;
};

inline void validate_env_spec(const EnvSpec& spec) {
  if (spec.horizon < 0) throw ConfigError("env horizon must be >= 1 (or 0 for the family default)");
  if (!std::isfinite(spec.shift_level)) throw ConfigError("shift level must be finite");
  if (spec.reward_scale <= 0.0 || !std::isfinite(spec.reward_scale))
    throw ConfigError("reward scale must be positive and finite");
  if (spec.family == EnvFamily::grid_slip) {
    if (spec.grid_rows < 1 || spec.grid_cols < 1)
      throw ConfigError("grid dimensions must be >= 1");
    if (spec.grid_rows * spec.grid_cols < 2)
      throw ConfigError("grid must have at least 2 cells");
    switch (spec.shift_kind) {
      case ShiftKind::none:
        break;
      case ShiftKind::friction:
        if (spec.shift_level < 0.0 || spec.shift_level > 1.0)
          throw ConfigError("grid friction shift level is a slip probability; need 0 <= level <= 1");
        break;
      case ShiftKind::kinematic:
        break;  // disables action 0 in the target; level unused
      case ShiftKind::morphology:
        throw ConfigError("grid_slip does not support a morphology shift");
    }
  } else {
    switch (spec.shift_kind) {
      case ShiftKind::none:
        break;
      case ShiftKind::friction:
      case ShiftKind::morphology:
        if (spec.shift_level <= 0.0)
          throw ConfigError("point_mass " + to_string(spec.shift_kind) +
                            " shift level is a multiplier; need level > 0");
        break;
      case ShiftKind::kinematic:
        if (spec.shift_level < 1.0)
          throw ConfigError("point_mass kinematic shift level divides the action range; need level >= 1");
        break;
    }
  }
}

// Builds the source/target pair: the source uses base dynamics, the target
// applies the declared shift.
inline EnvPair make_pair(EnvSpec spec) {
  validate_env_spec(spec);
  if (spec.horizon == 0)
    spec.horizon = spec.family == EnvFamily::grid_slip ? 100 : 200;
  Env src;
  src.spec = spec;
  src.is_target = false;
  Env tar = src;
  tar.is_target = true;
  if (spec.family == EnvFamily::grid_slip) {
    if (spec.shift_kind == ShiftKind::friction) tar.slip_prob = spec.shift_level;
    if (spec.shift_kind == ShiftKind::kinematic) tar.broken_action = 0;
  } else {
    if (spec.shift_kind == ShiftKind::friction) tar.drag = kPmBaseDrag * spec.shift_level;
    if (spec.shift_kind == ShiftKind::morphology) tar.mass = kPmBaseMass * spec.shift_level;
    if (spec.shift_kind == ShiftKind::kinematic) tar.action_clip = 1.0 / spec.shift_level;
  }
  return {src, tar};
}

// Grid direction codes: 0 up (-row), 1 down (+row), 2 left (-col), 3 right (+col).
inline std::array<int, 2> grid_perpendicular(int dir) {
  return dir <= 1 ? std::array<int, 2>{2, 3} : std::array<int, 2>{0, 1};
}

inline int grid_move(const Env& env, int cell, int dir) {
  int r = cell / env.spec.grid_cols;
  int c = cell % env.spec.grid_cols;
  int nr = r, nc = c;
  switch (dir) {
    case 0: nr = r - 1; break;
    case 1: nr = r + 1; break;
    case 2: nc = c - 1; break;
    case 3: nc = c + 1; break;
    default: throw std::invalid_argument("grid direction must be in [0,4)");
  }
  if (nr < 0 || nr >= env.spec.grid_rows || nc < 0 || nc >= env.spec.grid_cols)
    return cell;  // walls: bumping stays in place
  return nr * env.spec.grid_cols + nc;
}

// Argmax over action logits, ties to the lowest index.
inline int grid_action_dir(std::span<const double> action) {
  if (action.size() != 4) throw std::invalid_argument("grid action must have 4 components");
  if (!all_finite(action)) throw std::invalid_argument("grid action must be finite");
  int best = 0;
  for (int i = 1; i < 4; ++i)
    if (action[i] > action[best]) best = i;
  return best;
}

struct GridOutcome {
  double prob = 0.0;
  int next_cell = 0;
  double reward = 0.0;
  bool terminal = false;
};

// Full outcome distribution for (cell, dir) under this env's dynamics.
// The goal cell pays out its bonus and terminates regardless of action;
// a broken action leaves the agent in place with the usual step reward.
inline std::vector<GridOutcome> grid_outcomes(const Env& env, int cell, int dir) {
  if (env.spec.family != EnvFamily::grid_slip)
    throw std::invalid_argument("grid_outcomes requires a grid_slip env");
  if (cell < 0 || cell >= env.grid_cells())
    throw std::invalid_argument("grid cell out of range");
  if (dir < 0 || dir >= 4) throw std::invalid_argument("grid direction must be in [0,4)");
  if (cell == env.goal_cell())
    return {{1.0, cell, kGridGoalReward * env.spec.reward_scale, true}};
  const double step_r = kGridStepReward * env.spec.reward_scale;
  if (dir == env.broken_action) return {{1.0, cell, step_r, false}};
  const double p = env.slip_prob;
  std::vector<GridOutcome> out;
  out.push_back({1.0 - p, grid_move(env, cell, dir), step_r, false});
  if (p > 0.0) {
    auto perp = grid_perpendicular(dir);
    out.push_back({p / 2.0, grid_move(env, cell, perp[0]), step_r, false});
    out.push_back({p / 2.0, grid_move(env, cell, perp[1]), step_r, false});
  }
  return out;
}

inline void validate_state(const Env& env, const EnvState& state) {
  if (env.spec.family == EnvFamily::grid_slip) {
    if (state.cell < 0 || state.cell >= env.grid_cells())
      throw std::invalid_argument("grid state cell " + std::to_string(state.cell) +
                                  " out of range [0," + std::to_string(env.grid_cells()) + ")");
  } else {
    for (double x : state.vec)
      if (!std::isfinite(x)) throw std::invalid_argument("point_mass state must be finite");
    if (std::abs(state.vec[0]) > kPmArena + 1e-12 || std::abs(state.vec[1]) > kPmArena + 1e-12)
      throw std::invalid_argument("point_mass position out of arena bounds");
  }
}

inline StepResult step(const Env& env, const EnvState& state, std::span<const double> action,
                       Rng& rng) {
  validate_state(env, state);
  StepResult res;
  if (env.spec.family == EnvFamily::grid_slip) {
    if (state.cell == env.goal_cell()) {
      res.next = state;
      res.reward = kGridGoalReward * env.spec.reward_scale;
      res.terminal = true;
      return res;
    }
    int dir = grid_action_dir(action);
    int resolved = dir;
    if (dir == env.broken_action) {
      res.next.cell = state.cell;
    } else {
      if (env.slip_prob > 0.0) {
        double u = rng.uniform();
        auto perp = grid_perpendicular(dir);
        if (u < env.slip_prob / 2.0)
          resolved = perp[0];
        else if (u < env.slip_prob)
          resolved = perp[1];
      }
      res.next.cell = grid_move(env, state.cell, resolved);
    }
    res.reward = kGridStepReward * env.spec.reward_scale;
    res.terminal = false;
    return res;
  }
  if (action.size() != 2) throw std::invalid_argument("point_mass action must have 2 components");
  if (!all_finite(action)) throw std::invalid_argument("point_mass action must be finite");
  std::array<double, 2> a{action[0], action[1]};
  for (int i = 0; i < 2; ++i) {
    double c = std::clamp(a[i], -1.0, 1.0);
    if (c != a[i]) res.action_clipped = true;
    a[i] = c;
  }
  a[1] = std::clamp(a[1], -env.action_clip, env.action_clip);
  const double x = state.vec[0], y = state.vec[1];
  const double vx = state.vec[2], vy = state.vec[3];
  double nx = x + kPmDt * vx;
  double ny = y + kPmDt * vy;
  const double nvx = vx + kPmDt * (a[0] - env.drag * vx) / env.mass;
  const double nvy = vy + kPmDt * (a[1] - env.drag * vy) / env.mass;
  nx = std::clamp(nx, -kPmArena, kPmArena);
  ny = std::clamp(ny, -kPmArena, kPmArena);
  res.next.vec = {nx, ny, nvx, nvy};
  const double dist = std::hypot(nx - kPmGoalX, ny - kPmGoalY);
  res.reward = -dist * env.spec.reward_scale;
  res.terminal = false;
  return res;
}

inline EnvState initial_state(const Env& env, Rng& rng) {
  EnvState s;
  if (env.spec.family == EnvFamily::grid_slip) {
    s.cell = 0;
    return s;
  }
  s.vec[0] = kPmStartX + rng.uniform(-kPmStartJitter, kPmStartJitter);
  s.vec[1] = kPmStartY + rng.uniform(-kPmStartJitter, kPmStartJitter);
  s.vec[2] = 0.0;
  s.vec[3] = 0.0;
  return s;
}

inline std::vector<double> observe(const Env& env, const EnvState& state) {
  validate_state(env, state);
  if (env.spec.family == EnvFamily::grid_slip) {
    std::vector<double> obs(env.grid_cells(), 0.0);
    obs[static_cast<size_t>(state.cell)] = 1.0;
    return obs;
  }
  return {state.vec[0], state.vec[1], state.vec[2], state.vec[3]};
}

inline EnvState state_from_obs(const Env& env, std::span<const double> obs) {
  EnvState s;
  if (env.spec.family == EnvFamily::grid_slip) {
    if (static_cast<int>(obs.size()) != env.grid_cells())
      throw std::invalid_argument("grid observation size mismatch");
    int best = 0;
    for (int i = 1; i < env.grid_cells(); ++i)
      if (obs[static_cast<size_t>(i)] > obs[static_cast<size_t>(best)]) best = i;
    s.cell = best;
    return s;
  }
  if (obs.size() != 4) throw std::invalid_argument("point_mass observation must have 4 components");
  std::copy(obs.begin(), obs.end(), s.vec.begin());
  return s;
}

inline std::vector<double> action_low(const Env& env) {
  return std::vector<double>(static_cast<size_t>(env.action_dim()), -1.0);
}

inline std::vector<double> action_high(const Env& env) {
  return std::vector<double>(static_cast<size_t>(env.action_dim()), 1.0);
}

// Replays a single seeded step from exactly (state, action) with no side
// effects; used to probe target dynamics on stored source transitions.
inline StepResult replay_once(const Env& env, const EnvState& state,
                              std::span<const double> action, Rng& rng) {
  return step(env, state, action, rng);
}

struct DpResult {
  std::vector<double> v;        // optimal state values
  std::vector<int> greedy;      // greedy direction per cell
  double residual = 0.0;        // final sup-norm Bellman residual
  int iterations = 0;
};

inline double grid_backup(const Env& env, std::span<const double> v, int cell, int dir,
                          double gamma) {
  double q = 0.0;
  for (const auto& o : grid_outcomes(env, cell, dir))
    q += o.prob * (o.reward + (o.terminal ? 0.0 : gamma * v[static_cast<size_t>(o.next_cell)]));
  return q;
}

inline double grid_bellman_residual(const Env& env, std::span<const double> v, double gamma) {
  double worst = 0.0;
  for (int s = 0; s < env.grid_cells(); ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (int dir = 0; dir < 4; ++dir) best = std::max(best, grid_backup(env, v, s, dir, gamma));
    worst = std::max(worst, std::abs(v[static_cast<size_t>(s)] - best));
  }
  return worst;
}

// Value iteration to a sup-norm tolerance; the returned residual is the
// exact Bellman residual of the final table.
inline DpResult exact_dp(const Env& env, double gamma, double tol = 1e-10,
                         int max_iter = 1000000) {
  if (env.spec.family != EnvFamily::grid_slip)
    throw std::invalid_argument("exact_dp requires a grid_slip env");
  if (gamma <= 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must be in (0,1)");
  const int n = env.grid_cells();
  DpResult res;
  res.v.assign(static_cast<size_t>(n), 0.0);
  std::vector<double> next(static_cast<size_t>(n), 0.0);
  for (int it = 0; it < max_iter; ++it) {
    double delta = 0.0;
    for (int s = 0; s < n; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (int dir = 0; dir < 4; ++dir)
        best = std::max(best, grid_backup(env, res.v, s, dir, gamma));
      delta = std::max(delta, std::abs(best - res.v[static_cast<size_t>(s)]));
      next[static_cast<size_t>(s)] = best;
    }
    res.v.swap(next);
    res.iterations = it + 1;
    if (delta <= tol) break;
  }
  res.greedy.assign(static_cast<size_t>(n), 0);
  for (int s = 0; s < n; ++s) {
    int arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (int dir = 0; dir < 4; ++dir) {
      double q = grid_backup(env, res.v, s, dir, gamma);
      if (q > best) {
        best = q;
        arg = dir;
      }
    }
    res.greedy[static_cast<size_t>(s)] = arg;
  }
  res.residual = grid_bellman_residual(env, res.v, gamma);
  return res;
}

// Iterative policy evaluation for a stochastic direction policy
// (probs[s][dir]); used as an exact reference for learned anchors.
inline std::vector<double> dp_policy_value(const Env& env, double gamma,
                                           const std::vector<std::array<double, 4>>& probs,
                                           double tol = 1e-12, int max_iter = 1000000) {
  if (env.spec.family != EnvFamily::grid_slip)
    throw std::invalid_argument("dp_policy_value requires a grid_slip env");
  const int n = env.grid_cells();
  if (static_cast<int>(probs.size()) != n)
    throw std::invalid_argument("policy table size mismatch");
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  std::vector<double> next(static_cast<size_t>(n), 0.0);
  for (int it = 0; it < max_iter; ++it) {
    double delta = 0.0;
    for (int s = 0; s < n; ++s) {
      double val = 0.0;
      for (int dir = 0; dir < 4; ++dir) {
        double p = probs[static_cast<size_t>(s)][static_cast<size_t>(dir)];
        if (p > 0.0) val += p * grid_backup(env, v, s, dir, gamma);
      }
      delta = std::max(delta, std::abs(val - v[static_cast<size_t>(s)]));
      next[static_cast<size_t>(s)] = val;
    }
    v.swap(next);
    if (delta <= tol) break;
  }
  return v;
}

}  // namespace tabb
