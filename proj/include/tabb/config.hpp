#pragma once

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tabb/agents.hpp"
#include "tabb/common.hpp"
#include "tabb/datasets.hpp"
#include "tabb/diagnostics.hpp"
#include "tabb/envs.hpp"
#include "tabb/representation.hpp"
#include "tabb/tbm.hpp"

namespace tabb {

// The full run configuration in four blocks. Every hyperparameter has a
// config key; precedence is defaults < config file < environment < flags.
struct RunConfig {
  // [env]
  EnvSpec env;
  // [data]
  std::int64_t source_size = 50000;
  std::int64_t target_size = 5000;
  Tier source_tier = Tier::medium;
  Tier target_tier = Tier::medium;
  std::string data_dir = "data";
  std::string source_path;  // empty: <data_dir>/source.ds
  std::string target_path;  // empty: <data_dir>/target.ds
  // [model]
  std::vector<int> actor_hidden{256, 256};
  std::vector<int> critic_hidden{256, 256};
  std::vector<int> value_hidden{256, 256};
  std::vector<int> state_encoder_hidden{256, 256};
  std::vector<int> state_action_encoder_hidden{256, 256};
  std::vector<int> f_ref_hidden{256, 256};
  std::vector<int> anchor_hidden{256, 256};
  std::string optimizer = "adam";
  Activation activation = Activation::relu;
  double learning_rate = 3e-4;
  double gamma = 0.99;
  double target_update_rate = 5e-3;
  int batch_size = 256;
  double expectile = 0.7;
  double beta = 3.0;
  double exp_adv_max = 100.0;
  double temperature = 0.3;
  int latent_state_dim = 64;
  int latent_action_dim = 64;
  int pretrain_steps = 200000;
  int stage2_steps = 50000;
  int anchor_steps = 100000;
  WtarMode wtar_mode = WtarMode::variance;
  bool wtar_normalize = true;
  double wtar_clamp_lo = 0.1;
  double wtar_clamp_hi = 10.0;
  int wtar_refresh = 1000;
  std::string y_tar_value = "live";  // live | anchor
  bool src_weight_rescale = false;
  // [run]
  std::vector<std::uint64_t> seeds{0};
  Variant variant = Variant::tabb;
  int steps = 100000;
  int eval_every = 5000;
  int eval_episodes = 20;
  std::string out_dir = "runs/run";
  int workers = 1;
  int diag_transitions = 10000;
  int diag_groups = 10;
  ReplayMode diag_replay_mode = ReplayMode::expected;

  std::string resolved_source_path() const {
    return source_path.empty() ? data_dir + "/source.ds" : source_path;
  }
  std::string resolved_target_path() const {
    return target_path.empty() ? data_dir + "/target.ds" : target_path;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + ctx + ": '" + v + "' is not an integer");
  }
}

inline int parse_int(const std::string& v, const std::string& ctx) {
  long long x = parse_ll(v, ctx);
  if (x < -2147483648LL || x > 2147483647LL)
    throw ConfigError("config key " + ctx + ": value out of int range");
  return static_cast<int>(x);
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + ctx + ": '" + v + "' is not a non-negative integer");
  }
}

inline double parse_double(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key " + ctx + ": '" + v + "' is not a number");
  }
}

inline bool parse_bool(const std::string& v, const std::string& ctx) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + ctx + ": '" + v + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& ctx) {
  std::vector<int> out;
  for (const auto& tok : split_list(v)) out.push_back(parse_int(tok, ctx));
  return out;
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& v, const std::string& ctx) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_list(v)) out.push_back(parse_u64(tok, ctx));
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::string join_u64s(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

// Shortest exact decimal form (re-parses to the identical double).
inline std::string canon_double(double x) { return nlohmann::json(x).dump(); }

}  // namespace detail

// The frozen key schema: every configurable key, by section.
inline const std::vector<std::pair<std::string, std::string>>& known_config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"env", "family"},
      {"env", "shift_kind"},
      {"env", "shift_level"},
      {"env", "horizon"},
      {"env", "reward_scale"},
      {"env", "grid_rows"},
      {"env", "grid_cols"},
      {"data", "source_size"},
      {"data", "target_size"},
      {"data", "source_tier"},
      {"data", "target_tier"},
      {"data", "dir"},
      {"data", "source_path"},
      {"data", "target_path"},
      {"model", "actor_hidden"},
      {"model", "critic_hidden"},
      {"model", "value_hidden"},
      {"model", "state_encoder_hidden"},
      {"model", "state_action_encoder_hidden"},
      {"model", "f_ref_hidden"},
      {"model", "anchor_hidden"},
      {"model", "optimizer"},
      {"model", "activation"},
      {"model", "learning_rate"},
      {"model", "gamma"},
      {"model", "target_update_rate"},
      {"model", "batch_size"},
      {"model", "expectile"},
      {"model", "beta"},
      {"model", "exp_adv_max"},
      {"model", "temperature"},
      {"model", "latent_state_dim"},
      {"model", "latent_action_dim"},
      {"model", "pretrain_steps"},
      {"model", "stage2_steps"},
      {"model", "anchor_steps"},
      {"model", "wtar_mode"},
      {"model", "wtar_normalize"},
      {"model", "wtar_clamp_lo"},
      {"model", "wtar_clamp_hi"},
      {"model", "wtar_refresh"},
      {"model", "y_tar_value"},
      {"model", "src_weight_rescale"},
      {"run", "seeds"},
      {"run", "variant"},
      {"run", "steps"},
      {"run", "eval_every"},
      {"run", "eval_episodes"},
      {"run", "out_dir"},
      {"run", "workers"},
      {"run", "diag_transitions"},
      {"run", "diag_groups"},
      {"run", "diag_replay_mode"},
  };
  return keys;
}

inline void set_key(RunConfig& c, const std::string& section, const std::string& key,
                    const std::string& value) {
  using namespace detail;
  const std::string ctx = section + "." + key;
  if (section == "env") {
    if (key == "family") c.env.family = env_family_from_string(value);
    else if (key == "shift_kind") c.env.shift_kind = shift_kind_from_string(value);
    else if (key == "shift_level") c.env.shift_level = parse_double(value, ctx);
    else if (key == "horizon") c.env.horizon = parse_int(value, ctx);
    else if (key == "reward_scale") c.env.reward_scale = parse_double(value, ctx);
    else if (key == "grid_rows") c.env.grid_rows = parse_int(value, ctx);
    else if (key == "grid_cols") c.env.grid_cols = parse_int(value, ctx);
    else throw ConfigError("unknown config key '" + ctx + "'");
  } else if (section == "data") {
    if (key == "source_size") c.source_size = parse_ll(value, ctx);
    else if (key == "target_size") c.target_size = parse_ll(value, ctx);
    else if (key == "source_tier") c.source_tier = tier_from_string(value);
    else if (key == "target_tier") c.target_tier = tier_from_string(value);
    else if (key == "dir") c.data_dir = value;
    else if (key == "source_path") c.source_path = value;
    else if (key == "target_path") c.target_path = value;
    else throw ConfigError("unknown config key '" + ctx + "'");
  } else if (section == "model") {
    if (key == "actor_hidden") c.actor_hidden = parse_int_list(value, ctx);
    else if (key == "critic_hidden") c.critic_hidden = parse_int_list(value, ctx);
    else if (key == "value_hidden") c.value_hidden = parse_int_list(value, ctx);
    else if (key == "state_encoder_hidden") c.state_encoder_hidden = parse_int_list(value, ctx);
    else if (key == "state_action_encoder_hidden")
      c.state_action_encoder_hidden = parse_int_list(value, ctx);
    else if (key == "f_ref_hidden") c.f_ref_hidden = parse_int_list(value, ctx);
    else if (key == "anchor_hidden") c.anchor_hidden = parse_int_list(value, ctx);
    else if (key == "optimizer") c.optimizer = value;
    else if (key == "activation") c.activation = activation_from_string(value);
    else if (key == "learning_rate") c.learning_rate = parse_double(value, ctx);
    else if (key == "gamma") c.gamma = parse_double(value, ctx);
    else if (key == "target_update_rate") c.target_update_rate = parse_double(value, ctx);
    else if (key == "batch_size") c.batch_size = parse_int(value, ctx);
    else if (key == "expectile") c.expectile = parse_double(value, ctx);
    else if (key == "beta") c.beta = parse_double(value, ctx);
    else if (key == "exp_adv_max") c.exp_adv_max = parse_double(value, ctx);
    else if (key == "temperature") c.temperature = parse_double(value, ctx);
    else if (key == "latent_state_dim") c.latent_state_dim = parse_int(value, ctx);
    else if (key == "latent_action_dim") c.latent_action_dim = parse_int(value, ctx);
    else if (key == "pretrain_steps") c.pretrain_steps = parse_int(value, ctx);
    else if (key == "stage2_steps") c.stage2_steps = parse_int(value, ctx);
    else if (key == "anchor_steps") c.anchor_steps = parse_int(value, ctx);
    else if (key == "wtar_mode") c.wtar_mode = wtar_mode_from_string(value);
    else if (key == "wtar_normalize") c.wtar_normalize = parse_bool(value, ctx);
    else if (key == "wtar_clamp_lo") c.wtar_clamp_lo = parse_double(value, ctx);
    else if (key == "wtar_clamp_hi") c.wtar_clamp_hi = parse_double(value, ctx);
    else if (key == "wtar_refresh") c.wtar_refresh = parse_int(value, ctx);
    else if (key == "y_tar_value") c.y_tar_value = value;
    else if (key == "src_weight_rescale") c.src_weight_rescale = parse_bool(value, ctx);
    else throw ConfigError("unknown config key '" + ctx + "'");
  } else if (section == "run") {
    if (key == "seeds") c.seeds = parse_u64_list(value, ctx);
    else if (key == "variant") c.variant = variant_from_string(value);
    else if (key == "steps") c.steps = parse_int(value, ctx);
    else if (key == "eval_every") c.eval_every = parse_int(value, ctx);
    else if (key == "eval_episodes") c.eval_episodes = parse_int(value, ctx);
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "workers") c.workers = parse_int(value, ctx);
    else if (key == "diag_transitions") c.diag_transitions = parse_int(value, ctx);
    else if (key == "diag_groups") c.diag_groups = parse_int(value, ctx);
    else if (key == "diag_replay_mode") c.diag_replay_mode = replay_mode_from_string(value);
    else throw ConfigError("unknown config key '" + ctx + "'");
  } else {
    throw ConfigError("unknown config section '" + section + "'");
  }
}

inline std::string get_key(const RunConfig& c, const std::string& section,
                           const std::string& key) {
  using namespace detail;
  if (section == "env") {
    if (key == "family") return to_string(c.env.family);
    if (key == "shift_kind") return to_string(c.env.shift_kind);
    if (key == "shift_level") return canon_double(c.env.shift_level);
    if (key == "horizon") return std::to_string(c.env.horizon);
    if (key == "reward_scale") return canon_double(c.env.reward_scale);
    if (key == "grid_rows") return std::to_string(c.env.grid_rows);
    if (key == "grid_cols") return std::to_string(c.env.grid_cols);
  } else if (section == "data") {
    if (key == "source_size") return std::to_string(c.source_size);
    if (key == "target_size") return std::to_string(c.target_size);
    if (key == "source_tier") return to_string(c.source_tier);
    if (key == "target_tier") return to_string(c.target_tier);
    if (key == "dir") return c.data_dir;
    if (key == "source_path") return c.source_path;
    if (key == "target_path") return c.target_path;
  } else if (section == "model") {
    if (key == "actor_hidden") return join_ints(c.actor_hidden);
    if (key == "critic_hidden") return join_ints(c.critic_hidden);
    if (key == "value_hidden") return join_ints(c.value_hidden);
    if (key == "state_encoder_hidden") return join_ints(c.state_encoder_hidden);
    if (key == "state_action_encoder_hidden") return join_ints(c.state_action_encoder_hidden);
    if (key == "f_ref_hidden") return join_ints(c.f_ref_hidden);
    if (key == "anchor_hidden") return join_ints(c.anchor_hidden);
    if (key == "optimizer") return c.optimizer;
    if (key == "activation") return to_string(c.activation);
    if (key == "learning_rate") return canon_double(c.learning_rate);
    if (key == "gamma") return canon_double(c.gamma);
    if (key == "target_update_rate") return canon_double(c.target_update_rate);
    if (key == "batch_size") return std::to_string(c.batch_size);
    if (key == "expectile") return canon_double(c.expectile);
    if (key == "beta") return canon_double(c.beta);
    if (key == "exp_adv_max") return canon_double(c.exp_adv_max);
    if (key == "temperature") return canon_double(c.temperature);
    if (key == "latent_state_dim") return std::to_string(c.latent_state_dim);
    if (key == "latent_action_dim") return std::to_string(c.latent_action_dim);
    if (key == "pretrain_steps") return std::to_string(c.pretrain_steps);
    if (key == "stage2_steps") return std::to_string(c.stage2_steps);
    if (key == "anchor_steps") return std::to_string(c.anchor_steps);
    if (key == "wtar_mode") return to_string(c.wtar_mode);
    if (key == "wtar_normalize") return c.wtar_normalize ? "true" : "false";
    if (key == "wtar_clamp_lo") return canon_double(c.wtar_clamp_lo);
    if (key == "wtar_clamp_hi") return canon_double(c.wtar_clamp_hi);
    if (key == "wtar_refresh") return std::to_string(c.wtar_refresh);
    if (key == "y_tar_value") return c.y_tar_value;
    if (key == "src_weight_rescale") return c.src_weight_rescale ? "true" : "false";
  } else if (section == "run") {
    if (key == "seeds") return join_u64s(c.seeds);
    if (key == "variant") return to_string(c.variant);
    if (key == "steps") return std::to_string(c.steps);
    if (key == "eval_every") return std::to_string(c.eval_every);
    if (key == "eval_episodes") return std::to_string(c.eval_episodes);
    if (key == "out_dir") return c.out_dir;
    if (key == "workers") return std::to_string(c.workers);
    if (key == "diag_transitions") return std::to_string(c.diag_transitions);
    if (key == "diag_groups") return std::to_string(c.diag_groups);
    if (key == "diag_replay_mode") return to_string(c.diag_replay_mode);
  }
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

// INI-style file: [section] headers, key = value lines, # or ; comments.
inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": key outside any [section]");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    try {
      set_key(c, section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

// Environment overrides: TABB_<SECTION>_<KEY>, e.g. TABB_MODEL_BATCH_SIZE.
inline void apply_env_overrides(RunConfig& c,
                                const std::function<const char*(const char*)>& getenv_fn = {}) {
  auto get = getenv_fn ? getenv_fn : [](const char* n) { return std::getenv(n); };
  for (const auto& [section, key] : known_config_keys()) {
    std::string name = "TABB_" + section + "_" + key;
    for (char& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* v = get(name.c_str())) set_key(c, section, key, v);
  }
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  for (const auto& [section, key] : known_config_keys()) j[section][key] = get_key(c, section, key);
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (auto sec = j.begin(); sec != j.end(); ++sec) {
    if (!sec.value().is_object()) throw ConfigError("config section '" + sec.key() + "' must be an object");
    for (auto kv = sec.value().begin(); kv != sec.value().end(); ++kv) {
      std::string value = kv.value().is_string() ? kv.value().get<std::string>()
                                                 : kv.value().dump();
      set_key(c, sec.key(), kv.key(), value);
    }
  }
  return c;
}

inline void validate_config(const RunConfig& c) {
  validate_env_spec(c.env);
  if (c.optimizer != "adam") throw ConfigError("only the adam optimizer is supported");
  if (c.y_tar_value != "live" && c.y_tar_value != "anchor")
    throw ConfigError("y_tar_value must be 'live' or 'anchor'");
  if (c.source_size < 1 || c.target_size < 1) throw ConfigError("dataset sizes must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw ConfigError("gamma must be in (0,1)");
  if (!(c.target_update_rate > 0.0 && c.target_update_rate <= 1.0))
    throw ConfigError("target_update_rate must be in (0,1]");
  if (!(c.expectile > 0.0 && c.expectile < 1.0)) throw ConfigError("expectile must be in (0,1)");
  if (c.beta < 0.0) throw ConfigError("beta must be >= 0");
  if (!(c.exp_adv_max > 0.0)) throw ConfigError("exp_adv_max must be positive");
  if (!(c.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (c.latent_state_dim < 1 || c.latent_action_dim < 1)
    throw ConfigError("latent dims must be >= 1");
  if (c.pretrain_steps < 0 || c.stage2_steps < 0 || c.anchor_steps < 0 || c.steps < 0)
    throw ConfigError("step counts must be >= 0");
  if (!(c.wtar_clamp_lo > 0.0) || c.wtar_clamp_hi < c.wtar_clamp_lo)
    throw ConfigError("wtar clamp bounds must satisfy 0 < lo <= hi");
  if (c.seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  if (c.eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (c.eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.diag_transitions < 1) throw ConfigError("diag_transitions must be >= 1");
  if (c.diag_groups < 1) throw ConfigError("diag_groups must be >= 1");
}

inline RepConfig rep_config(const RunConfig& c) {
  RepConfig r;
  r.latent_state_dim = c.latent_state_dim;
  r.latent_action_dim = c.latent_action_dim;
  r.state_encoder_hidden = c.state_encoder_hidden;
  r.state_action_encoder_hidden = c.state_action_encoder_hidden;
  r.f_ref_hidden = c.f_ref_hidden;
  r.activation = c.activation;
  r.learning_rate = c.learning_rate;
  r.batch_size = c.batch_size;
  r.wtar_refresh = c.wtar_refresh;
  r.wtar_clamp_lo = c.wtar_clamp_lo;
  r.wtar_clamp_hi = c.wtar_clamp_hi;
  r.wtar_normalize = c.wtar_normalize;
  r.wtar_mode = c.wtar_mode;
  return r;
}

inline AnchorConfig anchor_config(const RunConfig& c) {
  AnchorConfig a;
  a.value_hidden = c.anchor_hidden;
  a.critic_hidden = c.critic_hidden;
  a.activation = c.activation;
  a.learning_rate = c.learning_rate;
  a.gamma = c.gamma;
  a.expectile = c.expectile;
  a.batch_size = c.batch_size;
  a.target_update_rate = c.target_update_rate;
  return a;
}

inline AgentConfig agent_config(const RunConfig& c) {
  AgentConfig a;
  a.actor_hidden = c.actor_hidden;
  a.critic_hidden = c.critic_hidden;
  a.value_hidden = c.value_hidden;
  a.activation = c.activation;
  a.learning_rate = c.learning_rate;
  a.gamma = c.gamma;
  a.target_update_rate = c.target_update_rate;
  a.batch_size = c.batch_size;
  a.expectile = c.expectile;
  a.beta = c.beta;
  a.exp_adv_max = c.exp_adv_max;
  a.temperature = c.temperature;
  a.y_tar_anchor = c.y_tar_value == "anchor";
  a.src_weight_rescale = c.src_weight_rescale;
  return a;
}

struct ConfigOverride {
  std::string section;
  std::string key;
  std::string value;
};

// Parses "--set section.key=value" payloads.
inline ConfigOverride parse_override(const std::string& arg) {
  size_t eq = arg.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + arg + "' must look like section.key=value");
  std::string path = detail::trim(arg.substr(0, eq));
  size_t dot = path.find('.');
  if (dot == std::string::npos)
    throw ConfigError("override '" + arg + "' must look like section.key=value");
  return {path.substr(0, dot), path.substr(dot + 1), detail::trim(arg.substr(eq + 1))};
}

}  // namespace tabb
