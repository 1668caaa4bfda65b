#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tabb/agents.hpp"
#include "tabb/checkpoint.hpp"
#include "tabb/common.hpp"
#include "tabb/config.hpp"
#include "tabb/datasets.hpp"
#include "tabb/diagnostics.hpp"
#include "tabb/envs.hpp"
#include "tabb/representation.hpp"
#include "tabb/tbm.hpp"

namespace tabb {

inline constexpr const char* kTabbVersion = "0.1.0";

inline std::string config_hash_hex(const RunConfig& cfg) {
  std::string dump = config_to_json(cfg).dump();
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(dump)));
  return buf;
}

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + path + "': " + ec.message());
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ----- dataset generation -----

struct GenDataResult {
  std::string source_path;
  std::string target_path;
  nlohmann::json source_header;
  nlohmann::json target_header;
};

inline GenDataResult run_gen_data(const RunConfig& cfg, bool force) {
  validate_config(cfg);
  GenDataResult res;
  res.source_path = cfg.resolved_source_path();
  res.target_path = cfg.resolved_target_path();
  for (const std::string& p : {res.source_path, res.target_path})
    if (!force && std::filesystem::exists(p))
      throw std::runtime_error("refusing to overwrite existing '" + p +
                               "' (pass --force to replace it)");
  ensure_dir(std::filesystem::path(res.source_path).parent_path().string());
  ensure_dir(std::filesystem::path(res.target_path).parent_path().string());
  EnvPair pair = make_pair(cfg.env);
  std::uint64_t root = cfg.seeds.front();
  OfflineDataset src = generate(pair.source, cfg.source_tier, cfg.source_size,
                                Rng::stream_seed(root, "data-source"), cfg.gamma);
  OfflineDataset tar = generate(pair.target, cfg.target_tier, cfg.target_size,
                                Rng::stream_seed(root, "data-target"), cfg.gamma);
  save_dataset(src, res.source_path);
  save_dataset(tar, res.target_path);
  res.source_header = dataset_header(src);
  res.target_header = dataset_header(tar);
  return res;
}

// ----- checkpoints with config metadata -----

inline nlohmann::json checkpoint_meta(const RunConfig& cfg, const std::string& kind,
                                      std::uint64_t seed) {
  return nlohmann::json{{"kind", kind},
                        {"version", kTabbVersion},
                        {"seed", seed},
                        {"env", env_spec_to_json(cfg.env)},
                        {"config", config_to_json(cfg)}};
}

inline void require_env_match(const nlohmann::json& meta, const RunConfig& cfg,
                              const std::string& path) {
  if (!meta.contains("env") || meta.at("env") != env_spec_to_json(cfg.env))
    throw std::runtime_error("checkpoint '" + path +
                             "' was trained on a different environment spec than the config");
}

inline void save_stack_checkpoint(const EncoderStack& st, const RunConfig& cfg,
                                  std::uint64_t seed, const std::string& path) {
  Checkpoint ck;
  ck.meta = checkpoint_meta(cfg, "stack", seed);
  ck.meta["state_dim"] = st.state_dim;
  ck.meta["action_dim"] = st.action_dim;
  ck.meta["latent_state_dim"] = st.latent_state_dim;
  ck.meta["latent_action_dim"] = st.latent_action_dim;
  ck.components.push_back({"phi", st.phi.spec, st.phi.params});
  ck.components.push_back({"psi", st.psi.spec, st.psi.params});
  ck.components.push_back({"f_ref", st.f_ref.spec, st.f_ref.params});
  save_checkpoint(ck, path);
}

inline EncoderStack load_stack_checkpoint(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "stack")
    throw std::runtime_error("checkpoint '" + path + "' is not an encoder-stack checkpoint");
  require_env_match(ck.meta, cfg, path);
  EncoderStack st;
  st.state_dim = ck.meta.at("state_dim").get<int>();
  st.action_dim = ck.meta.at("action_dim").get<int>();
  st.latent_state_dim = ck.meta.at("latent_state_dim").get<int>();
  st.latent_action_dim = ck.meta.at("latent_action_dim").get<int>();
  auto to_module = [&](const char* name) {
    const CheckpointComponent& c = ck.component(name);
    MlpModule m;
    m.spec = c.spec;
    m.params = c.params;
    m.opt = make_adam(c.params.values.size(), cfg.learning_rate);
    m.frozen = true;
    return m;
  };
  st.phi = to_module("phi");
  st.psi = to_module("psi");
  st.f_ref = to_module("f_ref");
  return st;
}

inline void save_anchor_checkpoint(const AnchorValue& a, const RunConfig& cfg, std::uint64_t seed,
                                   const std::string& path) {
  Checkpoint ck;
  ck.meta = checkpoint_meta(cfg, "anchor", seed);
  ck.meta["gamma"] = a.gamma;
  ck.components.push_back({"net", a.net.spec, a.net.params});
  save_checkpoint(ck, path);
}

inline AnchorValue load_anchor_checkpoint(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "anchor")
    throw std::runtime_error("checkpoint '" + path + "' is not an anchor checkpoint");
  require_env_match(ck.meta, cfg, path);
  AnchorValue a;
  a.gamma = ck.meta.at("gamma").get<double>();
  const CheckpointComponent& c = ck.component("net");
  a.net.spec = c.spec;
  a.net.params = c.params;
  a.net.opt = make_adam(c.params.values.size(), cfg.learning_rate);
  a.net.frozen = true;
  return a;
}

inline void save_agent_checkpoint(const AgentBundle& b, const RunConfig& cfg, std::uint64_t seed,
                                  const std::string& path) {
  Checkpoint ck;
  ck.meta = checkpoint_meta(cfg, "agent", seed);
  ck.meta["state_dim"] = b.state_dim;
  ck.meta["action_dim"] = b.action_dim;
  ck.components.push_back({"critic", b.critic.spec, b.critic.params});
  ck.components.push_back({"critic_target", b.critic.spec, b.critic_target});
  ck.components.push_back({"value", b.value.spec, b.value.params});
  ck.components.push_back({"policy", b.policy.spec, b.policy.params});
  save_checkpoint(ck, path);
}

inline AgentBundle load_agent_checkpoint(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "agent")
    throw std::runtime_error("checkpoint '" + path + "' is not an agent checkpoint");
  require_env_match(ck.meta, cfg, path);
  AgentBundle b;
  b.cfg = agent_config(cfg);
  b.state_dim = ck.meta.at("state_dim").get<int>();
  b.action_dim = ck.meta.at("action_dim").get<int>();
  auto to_module = [&](const char* name) {
    const CheckpointComponent& c = ck.component(name);
    MlpModule m;
    m.spec = c.spec;
    m.params = c.params;
    m.opt = make_adam(c.params.values.size(), cfg.learning_rate);
    m.frozen = true;
    return m;
  };
  b.critic = to_module("critic");
  b.critic_target = ck.component("critic_target").params;
  b.value = to_module("value");
  b.policy = to_module("policy");
  return b;
}

// ----- training orchestration -----

struct TrainArtifacts {
  std::string run_dir;
  std::string manifest_path;
  std::string metrics_path;
  std::string stack_path;
  std::string anchor_path;
  std::string agent_path;
  std::vector<MetricsRecord> trace;
  double final_normalized = 0.0;
};

inline nlohmann::ordered_json metrics_to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["l_q_tar"] = r.l_q_tar;
  j["l_q_src"] = r.l_q_src;
  j["l_v"] = r.l_v;
  j["l_pi"] = r.l_pi;
  j["weight_entropy"] = r.weight_entropy;
  j["eval_return"] = r.eval_return;
  j["normalized_score"] = r.normalized_score;
  j["seed"] = r.seed;
  j["variant"] = r.variant;
  return j;
}

inline nlohmann::ordered_json make_manifest(const RunConfig& cfg, std::uint64_t seed,
                                            Variant variant, const TrainArtifacts& art) {
  nlohmann::ordered_json m;
  m["format_version"] = 1;
  m["kind"] = "manifest";
  m["version"] = kTabbVersion;
  m["config_hash"] = config_hash_hex(cfg);
  m["seed"] = seed;
  m["variant"] = to_string(variant);
  m["created_unix"] = static_cast<std::int64_t>(std::time(nullptr));
  m["artifacts"] = {{"metrics", art.metrics_path},
                    {"stack", art.stack_path},
                    {"anchor", art.anchor_path},
                    {"agent", art.agent_path}};
  m["config"] = config_to_json(cfg);
  return m;
}

inline void check_dataset_matches(const OfflineDataset& ds, const RunConfig& cfg,
                                  const std::string& path, bool want_target) {
  EnvSpec want = cfg.env;
  if (want.horizon == 0)
    want.horizon = want.family == EnvFamily::grid_slip ? 100 : 200;
  if (env_spec_to_json(ds.env_spec) != env_spec_to_json(want))
    throw std::runtime_error("dataset '" + path +
                             "' was generated for a different environment spec than the config");
  if (ds.from_target != want_target)
    throw std::runtime_error("dataset '" + path + "' is " +
                             (ds.from_target ? std::string("target") : std::string("source")) +
                             "-domain but the config expects the " +
                             (want_target ? "target" : "source") + " side");
}

// Full Algorithm-1 pipeline: stack pretraining (both stages) and anchor
// training, all from the given root seed's streams.
struct PretrainedModels {
  EncoderStack stack;
  AnchorValue anchor;
};

inline PretrainedModels pretrain(const RunConfig& cfg, const OfflineDataset& src,
                                 const OfflineDataset& tar, Rng& init_rng, Rng& train_rng) {
  PretrainedModels m{make_stack(src.state_dim, src.action_dim, rep_config(cfg), init_rng),
                     AnchorValue{}};
  train_stage1(m.stack, src, tar, cfg.pretrain_steps, rep_config(cfg), train_rng);
  freeze_encoders(m.stack);
  train_stage2(m.stack, tar, cfg.stage2_steps, rep_config(cfg), train_rng);
  m.stack.f_ref.frozen = true;
  m.anchor = make_anchor(m.stack, anchor_config(cfg), init_rng);
  train_anchor(m.anchor, m.stack, tar, cfg.anchor_steps, anchor_config(cfg), train_rng);
  m.anchor.net.frozen = true;
  return m;
}

inline TrainArtifacts run_training_with_data(const RunConfig& cfg, std::uint64_t seed,
                                             Variant variant, const std::string& run_dir,
                                             const OfflineDataset& src,
                                             const OfflineDataset& tar) {
  validate_config(cfg);
  TrainArtifacts art;
  art.run_dir = run_dir;
  ensure_dir(run_dir);
  art.manifest_path = run_dir + "/manifest.json";
  art.metrics_path = run_dir + "/metrics.jsonl";
  art.stack_path = run_dir + "/stack.ck";
  art.anchor_path = run_dir + "/anchor.ck";
  art.agent_path = run_dir + "/agent.ck";
  write_text_file(art.manifest_path, make_manifest(cfg, seed, variant, art).dump(2) + "\n");

  Rng init_rng(Rng::stream_seed(seed, "init"));
  Rng train_rng(Rng::stream_seed(seed, "train"));
  PretrainedModels models = pretrain(cfg, src, tar, init_rng, train_rng);

  AgentBundle agent = make_agent(models.stack, agent_config(cfg), init_rng);
  TrainLoopConfig loop;
  loop.steps = cfg.steps;
  loop.variant = variant;
  loop.seed = seed;
  loop.eval_every = cfg.eval_every;
  loop.eval_episodes = cfg.eval_episodes;
  loop.target_env = make_pair(cfg.env).target;
  loop.refs = tar.refs;
  loop.eval_seed_root = Rng::stream_seed(seed, "eval");
  std::ofstream metrics(art.metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open '" + art.metrics_path + "' for writing");
  MetricsSink sink = [&metrics, &art](const MetricsRecord& r) {
    metrics << metrics_to_json(r).dump() << '\n';
    metrics.flush();
  };
  art.trace = train_agent(agent, models.stack, &models.anchor, src, tar, loop, train_rng, sink);
  if (!art.trace.empty()) art.final_normalized = art.trace.back().normalized_score;

  save_stack_checkpoint(models.stack, cfg, seed, art.stack_path);
  save_anchor_checkpoint(models.anchor, cfg, seed, art.anchor_path);
  save_agent_checkpoint(agent, cfg, seed, art.agent_path);
  return art;
}

inline TrainArtifacts run_training(const RunConfig& cfg, std::uint64_t seed, Variant variant,
                                   const std::string& run_dir) {
  OfflineDataset src = load_dataset(cfg.resolved_source_path());
  OfflineDataset tar = load_dataset(cfg.resolved_target_path());
  check_dataset_matches(src, cfg, cfg.resolved_source_path(), false);
  check_dataset_matches(tar, cfg, cfg.resolved_target_path(), true);
  return run_training_with_data(cfg, seed, variant, run_dir, src, tar);
}

// ----- evaluation -----

struct EvalRow {
  std::uint64_t seed = 0;
  std::string variant;
  double mean_return = 0.0;
  double normalized = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean = 0.0;
  double stddev = 0.0;
};

inline EvalReport summarize_rows(std::vector<EvalRow> rows) {
  EvalReport rep;
  rep.rows = std::move(rows);
  if (rep.rows.empty()) return rep;
  for (const auto& r : rep.rows) rep.mean += r.normalized;
  rep.mean /= static_cast<double>(rep.rows.size());
  double ss = 0.0;
  for (const auto& r : rep.rows) ss += (r.normalized - rep.mean) * (r.normalized - rep.mean);
  rep.stddev = rep.rows.size() > 1
                   ? std::sqrt(ss / static_cast<double>(rep.rows.size() - 1))
                   : 0.0;
  return rep;
}

inline EvalReport run_eval(const RunConfig& cfg, const std::vector<std::string>& run_dirs) {
  validate_config(cfg);
  Env target = make_pair(cfg.env).target;
  ScoreRefs refs = score_refs_for(target, cfg.gamma);
  std::vector<EvalRow> rows;
  for (const std::string& dir : run_dirs) {
    AgentBundle b = load_agent_checkpoint(dir + "/agent.ck", cfg);
    Checkpoint ck = load_checkpoint(dir + "/agent.ck");
    EvalRow row;
    row.seed = ck.meta.value("seed", std::uint64_t{0});
    nlohmann::json mcfg = ck.meta.value("config", nlohmann::json::object());
    row.variant = mcfg.contains("run") ? mcfg["run"].value("variant", "?") : "?";
    EvalResult er = evaluate(b, target, refs, cfg.eval_episodes,
                             Rng::stream_seed(row.seed, "eval-final"));
    row.mean_return = er.mean_return;
    row.normalized = er.normalized;
    rows.push_back(row);
  }
  return summarize_rows(std::move(rows));
}

inline std::string eval_report_csv(const EvalReport& rep) {
  std::string out = "seed,variant,mean_return,normalized_score\n";
  for (const auto& r : rep.rows)
    out += std::to_string(r.seed) + "," + r.variant + "," + format_g17(r.mean_return) + "," +
           format_g17(r.normalized) + "\n";
  char buf[96];
  std::snprintf(buf, sizeof buf, "summary,,,%.2f±%.2f\n", rep.mean, rep.stddev);
  out += buf;
  return out;
}

// ----- diagnostics orchestration -----

struct DiagnoseArtifacts {
  std::string curve_csv_path;
  std::string bound_json_path;
  std::string summary_txt_path;
  BoundReport bound;
  CurveResult curve;
  double spearman_tbm = 0.0;
  double spearman_mismatch = 0.0;
};

inline DiagnoseArtifacts run_diagnose(const RunConfig& cfg, const std::string& run_dir,
                                      const std::string& out_dir, std::uint64_t seed) {
  validate_config(cfg);
  DiagnoseArtifacts art;
  ensure_dir(out_dir);
  art.curve_csv_path = out_dir + "/curve.csv";
  art.bound_json_path = out_dir + "/bound.json";
  art.summary_txt_path = out_dir + "/summary.txt";
  EncoderStack st = load_stack_checkpoint(run_dir + "/stack.ck", cfg);
  AnchorValue anchor = load_anchor_checkpoint(run_dir + "/anchor.ck", cfg);
  OfflineDataset src = load_dataset(cfg.resolved_source_path());
  OfflineDataset tar = load_dataset(cfg.resolved_target_path());
  check_dataset_matches(src, cfg, cfg.resolved_source_path(), false);
  Env target_env = make_pair(cfg.env).target;

  std::vector<OracleRecord> records = oracle_bellman_error(
      st, anchor, target_env, src, cfg.diag_transitions, cfg.diag_replay_mode,
      Rng::stream_seed(seed, "diagnose"));
  art.bound = theorem1_check(records, anchor.gamma);

  std::vector<int> indices;
  std::vector<double> tbm_vals, deltas;
  std::vector<std::pair<double, double>> pairs;
  for (const auto& r : records) {
    if (r.skipped) continue;
    indices.push_back(r.index);
    tbm_vals.push_back(r.tbm);
    deltas.push_back(r.delta);
    pairs.push_back({r.tbm, r.delta});
  }
  art.curve = percentile_curve(pairs, cfg.diag_groups);
  art.spearman_tbm = art.curve.spearman_rho;
  std::vector<double> mismatch =
      next_state_mismatch(st, src, indices, tar, 512, Rng::stream_seed(seed, "diagnose-mismatch"));
  art.spearman_mismatch = spearman(mismatch, deltas);

  write_curve_csv(art.curve_csv_path, indices, mismatch, tbm_vals, deltas, art.curve.group_of);
  nlohmann::ordered_json bj;
  bj["epsilon"] = art.bound.epsilon;
  bj["lipschitz"] = art.bound.lipschitz;
  bj["gamma"] = art.bound.gamma;
  bj["violations"] = art.bound.violations;
  bj["total"] = art.bound.total;
  bj["skipped"] = art.bound.skipped;
  bj["spearman_tbm"] = art.spearman_tbm;
  bj["spearman_mismatch"] = art.spearman_mismatch;
  bj["group_means"] = art.curve.group_means;
  bj["group_sizes"] = art.curve.group_sizes;
  write_text_file(art.bound_json_path, bj.dump(2) + "\n");

  std::ostringstream sum;
  sum << "transitions checked: " << art.bound.total << " (skipped " << art.bound.skipped << ")\n";
  sum << "bound violations:    " << art.bound.violations << "\n";
  sum << "epsilon:             " << art.bound.epsilon << "\n";
  sum << "lipschitz:           " << art.bound.lipschitz << "\n";
  sum << "spearman (tbm):      " << art.spearman_tbm << "\n";
  sum << "spearman (mismatch): " << art.spearman_mismatch << "\n";
  sum << "group means:        ";
  for (double g : art.curve.group_means) sum << ' ' << g;
  sum << "\n";
  write_text_file(art.summary_txt_path, sum.str());
  return art;
}

// ----- sweep + report -----

struct SweepRow {
  std::string variant;
  std::uint64_t seed = 0;
  double normalized = 0.0;
  std::string run_dir;
};

inline std::vector<SweepRow> run_sweep(const RunConfig& cfg, const std::vector<Variant>& variants,
                                       const std::string& out_dir) {
  validate_config(cfg);
  ensure_dir(out_dir);
  OfflineDataset src = load_dataset(cfg.resolved_source_path());
  OfflineDataset tar = load_dataset(cfg.resolved_target_path());
  check_dataset_matches(src, cfg, cfg.resolved_source_path(), false);
  check_dataset_matches(tar, cfg, cfg.resolved_target_path(), true);
  struct Job {
    Variant variant;
    std::uint64_t seed;
    std::string dir;
  };
  std::vector<Job> jobs;
  for (Variant v : variants)
    for (std::uint64_t s : cfg.seeds)
      jobs.push_back({v, s, out_dir + "/run_" + to_string(v) + "_s" + std::to_string(s)});
  std::vector<SweepRow> rows(jobs.size());
  std::vector<std::string> errors(jobs.size());
  const int workers = std::max(1, cfg.workers);
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        TrainArtifacts art =
            run_training_with_data(cfg, jobs[i].seed, jobs[i].variant, jobs[i].dir, src, tar);
        rows[i] = {to_string(jobs[i].variant), jobs[i].seed, art.final_normalized, jobs[i].dir};
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (size_t i = 0; i < jobs.size(); ++i)
    if (!errors[i].empty())
      throw std::runtime_error("sweep job " + jobs[i].dir + " failed: " + errors[i]);
  std::string csv = "variant,seed,normalized_score,run_dir\n";
  for (const auto& r : rows)
    csv += r.variant + "," + std::to_string(r.seed) + "," + format_g17(r.normalized) + "," +
           r.run_dir + "\n";
  write_text_file(out_dir + "/sweep_summary.csv", csv);
  return rows;
}

// Aggregates final normalized scores per variant from JSONL metrics files.
inline std::string run_report(const std::vector<std::string>& metrics_paths) {
  struct Acc {
    std::vector<double> scores;
  };
  std::map<std::string, Acc> by_variant;
  for (const std::string& path : metrics_paths) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    std::string line, last;
    while (std::getline(in, line))
      if (!detail::trim(line).empty()) last = line;
    if (last.empty()) throw std::runtime_error("metrics file '" + path + "' is empty");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(last);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("metrics file '" + path + "' has a malformed final line: " +
                               e.what());
    }
    by_variant[j.value("variant", "?")].scores.push_back(j.value("normalized_score", 0.0));
  }
  std::string out = "variant,n,mean_normalized,std_normalized\n";
  for (const auto& [variant, acc] : by_variant) {
    double mean = 0.0;
    for (double s : acc.scores) mean += s;
    mean /= static_cast<double>(acc.scores.size());
    double ss = 0.0;
    for (double s : acc.scores) ss += (s - mean) * (s - mean);
    double sd = acc.scores.size() > 1
                    ? std::sqrt(ss / static_cast<double>(acc.scores.size() - 1))
                    : 0.0;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.2f\n", variant.c_str(), acc.scores.size(), mean,
                  sd);
    out += buf;
  }
  return out;
}

}  // namespace tabb
