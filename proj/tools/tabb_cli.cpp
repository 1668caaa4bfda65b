// tabb: dataset generation, training, evaluation, and diagnostics for the
// cross-domain offline RL lab.
//
// Config precedence: built-in defaults < --config file < TABB_SECTION_KEY
// environment variables < command-line overrides (--set first, then named
// flags). Exit codes: 0 success, 2 config/usage error, 3 runtime failure.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tabb/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<tabb::ConfigOverride> flag_overrides;
};

void add_common(CLI::App* sub, CommonOpts& c) {
  sub->add_option("--config", c.config_path, "Config file (INI sections: env, data, model, run)")
      ->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "Override a config key: section.key=value (repeatable)");
}

// Registers a flag that maps onto a config key; applied after --set entries.
void add_mapped(CLI::App* sub, CommonOpts& c, const std::string& flag,
                const std::string& section, const std::string& key,
                const std::string& help) {
  sub->add_option_function<std::string>(
         flag,
         [&c, section, key](const std::string& v) {
           c.flag_overrides.push_back({section, key, v});
         },
         help)
      ->type_name("VALUE");
}

tabb::RunConfig resolve_config(const CommonOpts& c) {
  tabb::RunConfig cfg;
  if (!c.config_path.empty()) tabb::load_config_file(cfg, c.config_path);
  tabb::apply_env_overrides(cfg);
  for (const std::string& s : c.sets) {
    tabb::ConfigOverride ov = tabb::parse_override(s);
    tabb::set_key(cfg, ov.section, ov.key, ov.value);
  }
  for (const tabb::ConfigOverride& ov : c.flag_overrides)
    tabb::set_key(cfg, ov.section, ov.key, ov.value);
  tabb::validate_config(cfg);
  return cfg;
}

std::vector<tabb::Variant> parse_variants(const std::string& csv) {
  std::vector<tabb::Variant> out;
  std::string cur;
  std::istringstream in(csv);
  while (std::getline(in, cur, ','))
    if (!tabb::detail::trim(cur).empty())
      out.push_back(tabb::variant_from_string(tabb::detail::trim(cur)));
  if (out.empty()) throw tabb::ConfigError("variant list '" + csv + "' is empty");
  return out;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
  } else {
    tabb::write_text_file(out_path, text);
    std::cout << "wrote " << out_path << "\n";
  }
}

int cmd_gen_data(const CommonOpts& c, bool force) {
  tabb::RunConfig cfg = resolve_config(c);
  tabb::GenDataResult res = tabb::run_gen_data(cfg, force);
  std::cout << "source " << res.source_path << "\n"
            << res.source_header.dump(2) << "\n"
            << "target " << res.target_path << "\n"
            << res.target_header.dump(2) << "\n";
  return 0;
}

int cmd_train(const CommonOpts& c, const std::string& manifest_path,
              const std::string& out_override) {
  tabb::RunConfig cfg;
  std::uint64_t manifest_seed = 0;
  tabb::Variant manifest_variant = tabb::Variant::tabb;
  if (!manifest_path.empty()) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest '" + manifest_path + "'");
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("manifest '" + manifest_path + "' is not valid JSON: " + e.what());
    }
    if (m.value("kind", "") != "manifest")
      throw std::runtime_error("'" + manifest_path + "' is not a run manifest");
    cfg = tabb::config_from_json(m.at("config"));
    manifest_seed = m.at("seed").get<std::uint64_t>();
    manifest_variant = tabb::variant_from_string(m.at("variant").get<std::string>());
    tabb::validate_config(cfg);
    std::string run_dir = out_override.empty()
                              ? std::filesystem::path(manifest_path).parent_path().string()
                              : out_override;
    if (run_dir.empty()) run_dir = ".";
    tabb::TrainArtifacts art =
        tabb::run_training(cfg, manifest_seed, manifest_variant, run_dir);
    std::cout << "run " << art.run_dir << " variant " << tabb::to_string(manifest_variant)
              << " seed " << manifest_seed << " normalized "
              << tabb::format_g17(art.final_normalized) << "\n";
    return 0;
  }
  cfg = resolve_config(c);
  if (!out_override.empty()) cfg.out_dir = out_override;
  const std::string vname = tabb::to_string(cfg.variant);
  for (std::uint64_t seed : cfg.seeds) {
    std::string run_dir = cfg.seeds.size() == 1
                              ? cfg.out_dir
                              : cfg.out_dir + "/run_" + vname + "_s" + std::to_string(seed);
    tabb::TrainArtifacts art = tabb::run_training(cfg, seed, cfg.variant, run_dir);
    std::cout << "run " << art.run_dir << " variant " << vname << " seed " << seed
              << " normalized " << tabb::format_g17(art.final_normalized) << "\n";
  }
  return 0;
}

int cmd_eval(const CommonOpts& c, const std::vector<std::string>& run_dirs,
             const std::string& out_path) {
  tabb::RunConfig cfg = resolve_config(c);
  tabb::EvalReport rep = tabb::run_eval(cfg, run_dirs);
  emit(tabb::eval_report_csv(rep), out_path);
  return 0;
}

int cmd_diagnose(const CommonOpts& c, const std::string& run_dir, std::string out_dir) {
  tabb::RunConfig cfg = resolve_config(c);
  if (out_dir.empty()) out_dir = run_dir + "/diagnostics";
  tabb::DiagnoseArtifacts art =
      tabb::run_diagnose(cfg, run_dir, out_dir, cfg.seeds.front());
  std::ifstream sum(art.summary_txt_path);
  std::cout << std::string((std::istreambuf_iterator<char>(sum)),
                           std::istreambuf_iterator<char>());
  std::cout << "curve " << art.curve_csv_path << "\nbound " << art.bound_json_path << "\n";
  return 0;
}

int cmd_sweep(const CommonOpts& c, const std::string& variants_csv,
              const std::string& out_override) {
  tabb::RunConfig cfg = resolve_config(c);
  if (!out_override.empty()) cfg.out_dir = out_override;
  std::vector<tabb::Variant> variants = parse_variants(variants_csv);
  std::vector<tabb::SweepRow> rows = tabb::run_sweep(cfg, variants, cfg.out_dir);
  std::vector<std::string> metrics;
  metrics.reserve(rows.size());
  for (const auto& r : rows) metrics.push_back(r.run_dir + "/metrics.jsonl");
  std::cout << tabb::run_report(metrics);
  std::cout << "summary " << cfg.out_dir << "/sweep_summary.csv\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& metrics_paths, const std::string& out_path) {
  emit(tabb::run_report(metrics_paths), out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain offline RL lab: datasets, training, diagnostics"};
  app.require_subcommand(1);

  CommonOpts gen_c;
  bool gen_force = false;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate source and target datasets");
  add_common(gen, gen_c);
  gen->add_flag("--force", gen_force, "Overwrite existing dataset files");
  add_mapped(gen, gen_c, "--source-size", "data", "source_size", "Source transition count");
  add_mapped(gen, gen_c, "--target-size", "data", "target_size", "Target transition count");
  add_mapped(gen, gen_c, "--source-tier", "data", "source_tier", "Source behavior tier");
  add_mapped(gen, gen_c, "--target-tier", "data", "target_tier", "Target behavior tier");
  add_mapped(gen, gen_c, "--data-dir", "data", "dir", "Dataset directory");
  add_mapped(gen, gen_c, "--seed", "run", "seeds", "Root seed for generation");

  CommonOpts train_c;
  std::string train_manifest, train_out;
  CLI::App* train = app.add_subcommand("train", "Train representation, anchor, and agent");
  add_common(train, train_c);
  CLI::Option* mopt = train->add_option("--manifest", train_manifest,
                                        "Reproduce a run from its manifest (seed, variant, and "
                                        "config come from the manifest)")
                          ->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Output directory override");
  add_mapped(train, train_c, "--seed", "run", "seeds", "Seed list, comma separated");
  add_mapped(train, train_c, "--variant", "run", "variant", "tabb | no_tbm | src_actor");
  add_mapped(train, train_c, "--steps", "run", "steps", "Agent training steps");
  add_mapped(train, train_c, "--data-dir", "data", "dir", "Dataset directory");
  for (const std::string& name : {"--config", "--set", "--seed", "--variant", "--steps", "--data-dir"})
    mopt->excludes(train->get_option(name));

  CommonOpts eval_c;
  std::vector<std::string> eval_dirs;
  std::string eval_out;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate trained agents on the target domain");
  add_common(eval, eval_c);
  eval->add_option("run_dirs", eval_dirs, "Run directories containing agent.ck")
      ->required()
      ->expected(-1);
  eval->add_option("--out", eval_out, "Write the CSV report here instead of stdout");
  add_mapped(eval, eval_c, "--episodes", "run", "eval_episodes", "Evaluation episodes per run");

  CommonOpts diag_c;
  std::string diag_run, diag_out;
  CLI::App* diag = app.add_subcommand("diagnose", "Oracle Bellman-error curve and bound report");
  add_common(diag, diag_c);
  diag->add_option("--run", diag_run, "Run directory with stack.ck and anchor.ck")->required();
  diag->add_option("--out", diag_out, "Diagnostics output directory (default <run>/diagnostics)");
  add_mapped(diag, diag_c, "--transitions", "run", "diag_transitions", "Source transitions to check");
  add_mapped(diag, diag_c, "--groups", "run", "diag_groups", "Percentile-curve group count");
  add_mapped(diag, diag_c, "--replay-mode", "run", "diag_replay_mode", "expected | sample");
  add_mapped(diag, diag_c, "--seed", "run", "seeds", "Root seed for the diagnose stream");

  CommonOpts sweep_c;
  std::string sweep_variants = "tabb,no_tbm,src_actor", sweep_out;
  CLI::App* sweep = app.add_subcommand("sweep", "Train all seed x variant combinations");
  add_common(sweep, sweep_c);
  sweep->add_option("--variants", sweep_variants, "Comma-separated variant list");
  sweep->add_option("--out", sweep_out, "Output directory override");
  add_mapped(sweep, sweep_c, "--seeds", "run", "seeds", "Seed list, comma separated");
  add_mapped(sweep, sweep_c, "--steps", "run", "steps", "Agent training steps");
  add_mapped(sweep, sweep_c, "--workers", "run", "workers", "Parallel worker slots");
  add_mapped(sweep, sweep_c, "--data-dir", "data", "dir", "Dataset directory");

  std::vector<std::string> report_paths;
  std::string report_out;
  CLI::App* report = app.add_subcommand("report", "Aggregate metrics JSONL files per variant");
  report->add_option("metrics", report_paths, "metrics.jsonl paths")->required()->expected(-1);
  report->add_option("--out", report_out, "Write the CSV table here instead of stdout");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen_c, gen_force);
    if (train->parsed()) return cmd_train(train_c, train_manifest, train_out);
    if (eval->parsed()) return cmd_eval(eval_c, eval_dirs, eval_out);
    if (diag->parsed()) return cmd_diagnose(diag_c, diag_run, diag_out);
    if (sweep->parsed()) return cmd_sweep(sweep_c, sweep_variants, sweep_out);
    if (report->parsed()) return cmd_report(report_paths, report_out);
    std::cerr << "no subcommand selected\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const tabb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
