// Command line entry point: synth, pretrain, tune, eval, export-prompts,
// gradcheck and bench.
#include "mbp/checkpoint.hpp"
#include "mbp/config.hpp"
#include "mbp/gradcheck_suite.hpp"
#include "mbp/pipeline.hpp"

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace mbp;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> flags;  // overrides derived from dedicated options
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON configuration file");
  cmd->add_option("--set", c.sets, "override a key, e.g. --set tune.lambda=0.1")->take_all();
}

RunConfig resolve(const Common& c, const std::optional<nlohmann::json>& base = std::nullopt) {
  RunConfig cfg;
  if (base) merge_config(cfg.tree, *base);
  if (!c.config.empty()) merge_config(cfg.tree, read_config_file(c.config));
  for (const auto& s : c.sets) apply_override(cfg.tree, s);
  for (const auto& s : c.flags) apply_override(cfg.tree, s);
  return cfg;
}

struct RunArgs {
  std::string run = "runs";
  std::string data;
};

void add_run(CLI::App* cmd, RunArgs& r) {
  cmd->add_option("--run", r.run, "run directory, or a runs root holding LATEST")->capture_default_str();
  cmd->add_option("--data", r.data, "dataset directory (defaults to the one used for pretraining)");
}

fs::path data_for(const RunArgs& r, const fs::path& run_dir) {
  return r.data.empty() ? pipeline::run_data_path(run_dir) : fs::path(r.data);
}

void add_flag_override(CLI::App* cmd, const std::string& name, const std::string& key, Common& c,
                       const std::string& help) {
  cmd->add_flag_callback(name, [&c, key] { c.flags.push_back(key + "=true"); }, help);
}

template <typename T>
void add_value_override(CLI::App* cmd, const std::string& name, const std::string& key, Common& c,
                        const std::string& help) {
  cmd->add_option_function<T>(
      name,
      [&c, key](const T& v) {
        std::ostringstream os;
        os << v;
        c.flags.push_back(key + "=" + os.str());
      },
      help);
}

int report_error(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "error: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-behavior sequential recommender with frequency-domain denoising and prompt tuning"};
  app.require_subcommand(1);

  Common synth_c, pre_c, tune_c, eval_c, export_c, bench_c;

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-behavior corpus");
  add_common(synth, synth_c);
  std::string synth_out = "data";
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  add_value_override<long long>(synth, "--seed", "seed", synth_c, "master seed");

  auto* pre = app.add_subcommand("pretrain", "pre-train the denoising backbone");
  add_common(pre, pre_c);
  std::string pre_data, pre_out = "runs";
  pre->add_option("--data", pre_data, "dataset directory or interaction file")->required();
  pre->add_option("--out", pre_out, "runs root")->capture_default_str();
  add_value_override<long long>(pre, "--seed", "seed", pre_c, "master seed");
  add_flag_override(pre, "--no-ds", "tune.no_denoise", pre_c, "identity filters (denoising ablation)");

  auto* tune = app.add_subcommand("tune", "tune customized prompts on the frozen backbone");
  add_common(tune, tune_c);
  RunArgs tune_r;
  add_run(tune, tune_r);
  add_value_override<double>(tune, "--lambda", "tune.lambda", tune_c, "compactness weight");
  add_value_override<long long>(tune, "--target-behavior", "data.target_behavior", tune_c, "target behavior index");
  add_flag_override(tune, "--no-ds", "tune.no_denoise", tune_c, "identity filters (needs a --no-ds backbone)");
  add_flag_override(tune, "--no-ps", "tune.static_prompt", tune_c, "static soft prompts instead of customized ones");
  add_flag_override(tune, "--no-pg", "tune.first_layer_only", tune_c, "inject prompts at the first layer only");
  add_flag_override(tune, "--no-ct", "tune.no_compactness", tune_c, "drop the compactness term");
  add_flag_override(tune, "--full-finetune", "tune.full_finetune", tune_c, "train the backbone as well");

  auto* eval = app.add_subcommand("eval", "evaluate HR@K and NDCG@K on held-out items");
  add_common(eval, eval_c);
  RunArgs eval_r;
  add_run(eval, eval_r);
  bool backbone_only = false;
  add_value_override<long long>(eval, "--target-behavior", "eval.target_behavior", eval_c, "behavior to evaluate");
  add_flag_override(eval, "--cold-start", "eval.cold_start", eval_c, "users with at most two target interactions");
  add_value_override<std::string>(eval, "--k", "eval.ks", eval_c, "cutoffs, e.g. 10,20");
  add_value_override<long long>(eval, "--n-neg", "eval.n_neg", eval_c, "sampled negatives per user");
  add_value_override<long long>(eval, "--seed", "eval.seed", eval_c, "negative-sampling seed");
  eval->add_flag("--backbone-only", backbone_only, "ignore tuned prompts");

  auto* exp = app.add_subcommand("export-prompts", "write per-user prompt tensors as CSV");
  add_common(exp, export_c);
  RunArgs export_r;
  add_run(exp, export_r);
  std::vector<int> export_users;
  int export_limit = 20;
  exp->add_option("--users", export_users, "dense user indices")->delimiter(',');
  exp->add_option("--limit", export_limit, "users exported when --users is absent")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every learnable operation");
  std::string gc_out;
  gc->add_option("--out", gc_out, "also write the table to this file");

  auto* bench = app.add_subcommand("bench", "parameter census, scaling and budget tables");
  add_common(bench, bench_c);
  std::string bench_data, bench_out;
  int repeats = 5;
  bench->add_option("--data", bench_data, "dataset for the budget and per-epoch timing rows");
  bench->add_option("--repeats", repeats, "timing repeats")->capture_default_str();
  bench->add_option("--out", bench_out, "also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      const RunConfig cfg = resolve(synth_c);
      const fs::path dir = pipeline::synth_stage(cfg, synth_out);
      std::printf("wrote synthetic corpus to %s\n", dir.string().c_str());
    } else if (*pre) {
      const RunConfig cfg = resolve(pre_c);
      const fs::path dir = pipeline::pretrain_stage(cfg, pre_data, pre_out);
      std::printf("wrote backbone to %s\n", (dir / pipeline::kBackboneFile).string().c_str());
    } else if (*tune) {
      const fs::path dir = pipeline::resolve_run_dir(tune_r.run);
      const RunConfig cfg = resolve(tune_c, pipeline::run_config_tree(dir));
      pipeline::tune_stage(cfg, dir, data_for(tune_r, dir));
      std::printf("wrote prompts to %s\n", (dir / pipeline::kPromptFile).string().c_str());
    } else if (*eval) {
      const fs::path dir = pipeline::resolve_run_dir(eval_r.run);
      const RunConfig cfg = resolve(eval_c, pipeline::run_config_tree(dir));
      const EvalReport report = pipeline::eval_stage(cfg, dir, data_for(eval_r, dir), {backbone_only});
      std::fputs(report.to_table().c_str(), stdout);
      std::printf("wrote %s\n", (dir / "eval_report.csv").string().c_str());
    } else if (*exp) {
      const fs::path dir = pipeline::resolve_run_dir(export_r.run);
      const RunConfig cfg = resolve(export_c, pipeline::run_config_tree(dir));
      const fs::path out = pipeline::export_stage(cfg, dir, data_for(export_r, dir), export_users, export_limit);
      std::printf("wrote %s\n", out.string().c_str());
    } else if (*gc) {
      const auto cases = run_gradcheck_suite();
      const std::string table = gradcheck_table(cases);
      std::fputs(table.c_str(), stdout);
      if (!gc_out.empty()) pipeline::write_text(gc_out, table);
      for (const auto& c : cases)
        if (!c.report.passed()) {
          std::fprintf(stderr, "error: gradient check failed for %s\n", c.name.c_str());
          return 2;
        }
    } else if (*bench) {
      const RunConfig cfg = resolve(bench_c);
      std::optional<fs::path> data;
      if (!bench_data.empty()) data = bench_data;
      const std::string report = pipeline::bench_report(cfg, data, repeats);
      std::fputs(report.c_str(), stdout);
      if (!bench_out.empty()) pipeline::write_text(bench_out, report);
    }
  } catch (const ConfigError& e) {
    return report_error("config", e, 1);
  } catch (const pipeline::FileError& e) {
    return report_error("file", e, 1);
  } catch (const CheckpointError& e) {
    return report_error("checkpoint", e, 1);
  } catch (const data::DataError& e) {
    return report_error("data", e, 1);
  } catch (const ProtocolError& e) {
    return report_error("protocol", e, 1);
  } catch (const ShapeError& e) {
    return report_error("shape", e, 1);
  } catch (const std::exception& e) {
    return report_error("internal", e, 2);
  }
  return 0;
}
