// End-to-end stages shared by the command line tool and the acceptance
// experiments: dataset I/O, preparation, run directories and stage drivers.
#pragma once

#include "mbp/checkpoint.hpp"
#include "mbp/config.hpp"
#include "mbp/data.hpp"
#include "mbp/eval.hpp"
#include "mbp/pretrain.hpp"
#include "mbp/prompt.hpp"
#include "mbp/tune.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbp::pipeline {

namespace fs = std::filesystem;

class FileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Attributes are indexed like the log's dense users.
struct Dataset {
  data::InteractionLog log;
  data::UserAttributes attributes;
};

// A directory holding interactions.tsv and optionally attributes.tsv, or a
// single interaction file.
Dataset load_dataset(const fs::path& path);
void save_dataset(const fs::path& dir, const Dataset& ds);

struct Prepared {
  data::InteractionLog log;  // after the min-count filter
  data::UserAttributes attributes;
  data::TemporalSplit split;
  data::SplitSpec spec;
  int target_behavior = 0;
};

Prepared prepare(const Dataset& ds, const RunConfig& cfg);
Dataset synthesize(const RunConfig& cfg);

ModelConfig model_config(const RunConfig& cfg, const data::InteractionLog& log);
TuneContext tune_context(const Prepared& p);

// In-memory stages.
PretrainResult pretrain(const RunConfig& cfg, const Prepared& p);
TuneResult tune(const RunConfig& cfg, const Prepared& p, const EbmParams& backbone);
// `prompts` may be null to score with the backbone alone.
EvalReport evaluate_model(const RunConfig& cfg, const Prepared& p, EbmParams& model, PromptParams* prompts,
                          const TuneConfig& tune_cfg);
// Mean pairwise cosine between the rows of P, averaged over up to `max_users` eval users.
double prompt_diversity(EbmParams& model, PromptParams& prompts, const Prepared& p, const TuneConfig& cfg,
                        int max_users = 200);

nlohmann::json prompt_config_json(const PromptConfig& cfg);
PromptConfig prompt_config_from_json(const nlohmann::json& j);
nlohmann::json tune_config_json(const TuneConfig& cfg);

struct PromptFile {
  PromptParams prompts;
  TuneConfig tune;
  std::string backbone_fingerprint;
};
void save_prompts(const fs::path& path, PromptParams& prompts, const TuneConfig& tune,
                  const std::string& backbone_fingerprint);
PromptFile load_prompts(const fs::path& path);

// Run directories: <root>/<fingerprint>-<UTC timestamp>, with <root>/LATEST
// naming the newest one.
fs::path create_run_dir(const fs::path& root, const RunConfig& cfg);
// Accepts a run directory or a root holding LATEST.
fs::path resolve_run_dir(const fs::path& path);

inline constexpr const char* kBackboneFile = "backbone.ckpt";
inline constexpr const char* kTunedBackboneFile = "tuned_backbone.ckpt";
inline constexpr const char* kPromptFile = "prompts.bin";
inline constexpr const char* kRunInfoFile = "run.json";
inline constexpr const char* kConfigFile = "config.json";

// The configuration echoed into a run directory.
nlohmann::json run_config_tree(const fs::path& run_dir);
// The dataset path recorded at pretraining time.
fs::path run_data_path(const fs::path& run_dir);

void write_text(const fs::path& path, const std::string& text);

// File-backed stages. Each returns the directory it wrote to.
fs::path synth_stage(const RunConfig& cfg, const fs::path& out_dir);
fs::path pretrain_stage(const RunConfig& cfg, const fs::path& data_path, const fs::path& runs_root);
fs::path tune_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path);

struct EvalStageOptions {
  bool backbone_only = false;
};
EvalReport eval_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path,
                      const EvalStageOptions& options = {});
// Writes prompts_export.csv; an empty user list exports the first `limit` eval users.
fs::path export_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path,
                      std::vector<int> users, int limit = 20);

// Scaling benchmark of the filter layer against quadratic attention.
struct ScalingRow {
  Index length = 0;
  double efl_seconds = 0.0;
  double attention_seconds = 0.0;
};
std::vector<ScalingRow> time_scaling(Index dim, int k, std::span<const Index> lengths, int repeats,
                                     std::uint64_t seed);

struct BudgetRow {
  std::string variant;
  ParamBudget budget;
};
std::vector<BudgetRow> budget_table(const RunConfig& cfg, const data::InteractionLog& log,
                                   const std::vector<int>& attr_vocab);

std::string bench_report(const RunConfig& cfg, const std::optional<fs::path>& data_path, int repeats);

}  // namespace mbp::pipeline
