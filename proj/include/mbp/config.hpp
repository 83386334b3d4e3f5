// Run configuration: a JSON tree with documented defaults, file and flag
// overrides, and a fingerprint over its canonical serialization.
#pragma once

#include "mbp/data.hpp"
#include "mbp/ebm.hpp"
#include "mbp/eval.hpp"
#include "mbp/pretrain.hpp"
#include "mbp/prompt.hpp"
#include "mbp/tune.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace mbp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json default_config();

// Copies `overlay` into `base`. Keys absent from `base` and values of a
// different JSON type are rejected with the offending key path.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& path = "");

// Levenshtein distance, used for "did you mean" hints.
std::size_t edit_distance(const std::string& a, const std::string& b);

struct RunConfig {
  nlohmann::json tree = default_config();

  std::string canonical() const { return tree.dump(); }
  std::string fingerprint() const;
  // Covers only the sections that shape the pre-trained backbone.
  std::string backbone_fingerprint() const;

  std::uint64_t seed() const;
  data::SynthConfig synth() const;
  ModelConfig model() const;
  PretrainConfig pretrain() const;
  PromptConfig prompt() const;
  TuneConfig tune() const;
  EvalOptions eval() const;
  int min_count() const;
  double split_ratio() const;
  data::SplitMode split_mode() const;
  // -1 resolves to the last behavior.
  int target_behavior(int n_behaviors) const;
  int eval_target_behavior(int n_behaviors) const;
  bool cold_start() const;
};

// "a.b.c=value"; the value is parsed according to the type of the default.
void apply_override(nlohmann::json& tree, const std::string& assignment);

// Parses a config file; an empty file yields an empty object.
nlohmann::json read_config_file(const std::filesystem::path& file);

// Precedence: overrides > file > defaults.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides = {});
RunConfig config_from_json(const nlohmann::json& j);

}  // namespace mbp
