// Versioned binary parameter files.
//
// Layout: 8-byte magic, u32 version, u64 header length, JSON header, u64
// tensor count, then per tensor (u32 name length, name, i64 rows, i64 cols,
// row-major doubles), and a trailing FNV-1a checksum of everything before it.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/ebm.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace mbp {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class IncompatibleCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamFile {
  nlohmann::json header;
  std::vector<std::pair<std::string, Mat>> tensors;

  const Mat& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_param_file(const std::filesystem::path& path, const ParamFile& file);
ParamFile read_param_file(const std::filesystem::path& path);

struct Checkpoint {
  EbmParams model;
  std::vector<Mat> adam_m;
  std::vector<Mat> adam_v;
  long long adam_steps = 0;
  int epoch = 0;
  std::string rng_state;
  std::string fingerprint;
};

nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also checks dimensions and fingerprint against the expected configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected,
                           const std::string& expected_fingerprint);

// Copies named tensors into matching parameters; every parameter must be present.
void assign_params(const ParamFile& file, std::span<Param* const> params, const std::string& prefix = "");

}  // namespace mbp
