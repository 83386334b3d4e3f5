// Interaction logs: ingestion, filtering, temporal splitting, leave-one-out
// evaluation splits, per-user statistics and a synthetic corpus generator.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbp::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class SynthConfigError : public DataError {
 public:
  using DataError::DataError;
};

struct InteractionRecord {
  int user = 0;
  int item = 0;
  std::int64_t timestamp = 0;
  int behavior = 0;

  bool operator==(const InteractionRecord&) const = default;
};

// Records sorted by (user, timestamp); ids dense in [0, n_*). user_ids and
// item_ids map dense ids back to the original identifiers.
struct InteractionLog {
  std::vector<InteractionRecord> records;
  int n_users = 0;
  int n_items = 0;
  int n_behaviors = 0;
  int target_behavior = 0;
  std::vector<std::int64_t> user_ids;
  std::vector<std::int64_t> item_ids;

  // Rebuilds the per-user record ranges. Call after editing `records`.
  void index();
  std::span<const InteractionRecord> user_records(int user) const;
  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  bool operator==(const InteractionLog& other) const {
    return records == other.records && n_users == other.n_users && n_items == other.n_items &&
           n_behaviors == other.n_behaviors && target_behavior == other.target_behavior &&
           user_ids == other.user_ids && item_ids == other.item_ids;
  }

 private:
  std::vector<std::size_t> offsets_;
};

struct Schema {
  // Column positions of user, item, timestamp, behavior.
  std::array<int, 4> columns{0, 1, 2, 3};
  // 0 infers |B| as max behavior + 1.
  int n_behaviors = 0;
  // -1 selects the last behavior.
  int target_behavior = -1;
};

InteractionLog load_interactions(const std::filesystem::path& path, const Schema& schema = {});
// Writes dense ids, 4 tab-separated columns with a header line.
void save_interactions(const std::filesystem::path& path, const InteractionLog& log);
// "user<TAB>original<TAB>dense" and "item<TAB>original<TAB>dense" lines.
void save_id_map(const std::filesystem::path& path, const InteractionLog& log);

// Removes users and items with fewer than min_count interactions, repeating
// until nothing changes; ids are re-densified preserving order.
InteractionLog filter_min_interactions(const InteractionLog& log, int min_count);

enum class SplitMode { PerUser, Global };

struct TemporalSplit {
  InteractionLog pretrain;
  InteractionLog finetune;
  // Users whose records all stayed in the pre-training part.
  std::vector<int> flagged_users;
};

TemporalSplit temporal_split(const InteractionLog& log, double ratio, SplitMode mode = SplitMode::PerUser);

// Leave-one-out positions, relative to the user's finetune record range.
struct UserSplit {
  int user = 0;
  std::vector<int> train;
  int valid = -1;
  int test = -1;
  int target_count = 0;
};

struct SplitSpec {
  InteractionLog pretrain;
  InteractionLog finetune;
  int target_behavior = 0;
  std::vector<UserSplit> users;
  int excluded_users = 0;
};

SplitSpec make_split_spec(const InteractionLog& pretrain, const InteractionLog& finetune, int target_behavior);
SplitSpec make_split_spec(const InteractionLog& finetune, int target_behavior);

struct UserStatistics {
  std::vector<int> counts;
  // Ordered pairs (from, to), from != to, row-major over from then to.
  std::vector<double> conversion_ratios;
  int total_length = 0;

  double ratio(int from, int to) const;
  // counts, ratios, total length: |B|^2 + 1 values.
  std::vector<double> to_vector() const;
  static std::size_t vector_size(int n_behaviors) {
    return static_cast<std::size_t>(n_behaviors * n_behaviors + 1);
  }
};

UserStatistics compute_user_statistics(std::span<const InteractionRecord> records, int n_behaviors);

// Categorical user profile fields; -1 marks a missing value.
struct UserAttributes {
  std::vector<int> vocab_sizes;
  std::vector<std::vector<int>> values;

  int fields() const { return static_cast<int>(vocab_sizes.size()); }
  bool operator==(const UserAttributes&) const = default;
};

UserAttributes load_attributes(const std::filesystem::path& path, int n_users);
// Rows keyed by original user id; ids absent from `user_ids` are skipped.
UserAttributes load_attributes(const std::filesystem::path& path, std::span<const std::int64_t> user_ids);
void save_attributes(const std::filesystem::path& path, const UserAttributes& attrs);
// All fields missing for every user.
UserAttributes empty_attributes(int n_users, std::vector<int> vocab_sizes = {});

struct SynthConfig {
  int n_users = 2000;
  int n_items = 1000;
  int n_behaviors = 4;
  int seq_len = 60;
  int n_latent_interests = 20;
  int interests_per_user = 2;
  double noise_rate = 0.2;
  std::uint64_t seed = 1;
  int n_attributes = 2;
  int attribute_vocab = 8;
  // Probability that attribute field 0 encodes the user's primary interest.
  double attribute_signal = 0.6;
};

struct SyntheticCorpus {
  InteractionLog log;
  UserAttributes attributes;
  std::vector<int> item_cluster;
  std::vector<std::vector<int>> user_interests;
};

SyntheticCorpus generate_synthetic(const SynthConfig& config);

}  // namespace mbp::data
