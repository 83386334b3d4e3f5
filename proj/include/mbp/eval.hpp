// Leave-one-out ranking evaluation with sampled negatives.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/data.hpp"
#include "mbp/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mbp {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Candidates ordered by descending score, ties by ascending item id.
std::vector<int> rank_by_scores(std::span<const int> candidates, std::span<const double> scores);
std::vector<int> rank_candidates(const Mat& u, std::span<const int> candidates, const Mat& item_table);
// 1-based position of `item` in `ranked`.
int rank_of(std::span<const int> ranked, int item);

struct HitNdcg {
  double hr = 0.0;
  double ndcg = 0.0;
};
HitNdcg hr_ndcg_at_k(int rank, int k);

// Distinct items outside `interacted` (sorted ascending).
std::vector<int> sample_eval_negatives(std::span<const int> interacted, int n_items, int n_neg, Rng& rng);

// Sorted, de-duplicated items of a user under any behavior in both logs.
std::vector<int> interacted_items(const data::SplitSpec& spec, int user);

struct EvalOptions {
  std::vector<int> ks{10, 20};
  int n_neg = 100;
  std::uint64_t seed = 0;
  std::string fingerprint;
};

struct EvalReport {
  std::vector<int> ks;
  std::vector<double> hr;
  std::vector<double> ndcg;
  int n_eval_users = 0;
  int target_behavior = 0;
  int n_neg = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;
  // Set when no user qualified; metrics are then zero.
  bool empty = false;

  double hr_at(int k) const;
  double ndcg_at(int k) const;
  std::string to_csv() const;
  std::string to_table() const;
  bool operator==(const EvalReport&) const = default;
};

// Scores for the candidate items of one evaluation user.
using Scorer = std::function<std::vector<double>(const data::UserSplit&, std::span<const int>)>;

EvalReport evaluate(const data::SplitSpec& spec, const Scorer& scorer, const EvalOptions& options);

// Users with at most two target-behavior interactions in the finetune part.
data::SplitSpec cold_start_subset(const data::SplitSpec& spec, int target_behavior);

}  // namespace mbp
