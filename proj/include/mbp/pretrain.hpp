// Pre-training: next item + next behavior pairwise objective, negative
// sampling, Adam loop with early stopping on validation NDCG.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/checkpoint.hpp"
#include "mbp/data.hpp"
#include "mbp/ebm.hpp"
#include "mbp/optim.hpp"
#include "mbp/rng.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbp {

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<Event> to_events(std::span<const data::InteractionRecord> records);
// Sorted, de-duplicated item ids of a record range.
std::vector<int> item_set(std::span<const data::InteractionRecord> records);

// Uniform over [0, n_items) minus `interacted` (sorted ascending).
int sample_negative_item(std::span<const int> interacted, int n_items, Rng& rng);
// Uniform over behaviors other than `positive`.
int sample_negative_behavior(int positive, int n_behaviors, Rng& rng);

// softplus(-(u.e_p - u.e_n)) + softplus(-(u.b_p - u.b_n))
double pretrain_loss(const Mat& u, const Mat& e_p, const Mat& e_n, const Mat& b_p, const Mat& b_n);
ad::Var pretrain_loss(ad::Var u, ad::Var e_p, ad::Var e_n, ad::Var b_p, ad::Var b_n);

struct PretrainConfig {
  double lr = 1e-3;
  int batch = 128;
  int max_epochs = 1000;
  int patience = 20;
  int min_ctx = 4;
  bool final_only = false;
  // Prefix positions drawn per user and epoch; 0 uses all of them.
  int samples_per_user = 0;
  Index seq_len = 64;
  int valid_neg = 100;
  // 0 validates on every user.
  int valid_users = 0;
};

struct TrainingExample {
  int user = 0;
  // Context is the user's records [0, end); the positive is record `end`.
  int end = 0;
  int pos_item = 0;
  int pos_behavior = 0;
  int neg_item = 0;
  int neg_behavior = 0;
};

// One epoch of shuffled examples; the last record per user is held out.
std::vector<TrainingExample> build_pretrain_examples(const data::InteractionLog& log, const PretrainConfig& cfg,
                                                     Rng& rng);

struct CurvePoint {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_ndcg = 0.0;
};

std::string curve_csv(std::span<const CurvePoint> curve);

// NDCG@10 + NDCG@20 of the held-out last record per user.
double pretrain_validation(EbmParams& model, const data::InteractionLog& log, const PretrainConfig& cfg,
                           std::uint64_t seed);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<CurvePoint> curve;
  int best_epoch = 0;
};

PretrainResult run_pretraining(const data::InteractionLog& log, const ModelConfig& model_cfg,
                               const PretrainConfig& cfg, std::uint64_t seed, const std::string& fingerprint = "");

// One pass over `examples`; returns the mean loss. Exposed for tests.
double pretrain_epoch(EbmParams& model, Adam& opt, const data::InteractionLog& log,
                      std::span<const TrainingExample> examples, const PretrainConfig& cfg, int epoch);

}  // namespace mbp
