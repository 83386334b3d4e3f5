// Frozen-backbone prompt tuning for a target behavior.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/data.hpp"
#include "mbp/ebm.hpp"
#include "mbp/eval.hpp"
#include "mbp/optim.hpp"
#include "mbp/pretrain.hpp"
#include "mbp/prompt.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mbp {

enum class CompactnessSign { PromoteDiversity, Literal };

struct TuneConfig {
  double lr = 1e-3;
  int batch = 128;
  int max_epochs = 1000;
  int patience = 20;
  Index seq_len = 32;
  double lambda = 0.01;
  CompactnessWeights weights;
  CompactnessSign sign = CompactnessSign::PromoteDiversity;
  bool no_denoise = false;
  bool static_prompt = false;
  bool first_layer_only = false;
  bool no_compactness = false;
  bool full_finetune = false;
  int valid_neg = 100;
  // Positives drawn per user and epoch; 0 uses all of them.
  int samples_per_user = 0;

  double effective_lambda() const { return no_compactness ? 0.0 : lambda; }
};

struct TuneLoss {
  ad::Var total;
  ad::Var pred;
  ad::Var compactness;  // unset when the term is inactive
};

// softplus(-(u.e_p - u.e_n))
double tune_pred_loss(const Mat& u, const Mat& e_p, const Mat& e_n);
// L_pred -/+ lambda * compactness, the sign following cfg.sign.
TuneLoss tune_loss(ad::Var u, ad::Var e_p, ad::Var e_n, const GeneratedPrompts& prompts, int n_factors,
                   const TuneConfig& cfg);

struct ParamBudget {
  std::int64_t trainable = 0;
  std::int64_t total = 0;
  double ratio = 0.0;
};

// Parameters used by the forward pass under the given ablations.
std::vector<Param*> active_params(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg);
void configure_trainable(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg);
ParamBudget param_budget(std::span<Param* const> params);
ParamBudget param_budget(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg);

// FNV-1a over names, shapes and values.
std::uint64_t param_hash(std::span<Param* const> params);

// Per-user inputs shared by tuning, evaluation and export.
struct TuneContext {
  const data::SplitSpec* spec = nullptr;
  const data::UserAttributes* attributes = nullptr;
  int target_behavior = 0;
};

struct UserCase {
  std::vector<Event> events;
  UserProfile profile;
};

// Backbone input from finetune positions in `positions` below `before`, and
// the prompt profile from the pretrain records plus those positions.
UserCase make_user_case(const TuneContext& ctx, int user, std::span<const int> positions, int before,
                        const PromptParams& prompts);

struct TuneExample {
  int user = 0;
  int position = 0;
  int pos_item = 0;
  int neg_item = 0;
};

std::vector<TuneExample> build_tune_examples(const TuneContext& ctx, const TuneConfig& cfg, Rng& rng);

struct TuneResult {
  EbmParams model;
  PromptParams prompts;
  std::vector<CurvePoint> curve;
  int best_epoch = 0;
  double seconds_per_epoch = 0.0;
  double final_train_pred = 0.0;
  int flagged_users = 0;
};

PromptParams make_prompt_params(const EbmParams& model, const PromptConfig& cfg, const TuneContext& ctx,
                                std::uint64_t seed);

TuneResult run_tuning(const EbmParams& backbone, const TuneContext& ctx, const PromptConfig& prompt_cfg,
                      const TuneConfig& cfg, std::uint64_t seed);

// Scores candidates with the train-portion history; `prompts` may be null.
Scorer make_scorer(EbmParams& model, PromptParams* prompts, const TuneContext& ctx, const TuneConfig& cfg);

// Prompt tensors of one user: P (L x d), E, tokens per layer.
struct PromptExport {
  int user = 0;
  Mat p;
  Mat e;
  std::vector<Mat> tokens;
};
PromptExport export_user_prompts(EbmParams& model, PromptParams& prompts, const TuneContext& ctx, int user,
                                 const TuneConfig& cfg);

// Mean pairwise cosine similarity between rows.
double mean_pairwise_cosine(const Mat& rows);

}  // namespace mbp
