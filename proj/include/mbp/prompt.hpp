// Customized prompt learning: per-user prompt information (attributes,
// behavior statistics, per-behavior sequences), the factorized gate that turns
// it into layer-wise prompt tokens, and the coding-rate regularizer.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/data.hpp"
#include "mbp/ebm.hpp"
#include "mbp/embedding.hpp"
#include "mbp/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace mbp {

// Factor: one score vector per layer plus a bias per gated slot.
// Full: a (2N) x (2N d) gate matrix per layer.
enum class GateMode { Factor, Full };
// Diagonal: token c = s_c (elementwise) p_l with s_c in R^d.
// Full: tokens = reshape(W p_l), W in R^{(C d) x d}.
enum class ProjectionMode { Diagonal, Full };

struct PromptConfig {
  int n_factors = 8;
  int n_tokens = 8;
  // Hidden width of the generator MLPs and GRU; 0 uses d.
  Index hidden = 16;
  GateMode gate = GateMode::Factor;
  ProjectionMode projection = ProjectionMode::Diagonal;
  int gru_len = 32;
  bool use_attributes = true;
  bool use_statistics = true;
  bool use_behaviors = true;

  int info_count() const { return int(use_attributes) + int(use_statistics) + int(use_behaviors); }
};

struct PromptGeneratorParams {
  std::vector<Param> attr_tables;  // (vocab + 1) x h, last row = missing-value token
  Param attr_w1, attr_b1, attr_w2, attr_b2;
  Param stat_w1, stat_b1, stat_w2, stat_b2;
  Param gru_wx, gru_wh, gru_b;  // gates ordered [update | reset | candidate]
  Param gru_lift_w, gru_lift_b;
};

struct PfgParams {
  Param factor_w;                // ((L + 1) N) x d; rows [L N, (L + 1) N) are shared
  Param gate_w, gate_b;          // factor gate: L x d and L x 2N
  std::vector<Param> gate_full;  // full gate: 2N x (2N d) per layer
  std::vector<Param> projection; // C x d (diagonal) or (C d) x d (full) per layer
};

struct PromptParams {
  PromptConfig config;
  Index dim = 0;
  int layers = 0;
  int n_behaviors = 0;
  std::vector<int> attr_vocab;
  PromptGeneratorParams gen;
  PfgParams pfg;
  std::vector<Param> static_tokens;  // C x d per layer
  // Standardization of the statistics vector (not trained).
  Mat stat_mean, stat_scale;

  PromptParams() = default;
  PromptParams(const PromptConfig& cfg, Index dim, int layers, int n_behaviors, std::vector<int> attr_vocab);
  Index hidden() const { return config.hidden > 0 ? config.hidden : dim; }
  void init(Rng& rng);
  // Parameters taking part in the forward pass for the given mode.
  std::vector<Param*> params(bool static_prompt = false);
  std::vector<Param*> all_params();
};

struct UserProfile {
  std::vector<int> attributes;
  data::UserStatistics stats;
  // Most recent items per behavior, oldest first.
  std::vector<std::vector<int>> behavior_items;
};

UserProfile build_profile(std::span<const data::InteractionRecord> history, std::span<const int> attributes,
                          int n_behaviors, int gru_len);

// Mean and max(std, 1) of statistics vectors, as 1 x S rows.
void fit_standardizer(std::span<const std::vector<double>> stats, Mat& mean, Mat& scale);

ad::Var gen_attr_prompt(ad::Tape& tape, std::span<const int> attributes, PromptParams& p);
ad::Var gen_statis_prompt(ad::Tape& tape, const data::UserStatistics& stats, PromptParams& p);
// `flagged` is set when every behavior sequence is empty (the result is then zero).
ad::Var gen_behavior_prompt(ad::Tape& tape, std::span<const std::vector<int>> behavior_items, PromptParams& p,
                            EmbeddingTables& tables, bool* flagged = nullptr);

// Final hidden state of a GRU over the rows of x, starting from zero.
ad::Var gru_last_hidden(ad::Tape& tape, ad::Var x, Param& wx, Param& wh, Param& b);
Mat gru_last_hidden(const Mat& x, const Mat& wx, const Mat& wh, const Mat& b);

// Rows g*N + n: softmax over the M info rows of Q w_{g,n}, then mixture of Q.
ad::Var pfg_factors(ad::Tape& tape, ad::Var q, Param& factor_w);

struct LayerPrompt {
  ad::Var p;       // 1 x d
  ad::Var tokens;  // C x d
  ad::Var beta;    // 1 x 2N
};
LayerPrompt pfg_prompt(ad::Tape& tape, int layer, ad::Var e, PromptParams& p);

// 1/2 logdet(I + d / (denom eps2) M M^T)
double coding_rate(const Mat& m, double denom, double eps2);
ad::Var coding_rate(ad::Var m, double denom, double eps2);

struct CompactnessWeights {
  double lambda_e = 1.0;
  double lambda_p = 1.0;
  double eps_e2 = 1.0;
  double eps_p2 = 1.0;
};
// lambda_e R(E, N, eps_e2) + lambda_p R(P, rows(P), eps_p2) for one user.
ad::Var compactness_loss(ad::Var e, ad::Var p, int n_factors, const CompactnessWeights& w);

struct GeneratedPrompts {
  ad::Var q, e, p;                 // unset for static prompts
  std::vector<ad::Var> tokens;     // per layer; unset entries are not injected
  bool behavior_flagged = false;
};

GeneratedPrompts generate_prompts(ad::Tape& tape, const UserProfile& profile, PromptParams& p,
                                  EmbeddingTables& tables, bool static_prompt, bool first_layer_only);

}  // namespace mbp
