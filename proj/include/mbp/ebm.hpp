// Efficient Behavior Miner: frequency-domain filter layers, behavior mixer and
// the residual/FFN stack that turns a behavior-aware sequence into a user
// vector.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/embedding.hpp"
#include "mbp/fft.hpp"
#include "mbp/rng.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbp {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EncodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Pooling { Last, Mean };

struct ModelConfig {
  Index dim = 64;
  int layers = 2;
  int k = 4;
  int n_behaviors = 4;
  int n_items = 0;
  int max_len = 64;
  int ffn_mult = 2;
  fft::Mode fft_mode = fft::Mode::Real;
  Pooling pooling = Pooling::Last;
  // Replaces every filter layer by the identity map.
  bool identity_filter = false;

  Index chunk() const { return dim / k; }
  void validate() const;
};

// One filter layer. Chunk n of each complex weight occupies rows
// [n*m, (n+1)*m) of an (k*m) x m matrix, m = d/k; each chunk computes
// y = x W^T + b on a row vector x.
struct EflParams {
  Param w1_re, w1_im, b1_re, b1_im;
  Param w2_re, w2_im, b2_re, b2_im;
  int k = 1;

  EflParams() = default;
  EflParams(const std::string& prefix, Index dim, int k);
  Index dim() const { return b1_re.value.cols(); }
  Index chunk() const { return w1_re.value.cols(); }
  std::vector<Param*> params();
  void init(Rng& rng);
};

struct EbmLayerParams {
  std::vector<EflParams> filters;  // one per behavior view, then the overall sequence
  Param mixer_w, mixer_b;
  Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Param ln1_g, ln1_b, ln2_g, ln2_b;

  EbmLayerParams() = default;
  EbmLayerParams(const std::string& prefix, const ModelConfig& cfg);
  std::vector<Param*> params();
  void init(Rng& rng);
};

struct EbmParams {
  ModelConfig config;
  EmbeddingTables tables;
  std::vector<EbmLayerParams> layers;

  EbmParams() = default;
  explicit EbmParams(const ModelConfig& cfg);
  void init(Rng& rng);
  std::vector<Param*> params();
  Index count() const;
  void set_trainable(bool trainable);
};

// Building blocks on plain matrices.
fft::ComplexSpectrum chunked_complex_mlp(const fft::ComplexSpectrum& x, const EflParams& p);
Mat efl_forward(const Mat& s, const EflParams& p, fft::Mode mode = fft::Mode::Real);
SequenceMatrix efl_forward(const SequenceMatrix& s, const EflParams& p, fft::Mode mode = fft::Mode::Real);

namespace ad_ops {
// Fused differentiable complex MLP; returns the real and imaginary outputs.
fft::SpectrumVars chunked_complex_mlp(ad::Tape& tape, fft::SpectrumVars x, EflParams& p);
ad::Var efl(ad::Tape& tape, ad::Var s, EflParams& p, fft::Mode mode);
}  // namespace ad_ops

// Token kinds inside a layer input: behavior index, -1 padding, -2 prompt.
inline constexpr int kPadToken = -1;
inline constexpr int kPromptToken = -2;

ad::Var ebm_layer_forward(ad::Tape& tape, ad::Var hidden, std::span<const int> token_kinds, EbmLayerParams& layer,
                          const ModelConfig& cfg);
Mat ebm_layer_forward(const Mat& hidden, std::span<const int> token_kinds, EbmLayerParams& layer,
                      const ModelConfig& cfg);

ad::Var inject_prompts(ad::Var hidden, ad::Var tokens);
ad::Var strip_prompts(ad::Var hidden, Index n_tokens);

// prompts[l] (C x d) is prepended at layer l; an invalid Var skips the layer.
ad::Var encode_user(ad::Tape& tape, std::span<const Event> events, EbmParams& params, Index seq_len,
                    std::span<const ad::Var> prompts = {});
Mat encode_user(std::span<const Event> events, EbmParams& params, Index seq_len,
                std::span<const Mat> prompts = {});

struct EflCensus {
  std::int64_t weights = 0;
  std::int64_t biases = 0;
  std::int64_t mixer_slice = 0;

  std::int64_t filter() const { return weights + biases; }
  std::int64_t total() const { return filter() + mixer_slice; }
};

// (1 + 4/k) d^2 + 4d
std::int64_t efl_param_count(Index dim, int k);
// Counts the scalars actually allocated by one filter layer, plus a d x d
// mixer slice. `length` is accepted to show the count does not depend on it.
EflCensus efl_census(Index dim, int k, Index length = 64);

// softmax(X X^T / sqrt(d)) X, the quadratic reference kernel for benchmarks.
Mat attention_reference(const Mat& x);

}  // namespace mbp
