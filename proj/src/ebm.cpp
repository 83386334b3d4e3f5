#include "mbp/ebm.hpp"

#include <array>
#include <cmath>

namespace mbp {

void ModelConfig::validate() const {
  if (dim <= 0 || k <= 0 || dim % k != 0)
    throw ShapeError("model: k=" + std::to_string(k) + " must divide d=" + std::to_string(dim));
  if (layers < 0 || n_behaviors <= 0 || max_len <= 0 || ffn_mult <= 0)
    throw ShapeError("model: layers, n_behaviors, max_len and ffn_mult must be positive");
}

EflParams::EflParams(const std::string& prefix, Index dim, int k_) : k(k_) {
  if (k_ <= 0 || dim % k_ != 0)
    throw ShapeError(prefix + ": k=" + std::to_string(k_) + " must divide d=" + std::to_string(dim));
  const Index m = dim / k_;
  w1_re = Param(prefix + ".w1_re", dim, m);
  w1_im = Param(prefix + ".w1_im", dim, m);
  b1_re = Param(prefix + ".b1_re", 1, dim);
  b1_im = Param(prefix + ".b1_im", 1, dim);
  w2_re = Param(prefix + ".w2_re", dim, m);
  w2_im = Param(prefix + ".w2_im", dim, m);
  b2_re = Param(prefix + ".b2_re", 1, dim);
  b2_im = Param(prefix + ".b2_im", 1, dim);
}

std::vector<Param*> EflParams::params() {
  return {&w1_re, &w1_im, &b1_re, &b1_im, &w2_re, &w2_im, &b2_re, &b2_im};
}

void EflParams::init(Rng& rng) {
  const Index m = chunk();
  for (Param* p : {&w1_re, &w1_im, &w2_re, &w2_im}) xavier_uniform(*p, m, m, rng);
  for (Param* p : {&b1_re, &b1_im, &b2_re, &b2_im}) p->value.setZero();
}

EbmLayerParams::EbmLayerParams(const std::string& prefix, const ModelConfig& cfg) {
  const Index d = cfg.dim;
  for (int b = 0; b <= cfg.n_behaviors; ++b) {
    const std::string name = b < cfg.n_behaviors ? prefix + ".efl" + std::to_string(b) : prefix + ".efl_all";
    filters.emplace_back(name, d, cfg.k);
  }
  mixer_w = Param(prefix + ".mixer_w", (cfg.n_behaviors + 1) * d, d);
  mixer_b = Param(prefix + ".mixer_b", 1, d);
  ffn_w1 = Param(prefix + ".ffn_w1", d, cfg.ffn_mult * d);
  ffn_b1 = Param(prefix + ".ffn_b1", 1, cfg.ffn_mult * d);
  ffn_w2 = Param(prefix + ".ffn_w2", cfg.ffn_mult * d, d);
  ffn_b2 = Param(prefix + ".ffn_b2", 1, d);
  ln1_g = Param(prefix + ".ln1_g", Mat::Ones(1, d));
  ln1_b = Param(prefix + ".ln1_b", 1, d);
  ln2_g = Param(prefix + ".ln2_g", Mat::Ones(1, d));
  ln2_b = Param(prefix + ".ln2_b", 1, d);
}

std::vector<Param*> EbmLayerParams::params() {
  std::vector<Param*> out;
  for (auto& f : filters)
    for (Param* p : f.params()) out.push_back(p);
  for (Param* p : {&mixer_w, &mixer_b, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln1_g, &ln1_b, &ln2_g, &ln2_b})
    out.push_back(p);
  return out;
}

void EbmLayerParams::init(Rng& rng) {
  for (auto& f : filters) f.init(rng);
  xavier_uniform(mixer_w, mixer_w.value.rows(), mixer_w.value.cols(), rng);
  xavier_uniform(ffn_w1, ffn_w1.value.rows(), ffn_w1.value.cols(), rng);
  xavier_uniform(ffn_w2, ffn_w2.value.rows(), ffn_w2.value.cols(), rng);
  for (Param* p : {&mixer_b, &ffn_b1, &ffn_b2, &ln1_b, &ln2_b}) p->value.setZero();
  ln1_g.value.setOnes();
  ln2_g.value.setOnes();
}

EbmParams::EbmParams(const ModelConfig& cfg)
    : config(cfg), tables(cfg.n_items, cfg.max_len, cfg.n_behaviors, cfg.dim) {
  cfg.validate();
  for (int l = 0; l < cfg.layers; ++l) layers.emplace_back("layer" + std::to_string(l), cfg);
}

void EbmParams::init(Rng& rng) {
  tables.init_xavier(rng);
  for (auto& l : layers) l.init(rng);
}

std::vector<Param*> EbmParams::params() {
  std::vector<Param*> out = tables.params();
  for (auto& l : layers)
    for (Param* p : l.params()) out.push_back(p);
  return out;
}

Index EbmParams::count() const {
  Index n = 0;
  for (Param* p : const_cast<EbmParams*>(this)->params()) n += p->size();
  return n;
}

void EbmParams::set_trainable(bool trainable) {
  for (Param* p : params()) p->trainable = trainable;
}

namespace {

struct MlpWeights {
  const Mat &w1r, &w1i, &b1r, &b1i, &w2r, &w2i, &b2r, &b2i;
};

MlpWeights weights_of(const EflParams& p) {
  return {p.w1_re.value, p.w1_im.value, p.b1_re.value, p.b1_im.value,
          p.w2_re.value, p.w2_im.value, p.b2_re.value, p.b2_im.value};
}

// Pre-activations of the first complex layer are kept for the backward pass.
void mlp_forward(const Mat& xr, const Mat& xi, const MlpWeights& w, int k, Mat& out_r, Mat& out_i, Mat* h_r,
                 Mat* h_i) {
  const Index bins = xr.rows(), d = xr.cols(), m = d / k;
  out_r.resize(bins, d);
  out_i.resize(bins, d);
  if (h_r) {
    h_r->resize(bins, d);
    h_i->resize(bins, d);
  }
  Mat hr(bins, m), hi(bins, m), ar(bins, m), ai(bins, m);
  for (int n = 0; n < k; ++n) {
    const Index c = n * m;
    const auto Xr = xr.middleCols(c, m);
    const auto Xi = xi.middleCols(c, m);
    const auto W1r = w.w1r.middleRows(c, m);
    const auto W1i = w.w1i.middleRows(c, m);
    const auto W2r = w.w2r.middleRows(c, m);
    const auto W2i = w.w2i.middleRows(c, m);
    hr.noalias() = Xr * W1r.transpose();
    hr.noalias() -= Xi * W1i.transpose();
    hr.rowwise() += w.b1r.row(0).segment(c, m);
    hi.noalias() = Xi * W1r.transpose();
    hi.noalias() += Xr * W1i.transpose();
    hi.rowwise() += w.b1i.row(0).segment(c, m);
    ar = hr.unaryExpr([](double v) { return ad::gelu_value(v); });
    ai = hi.unaryExpr([](double v) { return ad::gelu_value(v); });
    auto Or = out_r.middleCols(c, m);
    auto Oi = out_i.middleCols(c, m);
    Or.noalias() = ar * W2r.transpose();
    Or.noalias() -= ai * W2i.transpose();
    Or.rowwise() += w.b2r.row(0).segment(c, m);
    Oi.noalias() = ai * W2r.transpose();
    Oi.noalias() += ar * W2i.transpose();
    Oi.rowwise() += w.b2i.row(0).segment(c, m);
    if (h_r) {
      h_r->middleCols(c, m) = hr;
      h_i->middleCols(c, m) = hi;
    }
  }
}

}  // namespace

fft::ComplexSpectrum chunked_complex_mlp(const fft::ComplexSpectrum& x, const EflParams& p) {
  if (x.cols() != p.dim()) throw ShapeError("chunked_complex_mlp: spectrum width does not match d");
  fft::ComplexSpectrum out;
  out.source_length = x.source_length;
  mlp_forward(x.re, x.im, weights_of(p), p.k, out.re, out.im, nullptr, nullptr);
  return out;
}

Mat efl_forward(const Mat& s, const EflParams& p, fft::Mode mode) {
  return fft::inverse(chunked_complex_mlp(fft::forward(s, mode), p), mode);
}

SequenceMatrix efl_forward(const SequenceMatrix& s, const EflParams& p, fft::Mode mode) {
  SequenceMatrix out{efl_forward(s.values, p, mode), s.mask, s.behavior_ids};
  return out;
}

namespace ad_ops {

namespace {

// GELU and its derivative sharing one erf evaluation.
template <typename In>
void gelu_with_derivative(const In& h, Mat& value, Mat& derivative) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  for (Index i = 0; i < h.rows(); ++i)
    for (Index j = 0; j < h.cols(); ++j) {
      const double x = h(i, j);
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      value(i, j) = x * cdf;
      derivative(i, j) = cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    }
}

}  // namespace

fft::SpectrumVars chunked_complex_mlp(ad::Tape& t, fft::SpectrumVars x, EflParams& p) {
  if (x.re.cols() != p.dim()) throw ShapeError("chunked_complex_mlp: spectrum width does not match d");
  Param* ps[8] = {&p.w1_re, &p.w1_im, &p.b1_re, &p.b1_im, &p.w2_re, &p.w2_im, &p.b2_re, &p.b2_im};
  int leaf[8];
  for (int i = 0; i < 8; ++i) leaf[i] = t.leaf(*ps[i]).id();
  const int ixr = x.re.id(), ixi = x.im.id();
  Mat out_r, out_i, hr, hi;
  const bool record = t.mode() != ad::GradMode::None;
  mlp_forward(x.re.value(), x.im.value(), weights_of(p), p.k, out_r, out_i, record ? &hr : nullptr,
              record ? &hi : nullptr);
  const int inputs[10] = {ixr, ixi, leaf[0], leaf[1], leaf[2], leaf[3], leaf[4], leaf[5], leaf[6], leaf[7]};
  const int k = p.k;
  ad::Var re = t.push(
      std::move(out_r), std::span<const int>(inputs, 10),
      [ixr, ixi, leaf = std::to_array(leaf), k, hr = std::move(hr), hi = std::move(hi)](ad::Tape& t, int self) {
        const int iim = self + 1;
        const Mat& gr = t.grad(self);
        const Mat gi = t.has_grad(iim) ? t.grad(iim) : Mat::Zero(gr.rows(), gr.cols());
        const Mat& xr = t.value(ixr);
        const Mat& xi = t.value(ixi);
        const Mat& w1r = t.value(leaf[0]);
        const Mat& w1i = t.value(leaf[1]);
        const Mat& w2r = t.value(leaf[4]);
        const Mat& w2i = t.value(leaf[5]);
        const bool gw1 = t.needs_grad(leaf[0]) || t.needs_grad(leaf[1]);
        const bool gb1 = t.needs_grad(leaf[2]) || t.needs_grad(leaf[3]);
        const bool gw2 = t.needs_grad(leaf[4]) || t.needs_grad(leaf[5]);
        const bool gx = t.needs_grad(ixr) || t.needs_grad(ixi);
        const Index bins = gr.rows(), d = gr.cols(), m = d / k;
        if (t.needs_grad(leaf[6])) t.grad_ref(leaf[6]) += gr.colwise().sum();
        if (t.needs_grad(leaf[7])) t.grad_ref(leaf[7]) += gi.colwise().sum();
        if (!(gw1 || gb1 || gw2 || gx)) return;
        Mat ar(bins, m), ai(bins, m), der(bins, m), dei(bins, m), dar(bins, m), dai(bins, m);
        for (int n = 0; n < k; ++n) {
          const Index c = n * m;
          const auto Gr = gr.middleCols(c, m);
          const auto Gi = gi.middleCols(c, m);
          const auto Hr = hr.middleCols(c, m);
          const auto Hi = hi.middleCols(c, m);
          const auto W1r = w1r.middleRows(c, m);
          const auto W1i = w1i.middleRows(c, m);
          const auto W2r = w2r.middleRows(c, m);
          const auto W2i = w2i.middleRows(c, m);
          gelu_with_derivative(Hr, ar, der);
          gelu_with_derivative(Hi, ai, dei);
          if (gw2) {
            if (t.needs_grad(leaf[4])) {
              auto g = t.grad_ref(leaf[4]).middleRows(c, m);
              g.noalias() += Gr.transpose() * ar;
              g.noalias() += Gi.transpose() * ai;
            }
            if (t.needs_grad(leaf[5])) {
              auto g = t.grad_ref(leaf[5]).middleRows(c, m);
              g.noalias() -= Gr.transpose() * ai;
              g.noalias() += Gi.transpose() * ar;
            }
          }
          if (!(gw1 || gb1 || gx)) continue;
          dar.noalias() = Gr * W2r;
          dar.noalias() += Gi * W2i;
          dai.noalias() = Gi * W2r;
          dai.noalias() -= Gr * W2i;
          dar.array() *= der.array();
          dai.array() *= dei.array();
          if (t.needs_grad(leaf[2])) t.grad_ref(leaf[2]).middleCols(c, m) += dar.colwise().sum();
          if (t.needs_grad(leaf[3])) t.grad_ref(leaf[3]).middleCols(c, m) += dai.colwise().sum();
          const auto Xr = xr.middleCols(c, m);
          const auto Xi = xi.middleCols(c, m);
          if (t.needs_grad(leaf[0])) {
            auto g = t.grad_ref(leaf[0]).middleRows(c, m);
            g.noalias() += dar.transpose() * Xr;
            g.noalias() += dai.transpose() * Xi;
          }
          if (t.needs_grad(leaf[1])) {
            auto g = t.grad_ref(leaf[1]).middleRows(c, m);
            g.noalias() -= dar.transpose() * Xi;
            g.noalias() += dai.transpose() * Xr;
          }
          if (t.needs_grad(ixr)) {
            auto g = t.grad_ref(ixr).middleCols(c, m);
            g.noalias() += dar * W1r;
            g.noalias() += dai * W1i;
          }
          if (t.needs_grad(ixi)) {
            auto g = t.grad_ref(ixi).middleCols(c, m);
            g.noalias() -= dar * W1i;
            g.noalias() += dai * W1r;
          }
        }
      });
  const int ire = re.id();
  ad::Var im = t.push(std::move(out_i), {ire}, [ire](ad::Tape& t, int) { t.grad_ref(ire); });
  return {re, im};
}

ad::Var efl(ad::Tape& t, ad::Var s, EflParams& p, fft::Mode mode) {
  const Index length = s.rows();
  return fft::inverse(chunked_complex_mlp(t, fft::forward(s, mode), p), length, mode);
}

}  // namespace ad_ops

ad::Var ebm_layer_forward(ad::Tape& t, ad::Var hidden, std::span<const int> kinds, EbmLayerParams& layer,
                          const ModelConfig& cfg) {
  const Index len = hidden.rows();
  if (static_cast<Index>(kinds.size()) != len) throw ShapeError("ebm_layer_forward: token kinds length mismatch");
  if (hidden.cols() != cfg.dim) throw ShapeError("ebm_layer_forward: hidden width does not match d");
  std::vector<std::uint8_t> valid(kinds.size());
  for (std::size_t i = 0; i < kinds.size(); ++i) valid[i] = kinds[i] != kPadToken;
  const ad::Var h = ad::mask_rows(hidden, valid);

  std::vector<ad::Var> filtered;
  filtered.reserve(static_cast<std::size_t>(cfg.n_behaviors + 1));
  std::vector<std::uint8_t> view(kinds.size());
  for (int b = 0; b <= cfg.n_behaviors; ++b) {
    ad::Var x = h;
    if (b < cfg.n_behaviors) {
      for (std::size_t i = 0; i < kinds.size(); ++i) view[i] = kinds[i] == b || kinds[i] == kPromptToken;
      x = ad::mask_rows(h, view);
    }
    ad::Var y = cfg.identity_filter ? x : ad_ops::efl(t, x, layer.filters[static_cast<std::size_t>(b)], cfg.fft_mode);
    filtered.push_back(ad::mask_rows(y, valid));
  }
  const ad::Var mixed =
      ad::add_row(ad::matmul(ad::concat_cols(filtered), t.leaf(layer.mixer_w)), t.leaf(layer.mixer_b));
  const ad::Var h1 = ad::layer_norm(ad::add(h, mixed), t.leaf(layer.ln1_g), t.leaf(layer.ln1_b));
  const ad::Var inner = ad::gelu(ad::add_row(ad::matmul(h1, t.leaf(layer.ffn_w1)), t.leaf(layer.ffn_b1)));
  const ad::Var ffn = ad::add_row(ad::matmul(inner, t.leaf(layer.ffn_w2)), t.leaf(layer.ffn_b2));
  const ad::Var h2 = ad::layer_norm(ad::add(h1, ffn), t.leaf(layer.ln2_g), t.leaf(layer.ln2_b));
  return ad::mask_rows(h2, valid);
}

Mat ebm_layer_forward(const Mat& hidden, std::span<const int> kinds, EbmLayerParams& layer, const ModelConfig& cfg) {
  ad::Tape t(ad::GradMode::None);
  return ebm_layer_forward(t, t.constant(hidden), kinds, layer, cfg).value();
}

ad::Var inject_prompts(ad::Var hidden, ad::Var tokens) {
  if (!tokens.valid() || tokens.rows() == 0) return hidden;
  const ad::Var parts[] = {tokens, hidden};
  return ad::concat_rows(parts);
}

ad::Var strip_prompts(ad::Var hidden, Index n_tokens) {
  if (n_tokens == 0) return hidden;
  return ad::slice_rows(hidden, n_tokens, hidden.rows() - n_tokens);
}

ad::Var encode_user(ad::Tape& t, std::span<const Event> events, EbmParams& params, Index seq_len,
                    std::span<const ad::Var> prompts) {
  if (events.empty()) throw EncodeError("encode_user: empty sequence");
  const ModelConfig& cfg = params.config;
  const SequenceWindow window = make_window(events, seq_len);
  ad::Var h = embed_sequence(t, window, params.tables);
  const std::vector<int>& kinds = window.behaviors;
  std::vector<int> with_prompts;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const bool inject = l < prompts.size() && prompts[l].valid() && prompts[l].rows() > 0;
    if (!inject) {
      h = ebm_layer_forward(t, h, kinds, params.layers[l], cfg);
      continue;
    }
    const Index c = prompts[l].rows();
    with_prompts.assign(static_cast<std::size_t>(c), kPromptToken);
    with_prompts.insert(with_prompts.end(), kinds.begin(), kinds.end());
    h = strip_prompts(ebm_layer_forward(t, inject_prompts(h, prompts[l]), with_prompts, params.layers[l], cfg), c);
  }
  if (cfg.pooling == Pooling::Last) return ad::slice_rows(h, h.rows() - 1, 1);
  Mat w = Mat::Zero(1, h.rows());
  const double inv = 1.0 / static_cast<double>(window.valid_count());
  for (Index i = 0; i < h.rows(); ++i)
    if (window.mask[static_cast<std::size_t>(i)]) w(0, i) = inv;
  return ad::matmul(t.constant(std::move(w)), h);
}

Mat encode_user(std::span<const Event> events, EbmParams& params, Index seq_len, std::span<const Mat> prompts) {
  ad::Tape t(ad::GradMode::None);
  std::vector<ad::Var> vars;
  for (const Mat& p : prompts) vars.push_back(t.constant(p));
  return encode_user(t, events, params, seq_len, vars).value();
}

std::int64_t efl_param_count(Index dim, int k) {
  if (k <= 0 || dim % k != 0) throw ShapeError("efl_param_count: k must divide d");
  const auto d = static_cast<std::int64_t>(dim);
  return d * d + 4 * d * d / k + 4 * d;
}

EflCensus efl_census(Index dim, int k, Index length) {
  (void)length;
  EflParams p("census", dim, k);
  EflCensus c;
  for (Param* w : {&p.w1_re, &p.w1_im, &p.w2_re, &p.w2_im}) c.weights += w->size();
  for (Param* b : {&p.b1_re, &p.b1_im, &p.b2_re, &p.b2_im}) c.biases += b->size();
  c.mixer_slice = static_cast<std::int64_t>(dim) * dim;
  return c;
}

Mat attention_reference(const Mat& x) {
  Mat s = x * x.transpose() / std::sqrt(static_cast<double>(x.cols()));
  for (Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
  return s * x;
}

}  // namespace mbp
