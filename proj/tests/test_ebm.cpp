#include "mbp/ebm.hpp"
#include "test_util.hpp"

#include <complex>
#include <numbers>

#include "doctest.h"

using namespace mbp;
using cd = std::complex<double>;

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

void randomize(std::span<Param* const> ps, Rng& rng, double scale = 0.5) {
  for (Param* p : ps) p->value = test::random_mat(p->value.rows(), p->value.cols(), rng, scale);
}

using CMat = std::vector<std::vector<cd>>;  // bins x d

CMat naive_rfft(const Mat& s) {
  const Index len = s.rows(), bins = len / 2 + 1;
  CMat x(static_cast<std::size_t>(bins), std::vector<cd>(static_cast<std::size_t>(s.cols())));
  for (Index j = 0; j < bins; ++j)
    for (Index c = 0; c < s.cols(); ++c)
      for (Index t = 0; t < len; ++t)
        x[j][c] += s(t, c) * std::polar(1.0, -2.0 * std::numbers::pi * double(j * t) / double(len));
  return x;
}

Mat naive_irfft(const CMat& x, Index len) {
  const Index d = static_cast<Index>(x[0].size());
  Mat s = Mat::Zero(len, d);
  for (Index t = 0; t < len; ++t)
    for (Index c = 0; c < d; ++c) {
      double acc = x[0][c].real();
      for (Index j = 1; 2 * j < len; ++j)
        acc += 2.0 * (x[j][c] * std::polar(1.0, 2.0 * std::numbers::pi * double(j * t) / double(len))).real();
      if (len % 2 == 0) acc += x[len / 2][c].real() * std::cos(std::numbers::pi * double(t));
      s(t, c) = acc / double(len);
    }
  return s;
}

// One chunk at a time, complex scalars: y = W2 act(W1 x + b1) + b2 with the
// activation applied to real and imaginary parts separately.
CMat scalar_mlp(const CMat& x, const EflParams& p) {
  const Index d = p.dim(), m = p.chunk();
  auto w = [&](const Param& re, const Param& im, Index r, Index c) { return cd(re.value(r, c), im.value(r, c)); };
  CMat out = x;
  for (std::size_t j = 0; j < x.size(); ++j)
    for (Index n = 0; n < d / m; ++n) {
      std::vector<cd> a(static_cast<std::size_t>(m));
      for (Index r = 0; r < m; ++r) {
        cd h(p.b1_re.value(0, n * m + r), p.b1_im.value(0, n * m + r));
        for (Index c = 0; c < m; ++c) h += w(p.w1_re, p.w1_im, n * m + r, c) * x[j][n * m + c];
        a[r] = cd(gelu(h.real()), gelu(h.imag()));
      }
      for (Index r = 0; r < m; ++r) {
        cd y(p.b2_re.value(0, n * m + r), p.b2_im.value(0, n * m + r));
        for (Index c = 0; c < m; ++c) y += w(p.w2_re, p.w2_im, n * m + r, c) * a[c];
        out[j][n * m + r] = y;
      }
    }
  return out;
}

Mat oracle_efl(const Mat& s, const EflParams& p) { return naive_irfft(scalar_mlp(naive_rfft(s), p), s.rows()); }

Mat oracle_layer_norm(const Mat& x, const Mat& g, const Mat& b) {
  Mat y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    double var = 0.0;
    for (Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= double(x.cols());
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-12) * g(0, c) + b(0, c);
  }
  return y;
}

// Masking, per-view filters, mixer, add & norm, FFN, add & norm.
Mat oracle_layer(const Mat& hidden, std::span<const int> kinds, const EbmLayerParams& p, const ModelConfig& cfg) {
  const Index len = hidden.rows(), d = cfg.dim;
  Mat h = hidden;
  for (Index t = 0; t < len; ++t)
    if (kinds[t] == kPadToken) h.row(t).setZero();
  Mat concat(len, (cfg.n_behaviors + 1) * d);
  for (int b = 0; b <= cfg.n_behaviors; ++b) {
    Mat x = h;
    if (b < cfg.n_behaviors)
      for (Index t = 0; t < len; ++t)
        if (kinds[t] != b && kinds[t] != kPromptToken) x.row(t).setZero();
    Mat y = cfg.identity_filter ? x : oracle_efl(x, p.filters[b]);
    for (Index t = 0; t < len; ++t)
      if (kinds[t] == kPadToken) y.row(t).setZero();
    concat.middleCols(b * d, d) = y;
  }
  Mat mixed = concat * p.mixer_w.value;
  mixed.rowwise() += p.mixer_b.value.row(0);
  const Mat h1 = oracle_layer_norm(h + mixed, p.ln1_g.value, p.ln1_b.value);
  Mat inner = h1 * p.ffn_w1.value;
  inner.rowwise() += p.ffn_b1.value.row(0);
  inner = inner.unaryExpr([](double v) { return gelu(v); });
  Mat ffn = inner * p.ffn_w2.value;
  ffn.rowwise() += p.ffn_b2.value.row(0);
  Mat h2 = oracle_layer_norm(h1 + ffn, p.ln2_g.value, p.ln2_b.value);
  for (Index t = 0; t < len; ++t)
    if (kinds[t] == kPadToken) h2.row(t).setZero();
  return h2;
}

ModelConfig small_config(int n_behaviors = 2) {
  ModelConfig c;
  c.dim = 8;
  c.k = 2;
  c.layers = 2;
  c.n_behaviors = n_behaviors;
  c.n_items = 12;
  c.max_len = 16;
  return c;
}

EbmParams random_model(const ModelConfig& cfg, std::uint64_t seed) {
  EbmParams m(cfg);
  Rng rng(seed);
  m.init(rng);
  for (auto& l : m.layers) {
    std::vector<Param*> ps = l.params();
    randomize(ps, rng, 0.4);
  }
  return m;
}

}  // namespace

TEST_SUITE("ebm") {
  TEST_CASE("zero complex MLP") {
    EflParams p("f", 4, 2);
    const fft::ComplexSpectrum x{Mat::Zero(3, 4), Mat::Zero(3, 4), 4};
    const fft::ComplexSpectrum y = chunked_complex_mlp(x, p);
    CHECK(y.re.isZero(0.0));
    CHECK(y.im.isZero(0.0));
    CHECK(efl_forward(Mat::Zero(5, 4), p).isZero(0.0));
  }

  TEST_CASE("k=1 is a full-width complex MLP and k=2 matches the scalar oracle") {
    Rng rng(1);
    for (int k : {1, 2}) {
      EflParams p("f", 4, k);
      randomize(p.params(), rng);
      const Mat s = test::random_mat(6, 4, rng);
      const fft::ComplexSpectrum x = fft::rfft_cols(s);
      CMat cx(static_cast<std::size_t>(x.bins()), std::vector<cd>(4));
      for (Index j = 0; j < x.bins(); ++j)
        for (Index c = 0; c < 4; ++c) cx[j][c] = cd(x.re(j, c), x.im(j, c));
      const CMat oracle = scalar_mlp(cx, p);
      const fft::ComplexSpectrum y = chunked_complex_mlp(x, p);
      double err = 0.0;
      for (Index j = 0; j < x.bins(); ++j)
        for (Index c = 0; c < 4; ++c) err = std::max(err, std::abs(cd(y.re(j, c), y.im(j, c)) - oracle[j][c]));
      CHECK(err < 1e-12);
    }
  }

  TEST_CASE("constant-in-time input stays constant with zero biases") {
    Rng rng(2);
    EflParams p("f", 4, 2);
    for (Param* w : {&p.w1_re, &p.w1_im, &p.w2_re, &p.w2_im}) w->value = test::random_mat(w->value.rows(), w->value.cols(), rng);
    Mat s(6, 4);
    s.rowwise() = test::random_mat(1, 4, rng).row(0);
    const Mat y = efl_forward(s, p);
    for (Index t = 1; t < 6; ++t) CHECK(test::max_abs_diff(y.row(t), y.row(0)) < 1e-12);
  }

  TEST_CASE("filter layer equals the staged oracle") {
    Rng rng(3);
    for (Index len : {8, 7}) {
      EflParams p("f", 4, 2);
      randomize(p.params(), rng);
      const Mat s = test::random_mat(len, 4, rng);
      CHECK(test::max_abs_diff(efl_forward(s, p), oracle_efl(s, p)) < 1e-10);
    }
  }

  TEST_CASE("zero-weight layer reduces to two layer norms") {
    ModelConfig cfg = small_config();
    EbmLayerParams layer("l", cfg);
    Rng rng(4);
    const Mat h = test::random_mat(5, 8, rng);
    const std::vector<int> kinds = {0, 1, 1, 0, 0};
    const Mat ones = Mat::Ones(1, 8), zeros = Mat::Zero(1, 8);
    const Mat expected = oracle_layer_norm(oracle_layer_norm(h, ones, zeros), ones, zeros);
    CHECK(test::max_abs_diff(ebm_layer_forward(h, kinds, layer, cfg), expected) < 1e-12);
  }

  TEST_CASE("single behavior: the behavior view equals the overall sequence") {
    ModelConfig cfg = small_config(1);
    EbmLayerParams layer("l", cfg);
    Rng rng(5);
    layer.init(rng);
    layer.filters[1] = layer.filters[0];
    // With identical filters the two mixer blocks see identical inputs, so
    // swapping them leaves the output unchanged.
    const Mat h = test::random_mat(6, 8, rng);
    const std::vector<int> kinds = {kPadToken, 0, 0, 0, 0, 0};
    const Mat a = ebm_layer_forward(h, kinds, layer, cfg);
    EbmLayerParams swapped = layer;
    swapped.mixer_w.value.topRows(8) = layer.mixer_w.value.bottomRows(8);
    swapped.mixer_w.value.bottomRows(8) = layer.mixer_w.value.topRows(8);
    CHECK(test::max_abs_diff(ebm_layer_forward(h, kinds, swapped, cfg), a) < 1e-12);
  }

  TEST_CASE("layer equals the staged oracle") {
    for (bool identity : {false, true}) {
      ModelConfig cfg = small_config();
      cfg.identity_filter = identity;
      EbmParams m = random_model(cfg, 6);
      Rng rng(7);
      const Mat h = test::random_mat(7, 8, rng);
      const std::vector<int> kinds = {kPadToken, kPromptToken, 0, 1, 1, 0, 1};
      CHECK(test::max_abs_diff(ebm_layer_forward(h, kinds, m.layers[0], cfg), oracle_layer(h, kinds, m.layers[0], cfg)) <
            1e-10);
    }
  }

  TEST_CASE("one zero-weight layer: u is the twice-normalized last embedding") {
    ModelConfig cfg = small_config();
    cfg.layers = 1;
    EbmParams m(cfg);
    Rng rng(8);
    m.tables.init_xavier(rng);
    const std::vector<Event> ev = {{1, 0}, {5, 1}, {3, 0}};
    const SequenceMatrix s = embed_sequence(ev, m.tables, 6);
    const Mat ones = Mat::Ones(1, 8), zeros = Mat::Zero(1, 8);
    const Mat expected = oracle_layer_norm(oracle_layer_norm(s.values.bottomRows(1), ones, zeros), ones, zeros);
    CHECK(test::max_abs_diff(encode_user(ev, m, 6), expected) < 1e-12);
  }

  TEST_CASE("empty prompts are the no-prompt path, bit for bit") {
    EbmParams m = random_model(small_config(), 9);
    const std::vector<Event> ev = {{1, 0}, {5, 1}, {3, 0}, {2, 1}};
    const std::vector<Mat> empty = {Mat(0, 8), Mat(0, 8)};
    CHECK(encode_user(ev, m, 6, empty) == encode_user(ev, m, 6));
  }

  TEST_CASE("encode_user matches an oracle that materializes the prompt concat") {
    ModelConfig cfg = small_config();
    EbmParams m = random_model(cfg, 10);
    Rng rng(11);
    const std::vector<Mat> prompts = {test::random_mat(2, 8, rng), test::random_mat(2, 8, rng)};
    const std::vector<Event> ev = {{1, 0}, {5, 1}, {3, 0}, {2, 1}};
    const Index len = 6;
    const SequenceWindow w = make_window(ev, len);
    Mat h = embed_sequence(ev, m.tables, len).values;
    for (int l = 0; l < 2; ++l) {
      Mat full(2 + len, 8);
      full << prompts[l], h;
      std::vector<int> kinds = {kPromptToken, kPromptToken};
      kinds.insert(kinds.end(), w.behaviors.begin(), w.behaviors.end());
      h = oracle_layer(full, kinds, m.layers[l], cfg).bottomRows(len);
    }
    CHECK(test::max_abs_diff(encode_user(ev, m, len, prompts), h.bottomRows(1)) < 1e-10);
  }

  TEST_CASE("padded rows do not influence valid rows") {
    ModelConfig cfg = small_config();
    EbmParams m = random_model(cfg, 12);
    Rng rng(16);
    const Mat h = test::random_mat(6, 8, rng);
    const std::vector<int> kinds = {kPadToken, kPadToken, 0, 1, 0, 1};
    Mat noisy = h;
    noisy.topRows(2) = test::random_mat(2, 8, rng, 50.0);
    for (auto& layer : m.layers) CHECK(ebm_layer_forward(noisy, kinds, layer, cfg) == ebm_layer_forward(h, kinds, layer, cfg));

    const std::vector<Event> ev = {{1, 0}, {5, 1}, {3, 0}};
    std::vector<Event> longer = {{7, 1}, {8, 0}, {9, 1}};
    longer.insert(longer.end(), ev.begin(), ev.end());
    CHECK(encode_user(longer, m, 3) == encode_user(ev, m, 3));
  }

  TEST_CASE("inject and strip") {
    ad::Tape t(ad::GradMode::None);
    Rng rng(13);
    const ad::Var h = t.constant(test::random_mat(3, 4, rng));
    const ad::Var tok = t.constant(test::random_mat(2, 4, rng));
    CHECK(inject_prompts(h, t.constant(Mat(0, 4))).value() == h.value());
    const ad::Var joined = inject_prompts(h, tok);
    CHECK(joined.value().topRows(2) == tok.value());
    CHECK(joined.value().bottomRows(3) == h.value());
    CHECK(strip_prompts(joined, 2).value() == h.value());
  }

  TEST_CASE("census closed form and length independence") {
    CHECK(efl_param_count(64, 4) == 8448);
    CHECK(efl_param_count(64, 64) == 4608);
    CHECK(efl_census(64, 4).total() == 8448);
    CHECK(efl_census(64, 64).total() == 4608);
    for (Index len : {16, 64, 256}) CHECK(efl_census(32, 4, len).total() == efl_census(32, 4, 16).total());
    for (int k : {1, 2, 4, 8}) CHECK(efl_census(64, 2 * k).total() < efl_census(64, k).total());
    const double ratio =
        double(efl_census(256, 8).weights) / double(efl_census(256, 4).weights);
    CHECK(ratio >= 0.5);
    CHECK(ratio <= 0.6);
    const double total_ratio = double(efl_census(256, 8).filter()) / double(efl_census(256, 4).filter());
    CHECK(total_ratio >= 0.5);
    CHECK(total_ratio <= 0.6);
  }

  TEST_CASE("mixer input width and shape validation") {
    ModelConfig cfg = small_config(3);
    EbmLayerParams l("l", cfg);
    CHECK(l.mixer_w.value.rows() == 4 * 8);
    CHECK(l.filters.size() == 4);
    ModelConfig bad = cfg;
    bad.k = 3;
    CHECK_THROWS_AS(EbmParams{bad}, ShapeError);
    EbmParams m(cfg);
    CHECK_THROWS_AS(encode_user(std::vector<Event>{}, m, 4), EncodeError);
  }

  TEST_CASE("mean pooling averages valid rows") {
    ModelConfig cfg = small_config();
    cfg.pooling = Pooling::Mean;
    EbmParams m = random_model(cfg, 14);
    const std::vector<Event> ev = {{1, 0}, {5, 1}, {3, 0}};
    ad::Tape t(ad::GradMode::None);
    const Mat u = encode_user(ev, m, 6);
    CHECK(u.rows() == 1);
    CHECK(u.allFinite());
  }

  TEST_CASE("attention reference rows are convex combinations") {
    Rng rng(15);
    const Mat x = test::random_mat(5, 3, rng);
    const Mat y = attention_reference(x);
    for (Index c = 0; c < 3; ++c) {
      CHECK(y.col(c).maxCoeff() <= x.col(c).maxCoeff() + 1e-12);
      CHECK(y.col(c).minCoeff() >= x.col(c).minCoeff() - 1e-12);
    }
  }
}
