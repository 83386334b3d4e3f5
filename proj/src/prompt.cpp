#include "mbp/prompt.hpp"

#include "mbp/gradcheck.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace mbp {

PromptParams::PromptParams(const PromptConfig& cfg, Index d, int n_layers, int behaviors, std::vector<int> vocab)
    : config(cfg), dim(d), layers(n_layers), n_behaviors(behaviors), attr_vocab(std::move(vocab)) {
  if (cfg.n_factors <= 0 || cfg.n_tokens < 0) throw ShapeError("prompt: n_factors must be positive, n_tokens >= 0");
  if (attr_vocab.empty()) config.use_attributes = false;
  if (config.info_count() == 0) throw ShapeError("prompt: at least one prompt-information source is required");
  const Index h = hidden();
  const Index n2 = 2 * cfg.n_factors;
  const Index c = cfg.n_tokens;
  const auto fields = static_cast<Index>(attr_vocab.size());
  for (std::size_t i = 0; i < attr_vocab.size(); ++i)
    gen.attr_tables.emplace_back("prompt.attr_table" + std::to_string(i), attr_vocab[i] + 1, h);
  gen.attr_w1 = Param("prompt.attr_w1", fields * h, fields > 0 ? h : 0);
  gen.attr_b1 = Param("prompt.attr_b1", 1, fields > 0 ? h : 0);
  gen.attr_w2 = Param("prompt.attr_w2", fields > 0 ? h : 0, fields > 0 ? d : 0);
  gen.attr_b2 = Param("prompt.attr_b2", 1, fields > 0 ? d : 0);
  const auto s = static_cast<Index>(data::UserStatistics::vector_size(behaviors));
  gen.stat_w1 = Param("prompt.stat_w1", s, h);
  gen.stat_b1 = Param("prompt.stat_b1", 1, h);
  gen.stat_w2 = Param("prompt.stat_w2", h, d);
  gen.stat_b2 = Param("prompt.stat_b2", 1, d);
  gen.gru_wx = Param("prompt.gru_wx", d, 3 * h);
  gen.gru_wh = Param("prompt.gru_wh", h, 3 * h);
  gen.gru_b = Param("prompt.gru_b", 1, 3 * h);
  gen.gru_lift_w = Param("prompt.gru_lift_w", h, d);
  gen.gru_lift_b = Param("prompt.gru_lift_b", 1, d);
  pfg.factor_w = Param("prompt.factor_w", (n_layers + 1) * cfg.n_factors, d);
  if (cfg.gate == GateMode::Factor) {
    pfg.gate_w = Param("prompt.gate_w", n_layers, d);
    pfg.gate_b = Param("prompt.gate_b", n_layers, n2);
  } else {
    for (int l = 0; l < n_layers; ++l) pfg.gate_full.emplace_back("prompt.gate" + std::to_string(l), n2, n2 * d);
  }
  for (int l = 0; l < n_layers; ++l) {
    const std::string name = "prompt.projection" + std::to_string(l);
    if (cfg.projection == ProjectionMode::Diagonal)
      pfg.projection.emplace_back(name, c, d);
    else
      pfg.projection.emplace_back(name, c * d, d);
    static_tokens.emplace_back("prompt.static" + std::to_string(l), c, d);
  }
  stat_mean = Mat::Zero(1, s);
  stat_scale = Mat::Ones(1, s);
}

void PromptParams::init(Rng& rng) {
  const Index h = hidden();
  for (Param& t : gen.attr_tables) xavier_uniform(t, t.value.rows(), h, rng);
  xavier_uniform(gen.attr_w1, gen.attr_w1.value.rows(), gen.attr_w1.value.cols(), rng);
  xavier_uniform(gen.attr_w2, gen.attr_w2.value.rows(), gen.attr_w2.value.cols(), rng);
  xavier_uniform(gen.stat_w1, gen.stat_w1.value.rows(), gen.stat_w1.value.cols(), rng);
  xavier_uniform(gen.stat_w2, gen.stat_w2.value.rows(), gen.stat_w2.value.cols(), rng);
  xavier_uniform(gen.gru_wx, dim, h, rng);
  xavier_uniform(gen.gru_wh, h, h, rng);
  xavier_uniform(gen.gru_lift_w, h, dim, rng);
  xavier_uniform(pfg.factor_w, dim, pfg.factor_w.value.rows(), rng);
  if (config.gate == GateMode::Factor) xavier_uniform(pfg.gate_w, dim, 2 * config.n_factors, rng);
  for (Param& g : pfg.gate_full) xavier_uniform(g, g.value.cols(), g.value.rows(), rng);
  for (Param* b : {&gen.attr_b1, &gen.attr_b2, &gen.stat_b1, &gen.stat_b2, &gen.gru_b, &gen.gru_lift_b, &pfg.gate_b})
    b->value.setZero();
  for (Param& p : pfg.projection) p.value.setZero();
  for (Param& p : static_tokens) p.value.setZero();
}

std::vector<Param*> PromptParams::params(bool static_prompt) {
  std::vector<Param*> out;
  if (static_prompt) {
    for (Param& p : static_tokens) out.push_back(&p);
    return out;
  }
  if (config.use_attributes) {
    for (Param& t : gen.attr_tables) out.push_back(&t);
    for (Param* p : {&gen.attr_w1, &gen.attr_b1, &gen.attr_w2, &gen.attr_b2}) out.push_back(p);
  }
  if (config.use_statistics)
    for (Param* p : {&gen.stat_w1, &gen.stat_b1, &gen.stat_w2, &gen.stat_b2}) out.push_back(p);
  if (config.use_behaviors)
    for (Param* p : {&gen.gru_wx, &gen.gru_wh, &gen.gru_b, &gen.gru_lift_w, &gen.gru_lift_b}) out.push_back(p);
  out.push_back(&pfg.factor_w);
  if (config.gate == GateMode::Factor) {
    out.push_back(&pfg.gate_w);
    out.push_back(&pfg.gate_b);
  }
  for (Param& g : pfg.gate_full) out.push_back(&g);
  for (Param& p : pfg.projection) out.push_back(&p);
  return out;
}

std::vector<Param*> PromptParams::all_params() {
  std::vector<Param*> out;
  for (Param& t : gen.attr_tables) out.push_back(&t);
  for (Param* p : {&gen.attr_w1, &gen.attr_b1, &gen.attr_w2, &gen.attr_b2, &gen.stat_w1, &gen.stat_b1, &gen.stat_w2,
                   &gen.stat_b2, &gen.gru_wx, &gen.gru_wh, &gen.gru_b, &gen.gru_lift_w, &gen.gru_lift_b,
                   &pfg.factor_w})
    out.push_back(p);
  if (config.gate == GateMode::Factor) {
    out.push_back(&pfg.gate_w);
    out.push_back(&pfg.gate_b);
  }
  for (Param& g : pfg.gate_full) out.push_back(&g);
  for (Param& p : pfg.projection) out.push_back(&p);
  for (Param& p : static_tokens) out.push_back(&p);
  return out;
}

UserProfile build_profile(std::span<const data::InteractionRecord> history, std::span<const int> attributes,
                          int n_behaviors, int gru_len) {
  UserProfile prof;
  prof.attributes.assign(attributes.begin(), attributes.end());
  prof.stats = data::compute_user_statistics(history, n_behaviors);
  prof.behavior_items.resize(static_cast<std::size_t>(n_behaviors));
  for (const auto& r : history) prof.behavior_items[static_cast<std::size_t>(r.behavior)].push_back(r.item);
  for (auto& items : prof.behavior_items)
    if (gru_len > 0 && static_cast<int>(items.size()) > gru_len)
      items.erase(items.begin(), items.end() - gru_len);
  return prof;
}

void fit_standardizer(std::span<const std::vector<double>> stats, Mat& mean, Mat& scale) {
  if (stats.empty()) return;
  const auto s = static_cast<Index>(stats.front().size());
  mean = Mat::Zero(1, s);
  scale = Mat::Zero(1, s);
  for (const auto& v : stats)
    for (Index j = 0; j < s; ++j) mean(0, j) += v[static_cast<std::size_t>(j)];
  mean /= static_cast<double>(stats.size());
  for (const auto& v : stats)
    for (Index j = 0; j < s; ++j) {
      const double dv = v[static_cast<std::size_t>(j)] - mean(0, j);
      scale(0, j) += dv * dv;
    }
  for (Index j = 0; j < s; ++j) scale(0, j) = std::max(1.0, std::sqrt(scale(0, j) / static_cast<double>(stats.size())));
}

namespace {

ad::Var mlp2(ad::Tape& t, ad::Var x, Param& w1, Param& b1, Param& w2, Param& b2) {
  const ad::Var h = ad::gelu(ad::add_row(ad::matmul(x, t.leaf(w1)), t.leaf(b1)));
  return ad::add_row(ad::matmul(h, t.leaf(w2)), t.leaf(b2));
}

}  // namespace

ad::Var gen_attr_prompt(ad::Tape& t, std::span<const int> attributes, PromptParams& p) {
  auto& tables = p.gen.attr_tables;
  if (attributes.size() != tables.size())
    throw BoundsError("attribute prompt: expected " + std::to_string(tables.size()) + " fields, got " +
                      std::to_string(attributes.size()));
  std::vector<ad::Var> parts;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const int vocab = p.attr_vocab[i];
    int idx = attributes[i];
    if (idx >= vocab || idx < -1)
      throw BoundsError("attribute table " + std::to_string(i) + ": id " + std::to_string(idx) + " outside vocab " +
                        std::to_string(vocab));
    if (idx < 0) idx = vocab;
    const int row[] = {idx};
    parts.push_back(ad::gather_rows(t, tables[i], row));
  }
  return mlp2(t, ad::concat_cols(parts), p.gen.attr_w1, p.gen.attr_b1, p.gen.attr_w2, p.gen.attr_b2);
}

ad::Var gen_statis_prompt(ad::Tape& t, const data::UserStatistics& stats, PromptParams& p) {
  const std::vector<double> v = stats.to_vector();
  if (static_cast<Index>(v.size()) != p.stat_mean.cols())
    throw ShapeError("statistics prompt: vector size does not match the behavior count");
  Mat z(1, p.stat_mean.cols());
  for (Index j = 0; j < z.cols(); ++j) z(0, j) = (v[static_cast<std::size_t>(j)] - p.stat_mean(0, j)) / p.stat_scale(0, j);
  return mlp2(t, t.constant(std::move(z)), p.gen.stat_w1, p.gen.stat_b1, p.gen.stat_w2, p.gen.stat_b2);
}

namespace {

struct GruTrace {
  Mat h;  // (T + 1) x h, row 0 is the initial state
  Mat z, r, n;
};

GruTrace gru_run(const Mat& x, const Mat& wx, const Mat& wh, const Mat& b) {
  const Index steps = x.rows(), hd = wh.rows();
  GruTrace tr;
  tr.h = Mat::Zero(steps + 1, hd);
  tr.z.resize(steps, hd);
  tr.r.resize(steps, hd);
  tr.n.resize(steps, hd);
  const Mat xw = (x * wx).rowwise() + b.row(0);
  for (Index s = 0; s < steps; ++s) {
    const auto hp = tr.h.row(s);
    const Eigen::RowVectorXd hu = hp * wh.leftCols(2 * hd);
    for (Index j = 0; j < hd; ++j) {
      tr.z(s, j) = ad::sigmoid_value(xw(s, j) + hu(j));
      tr.r(s, j) = ad::sigmoid_value(xw(s, hd + j) + hu(hd + j));
    }
    const Eigen::RowVectorXd rh = tr.r.row(s).cwiseProduct(hp);
    const Eigen::RowVectorXd cand = xw.row(s).segment(2 * hd, hd) + rh * wh.rightCols(hd);
    tr.n.row(s) = cand.array().tanh().matrix();
    tr.h.row(s + 1) = (1.0 - tr.z.row(s).array()) * hp.array() + tr.z.row(s).array() * tr.n.row(s).array();
  }
  return tr;
}

}  // namespace

Mat gru_last_hidden(const Mat& x, const Mat& wx, const Mat& wh, const Mat& b) {
  const GruTrace tr = gru_run(x, wx, wh, b);
  return tr.h.bottomRows(1);
}

ad::Var gru_last_hidden(ad::Tape& t, ad::Var x, Param& wx, Param& wh, Param& b) {
  if (x.cols() != wx.value.rows()) throw ShapeError("gru: input width does not match weights");
  const int ix = x.id(), iwx = t.leaf(wx).id(), iwh = t.leaf(wh).id(), ib = t.leaf(b).id();
  GruTrace tr = gru_run(x.value(), wx.value, wh.value, b.value);
  Mat out = tr.h.bottomRows(1);
  return t.push(std::move(out), {ix, iwx, iwh, ib}, [ix, iwx, iwh, ib, tr = std::move(tr)](ad::Tape& t, int self) {
    const Mat& xv = t.value(ix);
    const Mat& wxv = t.value(iwx);
    const Mat& whv = t.value(iwh);
    const Index steps = xv.rows(), hd = whv.rows();
    Eigen::RowVectorXd dh = t.grad(self).row(0);
    Eigen::RowVectorXd da(3 * hd);
    const bool gx = t.needs_grad(ix), gwx = t.needs_grad(iwx), gwh = t.needs_grad(iwh), gb = t.needs_grad(ib);
    for (Index s = steps - 1; s >= 0; --s) {
      const Eigen::RowVectorXd hp = tr.h.row(s);
      const auto z = tr.z.row(s).array();
      const auto r = tr.r.row(s).array();
      const auto n = tr.n.row(s).array();
      const Eigen::ArrayXXd dn = dh.array() * z;
      const Eigen::ArrayXXd dz = dh.array() * (n - hp.array());
      Eigen::RowVectorXd dh_prev = (dh.array() * (1.0 - z)).matrix();
      const Eigen::RowVectorXd dan = (dn * (1.0 - n.square())).matrix();
      const Eigen::RowVectorXd daz = (dz * z * (1.0 - z)).matrix();
      const Eigen::RowVectorXd drh = dan * whv.rightCols(hd).transpose();
      const Eigen::RowVectorXd dar = (drh.array() * hp.array() * r * (1.0 - r)).matrix();
      dh_prev.array() += drh.array() * r;
      da << daz, dar, dan;
      dh_prev.noalias() += daz * whv.leftCols(hd).transpose();
      dh_prev.noalias() += dar * whv.middleCols(hd, hd).transpose();
      if (gwx) t.grad_ref(iwx).noalias() += xv.row(s).transpose() * da;
      if (gb) t.grad_ref(ib).row(0) += da;
      if (gwh) {
        Mat& g = t.grad_ref(iwh);
        g.leftCols(2 * hd).noalias() += hp.transpose() * da.head(2 * hd);
        const Eigen::RowVectorXd rh = (r * hp.array()).matrix();
        g.rightCols(hd).noalias() += rh.transpose() * dan;
      }
      if (gx) t.grad_ref(ix).row(s).noalias() += da * wxv.transpose();
      dh = dh_prev;
    }
  });
}

ad::Var gen_behavior_prompt(ad::Tape& t, std::span<const std::vector<int>> behavior_items, PromptParams& p,
                            EmbeddingTables& tables, bool* flagged) {
  std::vector<ad::Var> finals;
  std::vector<int> behaviors;
  for (std::size_t b = 0; b < behavior_items.size(); ++b) {
    const auto& items = behavior_items[b];
    if (items.empty()) continue;
    behaviors.assign(items.size(), static_cast<int>(b));
    const ad::Var x = ad::add(ad::gather_rows(t, tables.item, items), ad::gather_rows(t, tables.behavior, behaviors));
    finals.push_back(gru_last_hidden(t, x, p.gen.gru_wx, p.gen.gru_wh, p.gen.gru_b));
  }
  if (flagged) *flagged = finals.empty();
  if (finals.empty()) return t.constant(Mat::Zero(1, p.dim));
  const ad::Var pooled = ad::scale(ad::add_n(finals), 1.0 / static_cast<double>(finals.size()));
  return ad::add_row(ad::matmul(pooled, t.leaf(p.gen.gru_lift_w)), t.leaf(p.gen.gru_lift_b));
}

ad::Var pfg_factors(ad::Tape& t, ad::Var q, Param& factor_w) {
  const ad::Var scores = ad::matmul_nt(q, t.leaf(factor_w));  // M x G
  const ad::Var attn = ad::softmax_rows(ad::transpose(scores));  // G x M
  return ad::matmul(attn, q);
}

LayerPrompt pfg_prompt(ad::Tape& t, int layer, ad::Var e, PromptParams& p) {
  const Index n = p.config.n_factors;
  const Index shared = static_cast<Index>(p.layers) * n;
  const ad::Var parts[] = {ad::slice_rows(e, layer * n, n), ad::slice_rows(e, shared, n)};
  const ad::Var phi = ad::concat_rows(parts);  // 2N x d
  ad::Var scores;
  if (p.config.gate == GateMode::Factor) {
    const ad::Var w = ad::slice_rows(t.leaf(p.pfg.gate_w), layer, 1);
    scores = ad::add(ad::matmul_nt(w, phi), ad::slice_rows(t.leaf(p.pfg.gate_b), layer, 1));
  } else {
    const ad::Var flat = ad::reshape(phi, 1, 2 * n * p.dim);
    scores = ad::matmul_nt(flat, t.leaf(p.pfg.gate_full[static_cast<std::size_t>(layer)]));
  }
  LayerPrompt out;
  out.beta = ad::softmax_rows(scores);
  out.p = ad::matmul(out.beta, phi);
  Param& proj = p.pfg.projection[static_cast<std::size_t>(layer)];
  const Index c = p.config.n_tokens;
  if (p.config.projection == ProjectionMode::Diagonal)
    out.tokens = ad::mul(ad::broadcast_rows(out.p, c), t.leaf(proj));
  else
    out.tokens = ad::reshape(ad::matmul_nt(out.p, t.leaf(proj)), c, p.dim);
  return out;
}

namespace {

// Returns the value and c K^{-1} M.
double coding_rate_impl(const Mat& m, double denom, double eps2, Mat* grad) {
  if (!(eps2 > 0.0) || !(denom > 0.0)) throw std::invalid_argument("coding_rate: denom and eps2 must be positive");
  if (!m.allFinite()) throw NumericError("coding_rate: non-finite input matrix");
  const double c = static_cast<double>(m.cols()) / (denom * eps2);
  Mat k = Mat::Identity(m.rows(), m.rows());
  k.noalias() += c * m * m.transpose();
  const Eigen::LLT<Mat> llt(k);
  if (llt.info() != Eigen::Success) throw NumericError("coding_rate: Cholesky factorization failed");
  const Mat& l = llt.matrixLLT();
  double r = 0.0;
  for (Index i = 0; i < l.rows(); ++i) r += std::log(l(i, i));
  if (grad) *grad = c * llt.solve(m);
  return r;
}

}  // namespace

double coding_rate(const Mat& m, double denom, double eps2) { return coding_rate_impl(m, denom, eps2, nullptr); }

ad::Var coding_rate(ad::Var m, double denom, double eps2) {
  ad::Tape& t = *m.tape();
  Mat g;
  Mat out(1, 1);
  out(0, 0) = coding_rate_impl(m.value(), denom, eps2, &g);
  const int im = m.id();
  return t.push(std::move(out), {im}, [im, g = std::move(g)](ad::Tape& t, int self) {
    t.grad_ref(im) += t.grad(self)(0, 0) * g;
  });
}

ad::Var compactness_loss(ad::Var e, ad::Var p, int n_factors, const CompactnessWeights& w) {
  const ad::Var re = ad::scale(coding_rate(e, n_factors, w.eps_e2), w.lambda_e);
  const ad::Var rp = ad::scale(coding_rate(p, static_cast<double>(p.rows()), w.eps_p2), w.lambda_p);
  return ad::add(re, rp);
}

GeneratedPrompts generate_prompts(ad::Tape& t, const UserProfile& profile, PromptParams& p, EmbeddingTables& tables,
                                  bool static_prompt, bool first_layer_only) {
  GeneratedPrompts out;
  const int injected = first_layer_only ? std::min(1, p.layers) : p.layers;
  out.tokens.resize(static_cast<std::size_t>(p.layers));
  if (p.config.n_tokens == 0) return out;
  if (static_prompt) {
    for (int l = 0; l < injected; ++l) out.tokens[static_cast<std::size_t>(l)] = t.leaf(p.static_tokens[static_cast<std::size_t>(l)]);
    return out;
  }
  std::vector<ad::Var> info;
  if (p.config.use_attributes) info.push_back(gen_attr_prompt(t, profile.attributes, p));
  if (p.config.use_statistics) info.push_back(gen_statis_prompt(t, profile.stats, p));
  if (p.config.use_behaviors)
    info.push_back(gen_behavior_prompt(t, profile.behavior_items, p, tables, &out.behavior_flagged));
  out.q = ad::concat_rows(info);
  out.e = pfg_factors(t, out.q, p.pfg.factor_w);
  std::vector<ad::Var> rows;
  for (int l = 0; l < injected; ++l) {
    LayerPrompt lp = pfg_prompt(t, l, out.e, p);
    out.tokens[static_cast<std::size_t>(l)] = lp.tokens;
    rows.push_back(lp.p);
  }
  out.p = ad::concat_rows(rows);
  return out;
}

}  // namespace mbp
