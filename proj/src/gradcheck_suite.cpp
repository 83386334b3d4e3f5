#include "mbp/gradcheck_suite.hpp"

#include "mbp/ebm.hpp"
#include "mbp/pretrain.hpp"
#include "mbp/prompt.hpp"
#include "mbp/tune.hpp"

#include <cstdio>
#include <functional>

namespace mbp {

namespace {

using ad::Tape;
using ad::Var;

Mat random_mat(Index r, Index c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

void randomize(std::span<Param* const> params, Rng& rng, double scale) {
  for (Param* p : params) p->value = random_mat(p->value.rows(), p->value.cols(), rng, scale);
}

// Builds value and gradient closures from a loss on a fresh tape.
GradCheckReport check(std::span<Param* const> params, const std::function<Var(Tape&)>& loss,
                      const GradSuiteConfig& cfg) {
  auto value = [&] {
    Tape tape(ad::GradMode::None);
    return loss(tape).scalar();
  };
  auto gradient = [&] {
    Tape tape(ad::GradMode::All);
    tape.backward(loss(tape));
  };
  return grad_check(params, value, gradient, cfg.step, cfg.threshold);
}

std::vector<Event> toy_events(int n, const GradSuiteConfig& cfg, Rng& rng) {
  std::vector<Event> ev;
  for (int i = 0; i < n; ++i)
    ev.push_back({static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.n_items))),
                  static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.n_behaviors)))});
  return ev;
}

std::vector<data::InteractionRecord> toy_history(const std::vector<Event>& events) {
  std::vector<data::InteractionRecord> recs;
  for (std::size_t i = 0; i < events.size(); ++i)
    recs.push_back({0, events[i].item, static_cast<std::int64_t>(i), events[i].behavior});
  return recs;
}

ModelConfig model_config(const GradSuiteConfig& cfg) {
  ModelConfig m;
  m.dim = cfg.dim;
  m.layers = cfg.layers;
  m.k = cfg.k;
  m.n_behaviors = cfg.n_behaviors;
  m.n_items = cfg.n_items;
  m.max_len = static_cast<int>(cfg.seq_len + cfg.n_tokens);
  return m;
}

std::vector<Param*> concat(std::vector<Param*> a, const std::vector<Param*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct PromptCase {
  PromptConfig config;
  TuneConfig tune;
  std::string name;
};

GradCheckReport check_tune_path(EbmParams& model, const PromptCase& pc, const GradSuiteConfig& cfg, Rng& rng) {
  PromptParams prompts(pc.config, cfg.dim, cfg.layers, cfg.n_behaviors, {3, 4});
  prompts.init(rng);
  // Zero projections would hide the gradients upstream of them.
  for (Param& p : prompts.pfg.projection) p.value = random_mat(p.value.rows(), p.value.cols(), rng, 0.3);
  for (Param& p : prompts.static_tokens) p.value = random_mat(p.value.rows(), p.value.cols(), rng, 0.3);
  prompts.gen.attr_b1.value = random_mat(1, prompts.gen.attr_b1.value.cols(), rng, 0.1);
  prompts.gen.gru_b.value = random_mat(1, prompts.gen.gru_b.value.cols(), rng, 0.1);
  prompts.stat_scale.setConstant(2.0);

  const std::vector<Event> events = toy_events(6, cfg, rng);
  const auto history = toy_history(events);
  const std::vector<int> attrs{1, -1};
  const UserProfile profile = build_profile(history, attrs, cfg.n_behaviors, 4);
  const int pos = 2, neg = 5;
  auto loss = [&](Tape& tape) {
    const GeneratedPrompts g = generate_prompts(tape, profile, prompts, model.tables, pc.tune.static_prompt,
                                                pc.tune.first_layer_only);
    const Var u = encode_user(tape, events, model, cfg.seq_len, g.tokens);
    const int pi[] = {pos}, ni[] = {neg};
    return tune_loss(u, ad::gather_rows(tape, model.tables.item, pi), ad::gather_rows(tape, model.tables.item, ni), g,
                     prompts.config.n_factors, pc.tune)
        .total;
  };
  const auto params = concat(prompts.params(pc.tune.static_prompt), model.params());
  return check(params, loss, cfg);
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const GradSuiteConfig& cfg) {
  std::vector<GradCheckCase> out;
  Rng rng = Rng::stream(cfg.seed, "gradcheck");
  const ModelConfig mcfg = model_config(cfg);
  EbmParams model(mcfg);
  model.init(rng);
  // Nonzero biases and gains exercise every branch of the layer.
  for (auto& layer : model.layers)
    for (Param* p : layer.params())
      if (p->value.rows() == 1) p->value += random_mat(1, p->value.cols(), rng, 0.1);

  {
    EflParams efl("efl", cfg.dim, cfg.k);
    efl.init(rng);
    randomize(std::vector<Param*>{&efl.b1_re, &efl.b1_im, &efl.b2_re, &efl.b2_im}, rng, 0.1);
    const Mat x = random_mat(cfg.seq_len, cfg.dim, rng);
    const Mat r = random_mat(cfg.seq_len, cfg.dim, rng);
    for (auto mode : {fft::Mode::Real, fft::Mode::Full}) {
      auto loss = [&](Tape& tape) {
        const Var y = ad_ops::efl(tape, tape.constant(x), efl, mode);
        return ad::sum(ad::mul(y, tape.constant(r)));
      };
      out.push_back({mode == fft::Mode::Real ? "efl_forward" : "efl_forward/full_fft", check(efl.params(), loss, cfg)});
    }
  }

  {
    const std::vector<Event> events = toy_events(5, cfg, rng);
    const Mat r = random_mat(1, cfg.dim, rng);
    for (auto pooling : {Pooling::Last, Pooling::Mean}) {
      model.config.pooling = pooling;
      auto loss = [&](Tape& tape) {
        return ad::sum(ad::mul(encode_user(tape, events, model, cfg.seq_len), tape.constant(r)));
      };
      out.push_back({pooling == Pooling::Last ? "encode_user" : "encode_user/mean_pool",
                     check(model.params(), loss, cfg)});
    }
    model.config.pooling = Pooling::Last;
  }

  {
    // Two users, one training position each.
    const std::vector<Event> a = toy_events(6, cfg, rng), b = toy_events(4, cfg, rng);
    auto loss = [&](Tape& tape) {
      std::vector<Var> terms;
      for (const auto* ev : {&a, &b}) {
        const std::span<const Event> ctx(ev->data(), ev->size() - 1);
        const Var u = encode_user(tape, ctx, model, cfg.seq_len);
        const Event& next = ev->back();
        const int pi[] = {next.item}, ni[] = {(next.item + 1) % cfg.n_items};
        const int pb[] = {next.behavior}, nb[] = {(next.behavior + 1) % cfg.n_behaviors};
        terms.push_back(pretrain_loss(u, ad::gather_rows(tape, model.tables.item, pi),
                                      ad::gather_rows(tape, model.tables.item, ni),
                                      ad::gather_rows(tape, model.tables.behavior, pb),
                                      ad::gather_rows(tape, model.tables.behavior, nb)));
      }
      return ad::add_n(terms);
    };
    out.push_back({"pretrain_loss", check(model.params(), loss, cfg)});
  }

  {
    const Index h = 5;
    Param x("x", random_mat(4, cfg.dim, rng));
    Param wx("gru.wx", random_mat(cfg.dim, 3 * h, rng, 0.5)), wh("gru.wh", random_mat(h, 3 * h, rng, 0.5)),
        b("gru.b", random_mat(1, 3 * h, rng, 0.1));
    const Mat r = random_mat(1, h, rng);
    auto loss = [&](Tape& tape) {
      return ad::sum(ad::mul(gru_last_hidden(tape, tape.leaf(x), wx, wh, b), tape.constant(r)));
    };
    out.push_back({"gru", check(std::vector<Param*>{&x, &wx, &wh, &b}, loss, cfg)});
  }

  {
    Param m("m", random_mat(3, cfg.dim, rng, 0.5));
    for (double eps2 : {0.5, 1.0, 5.0}) {
      auto loss = [&](Tape& tape) { return coding_rate(tape.leaf(m), 3.0, eps2); };
      char name[48];
      std::snprintf(name, sizeof name, "coding_rate/eps2=%g", eps2);
      out.push_back({name, check(std::vector<Param*>{&m}, loss, cfg)});
    }
  }

  PromptConfig base;
  base.n_factors = cfg.n_factors;
  base.n_tokens = cfg.n_tokens;
  base.hidden = 4;
  base.gru_len = 4;
  TuneConfig tcfg;
  tcfg.seq_len = cfg.seq_len;
  tcfg.lambda = 0.1;

  std::vector<PromptCase> cases;
  cases.push_back({base, tcfg, "tune_loss"});
  {
    PromptCase c{base, tcfg, "tune_loss/literal_shapes"};
    c.config.hidden = 0;
    c.config.gate = GateMode::Full;
    c.config.projection = ProjectionMode::Full;
    c.tune.sign = CompactnessSign::Literal;
    cases.push_back(c);
  }
  {
    PromptCase c{base, tcfg, "tune_loss/first_layer_only"};
    c.tune.first_layer_only = true;
    cases.push_back(c);
  }
  {
    PromptCase c{base, tcfg, "tune_loss/static_prompt"};
    c.tune.static_prompt = true;
    cases.push_back(c);
  }
  {
    PromptCase c{base, tcfg, "tune_loss/identity_filter"};
    c.tune.no_denoise = true;
    cases.push_back(c);
  }
  for (const auto& c : cases) {
    EbmParams m = model;
    m.config.identity_filter = c.tune.no_denoise;
    out.push_back({c.name, check_tune_path(m, c, cfg, rng)});
  }
  return out;
}

std::string gradcheck_table(const std::vector<GradCheckCase>& cases) {
  std::string out = "case\tparam\tcoords\tmax_rel_error\tworst_index\tpassed\n";
  char buf[256];
  for (const auto& c : cases)
    for (const auto& e : c.report.entries) {
      std::snprintf(buf, sizeof buf, "%s\t%s\t%lld\t%.3e\t%lld\t%s\n", c.name.c_str(), e.name.c_str(),
                    static_cast<long long>(e.coords), e.max_rel_error, static_cast<long long>(e.worst_index),
                    e.passed ? "yes" : "no");
      out += buf;
    }
  return out;
}

}  // namespace mbp
