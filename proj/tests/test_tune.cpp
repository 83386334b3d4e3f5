#include "mbp/gradcheck.hpp"
#include "mbp/tune.hpp"
#include "test_util.hpp"

#include "doctest.h"

using namespace mbp;

namespace {

// 3 users with `records` distinct items each, alternating behaviors; the
// second behavior is the target.
struct Toy {
  data::SplitSpec spec;
  data::UserAttributes attributes;
  EbmParams backbone;

  TuneContext context() const { return {&spec, &attributes, 1}; }
};

Toy make_toy(std::uint64_t seed = 1, Index dim = 8, int records = 20) {
  std::vector<data::InteractionRecord> recs;
  for (int u = 0; u < 3; ++u)
    for (int t = 0; t < records; ++t) recs.push_back({u, (u * 13 + t) % 40, t, t % 2});
  const data::InteractionLog log = test::make_log(recs, 40, 2);
  const data::TemporalSplit split = data::temporal_split(log, 0.5);
  Toy toy;
  toy.spec = data::make_split_spec(split.pretrain, split.finetune, 1);
  toy.attributes = data::empty_attributes(3, {3});
  toy.attributes.values = {{0}, {1}, {2}};
  ModelConfig mc;
  mc.dim = dim;
  mc.layers = 2;
  mc.k = 2;
  mc.n_behaviors = 2;
  mc.n_items = 40;
  mc.max_len = 16;
  toy.backbone = EbmParams(mc);
  Rng rng(seed);
  toy.backbone.init(rng);
  return toy;
}

TuneConfig toy_tune() {
  TuneConfig c;
  c.lr = 1e-2;
  c.batch = 16;
  c.max_epochs = 3;
  c.patience = 1000;
  c.seq_len = 16;
  c.valid_neg = 5;
  return c;
}

PromptConfig toy_prompts() {
  PromptConfig c;
  c.n_factors = 2;
  c.n_tokens = 2;
  c.hidden = 4;
  return c;
}

std::uint64_t backbone_hash(EbmParams& m) {
  const auto ps = m.params();
  return param_hash(ps);
}

}  // namespace

TEST_SUITE("tune") {
  TEST_CASE("prediction loss") {
    const Mat u = Mat::Constant(1, 3, 0.5), e = Mat::Constant(1, 3, 2.0);
    CHECK(tune_pred_loss(u, e, e) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    const Mat ep = Mat::Constant(1, 3, 1.0), en = Mat::Zero(1, 3);
    CHECK(tune_pred_loss(u, ep, en) == doctest::Approx(std::log1p(std::exp(-1.5))).epsilon(1e-14));
  }

  TEST_CASE("loss composition with the coding-rate term") {
    Toy toy = make_toy();
    const TuneContext ctx = toy.context();
    PromptParams prompts = make_prompt_params(toy.backbone, toy_prompts(), ctx, 2);
    const UserCase uc = make_user_case(ctx, 0, toy.spec.users[0].train, toy.spec.users[0].test, prompts);
    Rng rng(3);
    const Mat u = test::random_mat(1, 8, rng), ep = test::random_mat(1, 8, rng), en = test::random_mat(1, 8, rng);

    ad::Tape t(ad::GradMode::None);
    const GeneratedPrompts g = generate_prompts(t, uc.profile, prompts, toy.backbone.tables, false, false);
    TuneConfig cfg = toy_tune();
    auto total = [&](const TuneConfig& c) {
      return tune_loss(t.constant(u), t.constant(ep), t.constant(en), g, 2, c).total.scalar();
    };
    const double pred = tune_pred_loss(u, ep, en);
    cfg.lambda = 0.0;
    const double plain = total(cfg);
    CHECK(plain == doctest::Approx(pred).epsilon(1e-14));
    cfg.lambda = 0.01;
    cfg.no_compactness = true;
    CHECK(total(cfg) == plain);
    cfg.no_compactness = false;

    const double re = coding_rate(g.e.value(), 2.0, 1.0);
    const double rp = coding_rate(g.p.value(), static_cast<double>(g.p.rows()), 1.0);
    CHECK(total(cfg) == doctest::Approx(pred - 0.01 * (re + rp)).epsilon(1e-12));
    cfg.sign = CompactnessSign::Literal;
    CHECK(total(cfg) == doctest::Approx(pred + 0.01 * (re + rp)).epsilon(1e-12));
  }

  TEST_CASE("prompt gradients through the frozen backbone") {
    Toy toy = make_toy();
    const TuneContext ctx = toy.context();
    PromptParams prompts = make_prompt_params(toy.backbone, toy_prompts(), ctx, 4);
    TuneConfig cfg = toy_tune();
    configure_trainable(toy.backbone, prompts, cfg);
    Rng rng(5);
    for (auto& proj : prompts.pfg.projection) proj.value = test::random_mat(2, 8, rng, 0.3);
    const UserCase uc = make_user_case(ctx, 1, toy.spec.users[1].train, toy.spec.users[1].test, prompts);
    const int pi[] = {3}, ni[] = {30};
    auto loss = [&](ad::Tape& t) {
      const GeneratedPrompts g = generate_prompts(t, uc.profile, prompts, toy.backbone.tables, false, false);
      const ad::Var u = encode_user(t, uc.events, toy.backbone, cfg.seq_len, g.tokens);
      return tune_loss(u, ad::gather_rows(t, toy.backbone.tables.item, pi),
                       ad::gather_rows(t, toy.backbone.tables.item, ni), g, 2, cfg)
          .total;
    };
    std::vector<Param*> trainable;
    for (Param* p : active_params(toy.backbone, prompts, cfg))
      if (p->trainable) trainable.push_back(p);
    for (Param* p : trainable) p->zero_grad();
    {
      ad::Tape t(ad::GradMode::Trainable);
      t.backward(loss(t));
    }
    double norm = 0.0;
    for (Param* p : trainable) norm += p->grad.squaredNorm();
    CHECK(norm > 0.0);
    for (Param* p : toy.backbone.params()) CHECK(p->grad.isZero(0.0));

    const GradCheckReport r = grad_check(
        trainable,
        [&] {
          ad::Tape t(ad::GradMode::None);
          return loss(t).scalar();
        },
        [&] {
          ad::Tape t(ad::GradMode::Trainable);
          t.backward(loss(t));
        });
    CHECK(r.max_rel_error() < 1e-4);
  }

  TEST_CASE("the backbone stays bit-identical") {
    Toy toy = make_toy();
    const std::uint64_t before = backbone_hash(toy.backbone);
    TuneConfig cfg = toy_tune();
    cfg.max_epochs = 100;
    cfg.batch = 1000;  // one optimizer step per epoch
    TuneResult r = run_tuning(toy.backbone, toy.context(), toy_prompts(), cfg, 6);
    CHECK(r.curve.size() == 101);
    CHECK(backbone_hash(r.model) == before);
    CHECK(backbone_hash(toy.backbone) == before);
  }

  TEST_CASE("zero projections give zero tokens and zero steps change nothing") {
    Toy toy = make_toy();
    const TuneContext ctx = toy.context();
    TuneConfig cfg = toy_tune();
    cfg.max_epochs = 0;
    TuneResult r = run_tuning(toy.backbone, ctx, toy_prompts(), cfg, 7);
    PromptParams fresh = make_prompt_params(toy.backbone, toy_prompts(), ctx, 7);
    const auto a = r.prompts.all_params(), b = fresh.all_params();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
    for (int u = 0; u < 3; ++u) {
      const PromptExport ex = export_user_prompts(r.model, r.prompts, ctx, u, cfg);
      for (const Mat& tok : ex.tokens) CHECK(tok.isZero(0.0));
    }
  }

  TEST_CASE("a tiny prompt model memorizes three users") {
    // One train positive per user. The frozen final layer norm bounds |u|, so
    // the margins need a few more dimensions than the other toys.
    Toy toy = make_toy(8, 16, 12);
    TuneConfig cfg = toy_tune();
    cfg.max_epochs = 500;
    cfg.lr = 1e-2;
    cfg.lambda = 0.0;
    PromptConfig pc = toy_prompts();
    pc.hidden = 8;
    pc.n_tokens = 4;
    Rng rng(1);
    REQUIRE(build_tune_examples(toy.context(), cfg, rng).size() == 3);
    const TuneResult r = run_tuning(toy.backbone, toy.context(), pc, cfg, 9);
    CHECK(r.final_train_pred < 0.1);
  }

  TEST_CASE("budget") {
    Toy toy = make_toy();
    PromptParams prompts = make_prompt_params(toy.backbone, toy_prompts(), toy.context(), 10);
    const TuneConfig cfg = toy_tune();
    const ParamBudget b = param_budget(toy.backbone, prompts, cfg);
    CHECK(b.trainable > 0);
    CHECK(b.ratio == static_cast<double>(b.trainable) / static_cast<double>(b.total));

    std::vector<Param*> all = active_params(toy.backbone, prompts, cfg);
    for (Param* p : all) p->trainable = false;
    CHECK(param_budget(all).ratio == 0.0);
    for (Param* p : all) p->trainable = true;
    CHECK(param_budget(all).ratio == 1.0);

    TuneConfig full = cfg;
    full.full_finetune = true;
    CHECK(param_budget(toy.backbone, prompts, full).ratio == 1.0);
  }

  TEST_CASE("ablations reduce the budget to a closed form") {
    Toy toy = make_toy();
    PromptParams prompts = make_prompt_params(toy.backbone, toy_prompts(), toy.context(), 11);
    TuneConfig cfg = toy_tune();
    cfg.no_denoise = cfg.static_prompt = cfg.first_layer_only = true;
    const ParamBudget b = param_budget(toy.backbone, prompts, cfg);
    const std::int64_t d = 8, items = 40, len = 16, behaviors = 2, layers = 2, ffn = 2 * d, c = 2;
    const std::int64_t per_layer = (behaviors + 1) * d * d + d + d * ffn + ffn + ffn * d + d + 4 * d;
    CHECK(b.trainable == c * d);
    CHECK(b.total == (items + len + behaviors) * d + layers * per_layer + c * d);
  }

  TEST_CASE("examples use target-behavior positives from the train list") {
    Toy toy = make_toy();
    const TuneContext ctx = toy.context();
    Rng rng(12);
    const auto ex = build_tune_examples(ctx, toy_tune(), rng);
    CHECK_FALSE(ex.empty());
    for (const auto& e : ex) {
      const auto recs = toy.spec.finetune.user_records(e.user);
      CHECK(recs[static_cast<std::size_t>(e.position)].behavior == 1);
      CHECK(recs[static_cast<std::size_t>(e.position)].item == e.pos_item);
      for (const auto& r : recs) CHECK_FALSE((r.behavior == 1 && r.item == e.neg_item));
      const auto& users = toy.spec.users;
      for (const auto& us : users)
        if (us.user == e.user) {
          CHECK(e.position != us.test);
          CHECK(e.position != us.valid);
        }
    }
  }

  TEST_CASE("mean pairwise cosine") {
    Mat same(3, 2);
    same << 1, 1, 2, 2, 3, 3;
    CHECK(mean_pairwise_cosine(same) == doctest::Approx(1.0));
    CHECK(mean_pairwise_cosine(Mat::Identity(3, 3)) == doctest::Approx(0.0));
  }
}
