#include "mbp/checkpoint.hpp"
#include "mbp/pretrain.hpp"
#include "test_util.hpp"

#include <filesystem>

#include "doctest.h"

using namespace mbp;

namespace {

// 3 users over 12 items and 2 behaviors, 8 records each.
data::InteractionLog toy_log() {
  std::vector<data::InteractionRecord> recs;
  for (int u = 0; u < 3; ++u)
    for (int t = 0; t < 8; ++t) recs.push_back({u, (u * 4 + t) % 12, t, (t + u) % 2});
  return test::make_log(recs, 12, 2);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.dim = 8;
  c.layers = 1;
  c.k = 2;
  c.n_behaviors = 2;
  c.n_items = 12;
  c.max_len = 8;
  return c;
}

PretrainConfig tiny_pretrain() {
  PretrainConfig c;
  c.lr = 1e-2;
  c.batch = 64;
  c.max_epochs = 3;
  c.patience = 5;
  c.min_ctx = 1;
  c.seq_len = 8;
  c.valid_neg = 5;
  return c;
}

Mat row(std::initializer_list<double> v) {
  Mat m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_SUITE("pretrain") {
  TEST_CASE("loss closed forms") {
    const Mat z = Mat::Zero(1, 2);
    CHECK(pretrain_loss(z, row({1, 2}), row({3, 4}), row({5, 6}), row({7, 8})) ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
    // Unit margins on both terms: 2 softplus(-1).
    const Mat u = row({1, 0});
    CHECK(pretrain_loss(u, row({1, 0}), z, row({2, 5}), row({1, 5})) == doctest::Approx(0.626523).epsilon(1e-6));
    // A dominant item margin leaves only the behavior term.
    CHECK(pretrain_loss(u, row({60, 0}), z, z, z) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const double hi = pretrain_loss(u, row({1e4, 0}), z, row({1e4, 0}), z);
    const double lo = pretrain_loss(u, z, row({1e4, 0}), z, row({1e4, 0}));
    CHECK(std::isfinite(hi));
    CHECK(hi >= 0.0);
    CHECK(hi < 1e-12);
    CHECK(lo == doctest::Approx(2e4).epsilon(1e-12));

    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
      auto r = [&] { return test::random_mat(1, 4, rng, 3.0); };
      CHECK(pretrain_loss(r(), r(), r(), r(), r()) >= 0.0);
    }
  }

  TEST_CASE("differentiable loss agrees with the plain one") {
    Rng rng(2);
    std::vector<Mat> m;
    for (int i = 0; i < 5; ++i) m.push_back(test::random_mat(1, 4, rng));
    ad::Tape t(ad::GradMode::None);
    const double v = pretrain_loss(t.constant(m[0]), t.constant(m[1]), t.constant(m[2]), t.constant(m[3]),
                                   t.constant(m[4]))
                         .scalar();
    CHECK(v == doctest::Approx(pretrain_loss(m[0], m[1], m[2], m[3], m[4])).epsilon(1e-14));
  }

  TEST_CASE("negative items avoid the interacted set") {
    Rng rng(3);
    const std::vector<int> all_but_nine = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    for (int i = 0; i < 100; ++i) CHECK(sample_negative_item(all_but_nine, 10, rng) == 9);
    const std::vector<int> everything = {0, 1, 2};
    CHECK_THROWS_AS(sample_negative_item(everything, 3, rng), SamplingError);

    const std::vector<int> seen = {1, 4, 5, 9};
    std::vector<double> counts(20, 0.0);
    bool clean = true;
    for (int i = 0; i < 100000; ++i) {
      const int n = sample_negative_item(seen, 20, rng);
      clean = clean && !std::binary_search(seen.begin(), seen.end(), n) && n >= 0 && n < 20;
      counts[static_cast<std::size_t>(n)] += 1.0;
    }
    CHECK(clean);
    std::vector<double> eligible;
    for (int i = 0; i < 20; ++i)
      if (!std::binary_search(seen.begin(), seen.end(), i)) eligible.push_back(counts[static_cast<std::size_t>(i)]);
    CHECK(test::chi_square_uniform_p(eligible) > 0.001);
  }

  TEST_CASE("negative behaviors differ from the positive") {
    Rng rng(4);
    std::vector<double> counts(4, 0.0);
    for (int i = 0; i < 30000; ++i) {
      const int b = sample_negative_behavior(2, 4, rng);
      REQUIRE(b != 2);
      counts[static_cast<std::size_t>(b)] += 1.0;
    }
    const std::vector<double> others = {counts[0], counts[1], counts[3]};
    CHECK(test::chi_square_uniform_p(others) > 0.001);
    CHECK_THROWS_AS(sample_negative_behavior(0, 1, rng), SamplingError);
  }

  TEST_CASE("examples hold out the last record") {
    const data::InteractionLog log = toy_log();
    PretrainConfig cfg = tiny_pretrain();
    Rng rng(5);
    const auto ex = build_pretrain_examples(log, cfg, rng);
    CHECK(ex.size() == 3 * 6);
    for (const auto& e : ex) {
      CHECK(e.end >= 1);
      CHECK(e.end <= 6);
      CHECK(e.pos_item == log.user_records(e.user)[static_cast<std::size_t>(e.end)].item);
      CHECK(e.neg_behavior != e.pos_behavior);
    }
    cfg.final_only = true;
    CHECK(build_pretrain_examples(log, cfg, rng).size() == 3);
  }

  TEST_CASE("zero learning rate leaves parameters unchanged") {
    const data::InteractionLog log = toy_log();
    EbmParams model(tiny_model());
    Rng init(6);
    model.init(init);
    model.set_trainable(true);
    std::vector<Mat> before;
    for (Param* p : model.params()) before.push_back(p->value);
    Adam opt(model.params(), {.lr = 0.0});
    Rng rng(7);
    const auto ex = build_pretrain_examples(log, tiny_pretrain(), rng);
    pretrain_epoch(model, opt, log, ex, tiny_pretrain(), 1);
    const auto after = model.params();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i]->value == before[i]);
  }

  TEST_CASE("a tiny model overfits a fixed batch") {
    const data::InteractionLog log = toy_log();
    EbmParams model(tiny_model());
    Rng init(8);
    model.init(init);
    model.set_trainable(true);
    Adam opt(model.params(), {.lr = 1e-2});
    Rng rng(9);
    const PretrainConfig cfg = tiny_pretrain();
    const auto ex = build_pretrain_examples(log, cfg, rng);
    const double first = pretrain_epoch(model, opt, log, ex, cfg, 1);
    double loss = first;
    for (int step = 2; step <= 200; ++step) loss = pretrain_epoch(model, opt, log, ex, cfg, step);
    CHECK(first > 0.5);
    CHECK(loss < 0.1);
  }

  TEST_CASE("training is deterministic for a seed") {
    const data::InteractionLog log = toy_log();
    const PretrainResult a = run_pretraining(log, tiny_model(), tiny_pretrain(), 11);
    const PretrainResult b = run_pretraining(log, tiny_model(), tiny_pretrain(), 11);
    REQUIRE(a.curve.size() == b.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
      CHECK(a.curve[i].train_loss == b.curve[i].train_loss);
      CHECK(a.curve[i].valid_ndcg == b.curve[i].valid_ndcg);
    }
    EbmParams ma = a.checkpoint.model, mb = b.checkpoint.model;
    const auto pa = ma.params(), pb = mb.params();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
    CHECK(curve_csv(a.curve).rfind("epoch,train_loss,valid_ndcg\n", 0) == 0);
  }

  TEST_CASE("checkpoints round trip bit for bit") {
    const data::InteractionLog log = toy_log();
    PretrainResult r = run_pretraining(log, tiny_model(), tiny_pretrain(), 12, "abc123");
    test::TempDir dir;
    const auto path = dir.path / "model.ckpt";
    save_checkpoint(path, r.checkpoint);
    Checkpoint back = load_checkpoint(path, r.checkpoint.model.config, "abc123");
    const auto pa = r.checkpoint.model.params(), pb = back.model.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value == pb[i]->value);
    }
    REQUIRE(back.adam_m.size() == r.checkpoint.adam_m.size());
    for (std::size_t i = 0; i < back.adam_m.size(); ++i) {
      CHECK(back.adam_m[i] == r.checkpoint.adam_m[i]);
      CHECK(back.adam_v[i] == r.checkpoint.adam_v[i]);
    }
    CHECK(back.adam_steps == r.checkpoint.adam_steps);
    CHECK(back.epoch == r.checkpoint.epoch);
    CHECK(back.rng_state == r.checkpoint.rng_state);

    ModelConfig wider = r.checkpoint.model.config;
    wider.dim = 16;
    CHECK_THROWS_AS(load_checkpoint(path, wider, "abc123"), IncompatibleCheckpoint);
    CHECK_THROWS_AS(load_checkpoint(path, r.checkpoint.model.config, "other"), IncompatibleCheckpoint);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpoint);
    CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.ckpt"), CheckpointError);
  }

  TEST_CASE("flipped bytes fail the checksum") {
    const data::InteractionLog log = toy_log();
    PretrainResult r = run_pretraining(log, tiny_model(), tiny_pretrain(), 13);
    test::TempDir dir;
    const auto path = dir.path / "model.ckpt";
    save_checkpoint(path, r.checkpoint);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-40, std::ios::end);
    char c = 0;
    f.read(&c, 1);
    f.seekp(-40, std::ios::end);
    c = static_cast<char>(c ^ 0x5a);
    f.write(&c, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CorruptCheckpoint);
  }
}
