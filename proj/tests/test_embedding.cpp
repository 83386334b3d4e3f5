#include "mbp/embedding.hpp"
#include "test_util.hpp"

#include "doctest.h"

using namespace mbp;

namespace {

EmbeddingTables random_tables(int n_items, int max_len, int n_behaviors, Index dim, std::uint64_t seed) {
  EmbeddingTables t(n_items, max_len, n_behaviors, dim);
  Rng rng(seed);
  t.init_xavier(rng);
  return t;
}

}  // namespace

TEST_SUITE("embedding") {
  TEST_CASE("zero tables give a zero matrix") {
    EmbeddingTables t(5, 8, 2, 3);
    const std::vector<Event> ev = {{1, 0}, {2, 1}};
    CHECK(embed_sequence(ev, t, 4).values.isZero(0.0));
  }

  TEST_CASE("rows are item + position + behavior") {
    EmbeddingTables t(3, 2, 2, 2);
    t.item.value.row(1) << 1, 0;
    t.position.value.row(1) << 0, 1;
    t.behavior.value.row(1) << 1, 1;
    const std::vector<Event> ev = {{1, 1}};
    const SequenceMatrix s = embed_sequence(ev, t, 2);
    CHECK(s.values(1, 0) == 2.0);
    CHECK(s.values(1, 1) == 2.0);
    CHECK(s.values.row(0).isZero(0.0));
    CHECK(s.mask == std::vector<std::uint8_t>{0, 1});
  }

  TEST_CASE("random tables match a gather oracle, plain and differentiable") {
    const EmbeddingTables t0 = random_tables(10, 8, 3, 4, 1);
    EmbeddingTables t = t0;
    const std::vector<Event> ev = {{3, 0}, {7, 2}, {0, 1}, {9, 0}, {3, 2}};
    const Index len = 8;
    const SequenceMatrix s = embed_sequence(ev, t, len);
    ad::Tape tape(ad::GradMode::None);
    const Mat v = embed_sequence(tape, make_window(ev, len), t).value();
    for (Index slot = 0; slot < len; ++slot) {
      const Index j = slot - (len - 5);
      Mat expected = Mat::Zero(1, 4);
      if (j >= 0) {
        const Event& e = ev[static_cast<std::size_t>(j)];
        expected = t0.item.value.row(e.item) + t0.position.value.row(slot) + t0.behavior.value.row(e.behavior);
      }
      CHECK(test::max_abs_diff(s.values.row(slot), expected) == 0.0);
      CHECK(test::max_abs_diff(v.row(slot), expected) == 0.0);
    }
  }

  TEST_CASE("window keeps the most recent events, left padded") {
    const std::vector<Event> ev = {{1, 0}, {2, 0}, {3, 1}};
    const SequenceWindow w = make_window(ev, 2);
    CHECK(w.items == std::vector<int>{2, 3});
    CHECK(w.valid_count() == 2);
    const SequenceWindow p = make_window(ev, 5);
    CHECK(p.items == std::vector<int>{-1, -1, 1, 2, 3});
    CHECK(p.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  }

  TEST_CASE("linear in each table") {
    EmbeddingTables t = random_tables(6, 5, 2, 3, 2);
    const std::vector<Event> ev = {{1, 0}, {4, 1}, {2, 1}};
    const Mat base = embed_sequence(ev, t, 5).values;
    EmbeddingTables zero_item = t;
    zero_item.item.value.setZero();
    const Mat rest = embed_sequence(ev, zero_item, 5).values;
    EmbeddingTables scaled = t;
    scaled.item.value *= 3.0;
    const Mat s = embed_sequence(ev, scaled, 5).values;
    CHECK(test::max_abs_diff(s - rest, 3.0 * (base - rest)) < 1e-14);
  }

  TEST_CASE("padding leaves item and behavior parts of valid rows unchanged") {
    // Positions follow the slot, so only the item and behavior parts are
    // compared across window lengths.
    EmbeddingTables t = random_tables(6, 10, 2, 3, 3);
    t.position.value.setZero();
    const std::vector<Event> ev = {{1, 0}, {4, 1}, {2, 1}};
    const Mat a = embed_sequence(ev, t, 3).values;
    const Mat b = embed_sequence(ev, t, 7).values;
    CHECK(test::max_abs_diff(b.bottomRows(3), a) == 0.0);
    CHECK(b.topRows(4).isZero(0.0));
  }

  TEST_CASE("out-of-range indices are bounds errors") {
    EmbeddingTables t(3, 4, 2, 2);
    const std::vector<Event> bad_item = {{3, 0}};
    const std::vector<Event> bad_behavior = {{0, 2}};
    CHECK_THROWS_AS(embed_sequence(bad_item, t, 2), BoundsError);
    CHECK_THROWS_AS(embed_sequence(bad_behavior, t, 2), BoundsError);
    CHECK_THROWS_AS(embed_sequence(std::vector<Event>{{0, 0}}, t, 5), BoundsError);
  }

  TEST_CASE("behavior views") {
    EmbeddingTables t = random_tables(6, 4, 2, 3, 4);
    const std::vector<Event> single = {{1, 1}, {2, 1}};
    const SequenceMatrix s = embed_sequence(single, t, 4);
    const auto v = behavior_views(s, 2);
    CHECK(v[1].values == s.values);
    CHECK(v[0].values.isZero(0.0));

    const std::vector<Event> alt = {{1, 0}, {2, 1}, {3, 0}, {4, 1}};
    const SequenceMatrix a = embed_sequence(alt, t, 4);
    const auto av = behavior_views(a, 2);
    CHECK(av[0].mask == std::vector<std::uint8_t>{1, 0, 1, 0});
    Mat sum = Mat::Zero(4, 3);
    for (const auto& view : av) sum += view.values;
    CHECK(test::max_abs_diff(sum, a.values) == 0.0);
  }

  TEST_CASE("xavier bounds") {
    Param p("w", 40, 60);
    Rng rng(1);
    xavier_uniform(p, 40, 60, rng);
    const double a = std::sqrt(6.0 / 100.0);
    CHECK(p.value.cwiseAbs().maxCoeff() <= a);
    CHECK(p.value.cwiseAbs().maxCoeff() > 0.9 * a);
  }
}
