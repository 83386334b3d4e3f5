#include "mbp/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mbp {

EmbeddingTables::EmbeddingTables(int n_items, int max_len, int n_behaviors, Index dim)
    : item("emb.item", n_items, dim), position("emb.position", max_len, dim), behavior("emb.behavior", n_behaviors, dim) {}

void EmbeddingTables::init_xavier(Rng& rng) {
  xavier_uniform(item, item.value.cols(), item.value.rows(), rng);
  xavier_uniform(position, position.value.cols(), position.value.rows(), rng);
  xavier_uniform(behavior, behavior.value.cols(), behavior.value.rows(), rng);
}

void xavier_uniform(Param& p, Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(std::max<Index>(1, fan_in + fan_out)));
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-a, a);
}

Index SequenceWindow::valid_count() const {
  return static_cast<Index>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

SequenceWindow make_window(std::span<const Event> events, Index length) {
  SequenceWindow w;
  const auto n = static_cast<Index>(events.size());
  const Index keep = std::min(n, length);
  const Index pad = length - keep;
  w.items.assign(static_cast<std::size_t>(length), -1);
  w.behaviors.assign(static_cast<std::size_t>(length), -1);
  w.positions.resize(static_cast<std::size_t>(length));
  w.mask.assign(static_cast<std::size_t>(length), 0);
  for (Index t = 0; t < length; ++t) w.positions[static_cast<std::size_t>(t)] = static_cast<int>(t);
  for (Index j = 0; j < keep; ++j) {
    const auto& e = events[static_cast<std::size_t>(n - keep + j)];
    const auto slot = static_cast<std::size_t>(pad + j);
    w.items[slot] = e.item;
    w.behaviors[slot] = e.behavior;
    w.mask[slot] = 1;
  }
  return w;
}

namespace {

void check_window(const SequenceWindow& w, const EmbeddingTables& tables) {
  if (w.length() > tables.max_len())
    throw BoundsError("position table: window length " + std::to_string(w.length()) + " exceeds " +
                      std::to_string(tables.max_len()));
  for (std::size_t t = 0; t < w.items.size(); ++t) {
    if (!w.mask[t]) continue;
    if (w.items[t] < 0 || w.items[t] >= tables.item.value.rows())
      throw BoundsError("item table: index " + std::to_string(w.items[t]) + " out of range");
    if (w.behaviors[t] < 0 || w.behaviors[t] >= tables.behavior.value.rows())
      throw BoundsError("behavior table: index " + std::to_string(w.behaviors[t]) + " out of range");
  }
}

}  // namespace

SequenceMatrix embed_sequence(std::span<const Event> events, const EmbeddingTables& tables, Index length) {
  const SequenceWindow w = make_window(events, length);
  check_window(w, tables);
  SequenceMatrix out{Mat::Zero(length, tables.dim()), w.mask, w.behaviors};
  for (Index t = 0; t < length; ++t) {
    const auto s = static_cast<std::size_t>(t);
    if (!w.mask[s]) continue;
    out.values.row(t) = tables.item.value.row(w.items[s]) + tables.position.value.row(w.positions[s]) +
                        tables.behavior.value.row(w.behaviors[s]);
  }
  return out;
}

ad::Var embed_sequence(ad::Tape& tape, const SequenceWindow& w, EmbeddingTables& tables) {
  check_window(w, tables);
  std::vector<int> pos(w.positions);
  for (std::size_t t = 0; t < pos.size(); ++t)
    if (!w.mask[t]) pos[t] = -1;
  const ad::Var parts[] = {ad::gather_rows(tape, tables.item, w.items), ad::gather_rows(tape, tables.position, pos),
                           ad::gather_rows(tape, tables.behavior, w.behaviors)};
  return ad::add_n(parts);
}

std::vector<std::uint8_t> behavior_mask(std::span<const int> behavior_ids, std::span<const std::uint8_t> mask,
                                        int behavior) {
  std::vector<std::uint8_t> m(mask.size(), 0);
  for (std::size_t t = 0; t < mask.size(); ++t) m[t] = mask[t] && behavior_ids[t] == behavior;
  return m;
}

std::vector<SequenceMatrix> behavior_views(const SequenceMatrix& seq, int n_behaviors) {
  std::vector<SequenceMatrix> views;
  for (int b = 0; b < n_behaviors; ++b) {
    SequenceMatrix v{seq.values, behavior_mask(seq.behavior_ids, seq.mask, b), seq.behavior_ids};
    for (Index t = 0; t < v.length(); ++t)
      if (!v.mask[static_cast<std::size_t>(t)]) v.values.row(t).setZero();
    views.push_back(std::move(v));
  }
  return views;
}

}  // namespace mbp
