// Behavior-aware sequence embedding: item + position + behavior rows.
#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/rng.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace mbp {

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct Event {
  int item = 0;
  int behavior = 0;
};

struct EmbeddingTables {
  Param item;
  Param position;
  Param behavior;

  EmbeddingTables() = default;
  EmbeddingTables(int n_items, int max_len, int n_behaviors, Index dim);

  Index dim() const { return item.value.cols(); }
  int max_len() const { return static_cast<int>(position.value.rows()); }
  void init_xavier(Rng& rng);
  std::vector<Param*> params() { return {&item, &position, &behavior}; }
};

// Fixed-length window of the most recent events, left-padded. Slot t uses
// position t; padded slots have item = behavior = -1 and mask 0.
struct SequenceWindow {
  std::vector<int> items;
  std::vector<int> behaviors;
  std::vector<int> positions;
  std::vector<std::uint8_t> mask;

  Index length() const { return static_cast<Index>(items.size()); }
  Index valid_count() const;
};

SequenceWindow make_window(std::span<const Event> events, Index length);

struct SequenceMatrix {
  Mat values;
  std::vector<std::uint8_t> mask;
  std::vector<int> behavior_ids;

  Index length() const { return values.rows(); }
};

SequenceMatrix embed_sequence(std::span<const Event> events, const EmbeddingTables& tables, Index length);
// Differentiable form; padded rows are exactly zero.
ad::Var embed_sequence(ad::Tape& tape, const SequenceWindow& window, EmbeddingTables& tables);

// View b keeps rows with behavior b, zeroes the rest and clears their mask.
std::vector<SequenceMatrix> behavior_views(const SequenceMatrix& seq, int n_behaviors);
std::vector<std::uint8_t> behavior_mask(std::span<const int> behavior_ids, std::span<const std::uint8_t> mask, int behavior);

// Xavier/Glorot uniform initialisation.
void xavier_uniform(Param& p, Index fan_in, Index fan_out, Rng& rng);

}  // namespace mbp
