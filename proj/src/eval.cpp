#include "mbp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace mbp {

std::vector<int> rank_by_scores(std::span<const int> candidates, std::span<const double> scores) {
  if (candidates.size() != scores.size()) throw std::invalid_argument("rank_by_scores: size mismatch");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  std::vector<int> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(candidates[i]);
  return out;
}

std::vector<int> rank_candidates(const Mat& u, std::span<const int> candidates, const Mat& item_table) {
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (int c : candidates) scores.push_back(u.row(0).dot(item_table.row(c)));
  return rank_by_scores(candidates, scores);
}

int rank_of(std::span<const int> ranked, int item) {
  const auto it = std::find(ranked.begin(), ranked.end(), item);
  if (it == ranked.end()) throw std::invalid_argument("rank_of: item not among candidates");
  return static_cast<int>(it - ranked.begin()) + 1;
}

HitNdcg hr_ndcg_at_k(int rank, int k) {
  if (rank < 1) throw std::invalid_argument("hr_ndcg_at_k: rank must be >= 1");
  if (rank > k) return {};
  return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

std::vector<int> sample_eval_negatives(std::span<const int> interacted, int n_items, int n_neg, Rng& rng) {
  const int eligible = n_items - static_cast<int>(interacted.size());
  if (eligible < n_neg)
    throw ProtocolError("catalog too small: " + std::to_string(eligible) + " eligible items for " +
                        std::to_string(n_neg) + " negatives");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_neg));
  if (eligible >= 2 * n_neg) {
    std::vector<int> taken;
    while (static_cast<int>(out.size()) < n_neg) {
      const int c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_items)));
      if (std::binary_search(interacted.begin(), interacted.end(), c)) continue;
      const auto pos = std::lower_bound(taken.begin(), taken.end(), c);
      if (pos != taken.end() && *pos == c) continue;
      taken.insert(pos, c);
      out.push_back(c);
    }
    return out;
  }
  std::vector<int> pool;
  pool.reserve(static_cast<std::size_t>(eligible));
  for (int i = 0; i < n_items; ++i)
    if (!std::binary_search(interacted.begin(), interacted.end(), i)) pool.push_back(i);
  for (int i = 0; i < n_neg; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(eligible - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<int> interacted_items(const data::SplitSpec& spec, int user) {
  std::vector<int> items;
  for (const data::InteractionLog* log : {&spec.pretrain, &spec.finetune}) {
    if (user >= log->n_users) continue;
    for (const auto& r : log->user_records(user)) items.push_back(r.item);
  }
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

double EvalReport::hr_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return hr[i];
  throw std::out_of_range("EvalReport: no cut-off " + std::to_string(k));
}

double EvalReport::ndcg_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return ndcg[i];
  throw std::out_of_range("EvalReport: no cut-off " + std::to_string(k));
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "k,hr,ndcg,n_eval_users,target_behavior,n_neg,seed,fingerprint,empty\n";
  char buf[64];
  for (std::size_t i = 0; i < ks.size(); ++i) {
    os << ks[i];
    std::snprintf(buf, sizeof buf, ",%.10f", hr[i]);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.10f", ndcg[i]);
    os << buf << ',' << n_eval_users << ',' << target_behavior << ',' << n_neg << ',' << seed << ',' << fingerprint
       << ',' << (empty ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "target behavior %d, %d users, %d negatives, seed %llu%s\n", target_behavior,
                n_eval_users, n_neg, static_cast<unsigned long long>(seed), empty ? " (empty subset)" : "");
  os << buf;
  os << "    K      HR@K    NDCG@K\n";
  for (std::size_t i = 0; i < ks.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%5d  %8.4f  %8.4f\n", ks[i], hr[i], ndcg[i]);
    os << buf;
  }
  return os.str();
}

EvalReport evaluate(const data::SplitSpec& spec, const Scorer& scorer, const EvalOptions& options) {
  EvalReport rep;
  rep.ks = options.ks;
  std::sort(rep.ks.begin(), rep.ks.end());
  rep.hr.assign(rep.ks.size(), 0.0);
  rep.ndcg.assign(rep.ks.size(), 0.0);
  rep.target_behavior = spec.target_behavior;
  rep.n_neg = options.n_neg;
  rep.seed = options.seed;
  rep.fingerprint = options.fingerprint;
  const int n_items = spec.finetune.n_items;
  for (const auto& us : spec.users) {
    const auto recs = spec.finetune.user_records(us.user);
    const int positive = recs[static_cast<std::size_t>(us.test)].item;
    Rng rng = Rng::stream(options.seed, "eval", static_cast<std::uint64_t>(us.user));
    const std::vector<int> seen = interacted_items(spec, us.user);
    std::vector<int> candidates{positive};
    for (int c : sample_eval_negatives(seen, n_items, options.n_neg, rng)) candidates.push_back(c);
    const std::vector<double> scores = scorer(us, candidates);
    const int rank = rank_of(rank_by_scores(candidates, scores), positive);
    for (std::size_t i = 0; i < rep.ks.size(); ++i) {
      const HitNdcg m = hr_ndcg_at_k(rank, rep.ks[i]);
      rep.hr[i] += m.hr;
      rep.ndcg[i] += m.ndcg;
    }
    ++rep.n_eval_users;
  }
  if (rep.n_eval_users == 0) {
    rep.empty = true;
    return rep;
  }
  for (std::size_t i = 0; i < rep.ks.size(); ++i) {
    rep.hr[i] /= rep.n_eval_users;
    rep.ndcg[i] /= rep.n_eval_users;
  }
  return rep;
}

data::SplitSpec cold_start_subset(const data::SplitSpec& spec, int target_behavior) {
  data::SplitSpec out = target_behavior == spec.target_behavior
                            ? spec
                            : data::make_split_spec(spec.pretrain, spec.finetune, target_behavior);
  std::erase_if(out.users, [](const data::UserSplit& u) { return u.target_count > 2; });
  return out;
}

}  // namespace mbp
