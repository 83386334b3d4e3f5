#include "mbp/pretrain.hpp"

#include "mbp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mbp {

std::vector<Event> to_events(std::span<const data::InteractionRecord> records) {
  std::vector<Event> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.item, r.behavior});
  return out;
}

std::vector<int> item_set(std::span<const data::InteractionRecord> records) {
  std::vector<int> items;
  items.reserve(records.size());
  for (const auto& r : records) items.push_back(r.item);
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

int sample_negative_item(std::span<const int> interacted, int n_items, Rng& rng) {
  const auto eligible = static_cast<std::int64_t>(n_items) - static_cast<std::int64_t>(interacted.size());
  if (eligible <= 0) throw SamplingError("sample_negative_item: user interacted with every item");
  if (2 * eligible >= n_items) {
    for (;;) {
      const int c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_items)));
      if (!std::binary_search(interacted.begin(), interacted.end(), c)) return c;
    }
  }
  // Dense case: pick the j-th eligible item directly.
  auto j = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(eligible)));
  int item = 0;
  for (int x : interacted) {
    if (x - item > j) break;
    j -= x - item;
    item = x + 1;
  }
  return item + static_cast<int>(j);
}

int sample_negative_behavior(int positive, int n_behaviors, Rng& rng) {
  if (n_behaviors < 2) throw SamplingError("sample_negative_behavior: need at least two behaviors");
  const int b = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_behaviors - 1)));
  return b < positive ? b : b + 1;
}

double pretrain_loss(const Mat& u, const Mat& e_p, const Mat& e_n, const Mat& b_p, const Mat& b_n) {
  const double item_margin = u.row(0).dot(e_p.row(0)) - u.row(0).dot(e_n.row(0));
  const double behavior_margin = u.row(0).dot(b_p.row(0)) - u.row(0).dot(b_n.row(0));
  return ad::softplus_value(-item_margin) + ad::softplus_value(-behavior_margin);
}

ad::Var pretrain_loss(ad::Var u, ad::Var e_p, ad::Var e_n, ad::Var b_p, ad::Var b_n) {
  const ad::Var item_margin = ad::dot(u, ad::sub(e_p, e_n));
  const ad::Var behavior_margin = ad::dot(u, ad::sub(b_p, b_n));
  return ad::add(ad::softplus(ad::scale(item_margin, -1.0)), ad::softplus(ad::scale(behavior_margin, -1.0)));
}

std::vector<TrainingExample> build_pretrain_examples(const data::InteractionLog& log, const PretrainConfig& cfg,
                                                     Rng& rng) {
  std::vector<TrainingExample> out;
  std::vector<int> positions;
  for (int u = 0; u < log.n_users; ++u) {
    const auto recs = log.user_records(u);
    const int n = static_cast<int>(recs.size());
    if (n < 3) continue;
    positions.clear();
    if (!cfg.final_only)
      for (int t = std::max(1, cfg.min_ctx); t <= n - 2; ++t) positions.push_back(t);
    if (positions.empty()) positions.push_back(n - 2);
    if (cfg.samples_per_user > 0 && static_cast<int>(positions.size()) > cfg.samples_per_user) {
      for (int i = 0; i < cfg.samples_per_user; ++i) {
        const auto j = i + static_cast<int>(rng.uniform_int(positions.size() - static_cast<std::size_t>(i)));
        std::swap(positions[static_cast<std::size_t>(i)], positions[static_cast<std::size_t>(j)]);
      }
      positions.resize(static_cast<std::size_t>(cfg.samples_per_user));
      std::sort(positions.begin(), positions.end());
    }
    const std::vector<int> seen = item_set(recs);
    for (int t : positions) {
      const auto& r = recs[static_cast<std::size_t>(t)];
      TrainingExample ex;
      ex.user = u;
      ex.end = t;
      ex.pos_item = r.item;
      ex.pos_behavior = r.behavior;
      ex.neg_item = sample_negative_item(seen, log.n_items, rng);
      ex.neg_behavior = sample_negative_behavior(r.behavior, log.n_behaviors, rng);
      out.push_back(ex);
    }
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.uniform_int(i)]);
  return out;
}

std::string curve_csv(std::span<const CurvePoint> curve) {
  std::ostringstream os;
  os << "epoch,train_loss,valid_ndcg\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.10f,%.10f\n", p.epoch, p.train_loss, p.valid_ndcg);
    os << buf;
  }
  return os.str();
}

namespace {

std::span<const data::InteractionRecord> context_of(std::span<const data::InteractionRecord> recs, int end,
                                                    Index seq_len) {
  const auto n = static_cast<std::size_t>(end);
  const std::size_t start = n > static_cast<std::size_t>(seq_len) ? n - static_cast<std::size_t>(seq_len) : 0;
  return recs.subspan(start, n - start);
}

double param_norm(EbmParams& model) {
  double s = 0.0;
  for (Param* p : model.params()) s += p->value.squaredNorm();
  return std::sqrt(s);
}

}  // namespace

double pretrain_validation(EbmParams& model, const data::InteractionLog& log, const PretrainConfig& cfg,
                           std::uint64_t seed) {
  std::vector<int> users;
  for (int u = 0; u < log.n_users; ++u)
    if (log.user_records(u).size() >= 2) users.push_back(u);
  if (cfg.valid_users > 0 && static_cast<int>(users.size()) > cfg.valid_users) {
    Rng pick = Rng::stream(seed, "valid-users");
    for (std::size_t i = users.size(); i > 1; --i) std::swap(users[i - 1], users[pick.uniform_int(i)]);
    users.resize(static_cast<std::size_t>(cfg.valid_users));
    std::sort(users.begin(), users.end());
  }
  if (users.empty()) return 0.0;
  double total = 0.0;
  for (int u : users) {
    const auto recs = log.user_records(u);
    const int last = static_cast<int>(recs.size()) - 1;
    const int positive = recs[static_cast<std::size_t>(last)].item;
    const std::vector<int> seen = item_set(recs);
    const int n_neg = std::min(cfg.valid_neg, log.n_items - static_cast<int>(seen.size()));
    Rng rng = Rng::stream(seed, "valid", static_cast<std::uint64_t>(u));
    std::vector<int> candidates{positive};
    for (int c : sample_eval_negatives(seen, log.n_items, n_neg, rng)) candidates.push_back(c);
    const std::vector<Event> events = to_events(context_of(recs, last, cfg.seq_len));
    const Mat user = encode_user(events, model, cfg.seq_len);
    const int rank = rank_of(rank_candidates(user, candidates, model.tables.item.value), positive);
    total += hr_ndcg_at_k(rank, 10).ndcg + hr_ndcg_at_k(rank, 20).ndcg;
  }
  return total / static_cast<double>(users.size());
}

double pretrain_epoch(EbmParams& model, Adam& opt, const data::InteractionLog& log,
                      std::span<const TrainingExample> examples, const PretrainConfig& cfg, int epoch) {
  const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch));
  double epoch_loss = 0.0;
  opt.zero_grad();
  for (std::size_t start = 0, b = 0; start < examples.size(); start += batch, ++b) {
    const std::size_t end = std::min(examples.size(), start + batch);
    const double inv = 1.0 / static_cast<double>(end - start);
    double batch_loss = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      const TrainingExample& ex = examples[i];
      const auto recs = log.user_records(ex.user);
      const std::vector<Event> events = to_events(context_of(recs, ex.end, cfg.seq_len));
      ad::Tape tape(ad::GradMode::Trainable);
      const ad::Var u = encode_user(tape, events, model, cfg.seq_len);
      const int pi[] = {ex.pos_item}, ni[] = {ex.neg_item}, pb[] = {ex.pos_behavior}, nb[] = {ex.neg_behavior};
      const ad::Var loss = pretrain_loss(u, ad::gather_rows(tape, model.tables.item, pi),
                                         ad::gather_rows(tape, model.tables.item, ni),
                                         ad::gather_rows(tape, model.tables.behavior, pb),
                                         ad::gather_rows(tape, model.tables.behavior, nb));
      batch_loss += loss.scalar();
      tape.backward(loss, inv);
    }
    if (!std::isfinite(batch_loss)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "non-finite pre-training loss at epoch %d, batch %zu (parameter norm %.6g)", epoch,
                    b, param_norm(model));
      throw TrainingError(buf);
    }
    opt.step();
    opt.zero_grad();
    epoch_loss += batch_loss;
  }
  return examples.empty() ? 0.0 : epoch_loss / static_cast<double>(examples.size());
}

PretrainResult run_pretraining(const data::InteractionLog& log, const ModelConfig& model_cfg,
                               const PretrainConfig& cfg, std::uint64_t seed, const std::string& fingerprint) {
  if (log.empty()) throw TrainingError("run_pretraining: empty interaction log");
  ModelConfig mc = model_cfg;
  mc.n_items = log.n_items;
  mc.n_behaviors = log.n_behaviors;
  if (cfg.seq_len > mc.max_len) throw ShapeError("run_pretraining: seq_len exceeds model max_len");
  PretrainResult result;
  EbmParams model(mc);
  Rng init = Rng::stream(seed, "init");
  model.init(init);
  model.set_trainable(true);
  Adam opt(model.params(), {.lr = cfg.lr});

  double best = -1.0;
  int bad = 0;
  std::vector<Mat> best_values, best_m, best_v;
  long long best_steps = 0;
  std::string rng_state;
  auto snapshot = [&] {
    best_values.clear();
    for (Param* p : model.params()) best_values.push_back(p->value);
    best_m = opt.first_moments();
    best_v = opt.second_moments();
    best_steps = opt.steps();
  };
  snapshot();
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = Rng::stream(seed, "negatives", static_cast<std::uint64_t>(epoch));
    const std::vector<TrainingExample> examples = build_pretrain_examples(log, cfg, rng);
    const double loss = pretrain_epoch(model, opt, log, examples, cfg, epoch);
    const double valid = pretrain_validation(model, log, cfg, seed);
    result.curve.push_back({epoch, loss, valid});
    rng_state = rng.state();
    if (valid > best) {
      best = valid;
      bad = 0;
      result.best_epoch = epoch;
      snapshot();
    } else if (++bad >= cfg.patience) {
      break;
    }
  }
  const auto params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  result.checkpoint.model = std::move(model);
  result.checkpoint.adam_m = std::move(best_m);
  result.checkpoint.adam_v = std::move(best_v);
  result.checkpoint.adam_steps = best_steps;
  result.checkpoint.epoch = result.best_epoch;
  result.checkpoint.rng_state = rng_state;
  result.checkpoint.fingerprint = fingerprint;
  return result;
}

}  // namespace mbp
