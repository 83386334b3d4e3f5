#include "mbp/tune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>

namespace mbp {

double tune_pred_loss(const Mat& u, const Mat& e_p, const Mat& e_n) {
  return ad::softplus_value(-(u.row(0).dot(e_p.row(0)) - u.row(0).dot(e_n.row(0))));
}

TuneLoss tune_loss(ad::Var u, ad::Var e_p, ad::Var e_n, const GeneratedPrompts& prompts, int n_factors,
                   const TuneConfig& cfg) {
  TuneLoss out;
  out.pred = ad::softplus(ad::scale(ad::dot(u, ad::sub(e_p, e_n)), -1.0));
  out.total = out.pred;
  const double lambda = cfg.effective_lambda();
  if (lambda == 0.0 || !prompts.e.valid() || !prompts.p.valid()) return out;
  out.compactness = compactness_loss(prompts.e, prompts.p, n_factors, cfg.weights);
  const double sign = cfg.sign == CompactnessSign::PromoteDiversity ? -1.0 : 1.0;
  out.total = ad::add(out.pred, ad::scale(out.compactness, sign * lambda));
  return out;
}

std::vector<Param*> active_params(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg) {
  std::vector<Param*> out = model.tables.params();
  const bool identity = cfg.no_denoise || model.config.identity_filter;
  for (auto& layer : model.layers) {
    if (!identity)
      for (auto& f : layer.filters)
        for (Param* p : f.params()) out.push_back(p);
    for (Param* p : {&layer.mixer_w, &layer.mixer_b, &layer.ffn_w1, &layer.ffn_b1, &layer.ffn_w2, &layer.ffn_b2,
                     &layer.ln1_g, &layer.ln1_b, &layer.ln2_g, &layer.ln2_b})
      out.push_back(p);
  }
  if (prompts.config.n_tokens == 0) return out;
  const int injected = cfg.first_layer_only ? std::min(1, prompts.layers) : prompts.layers;
  if (cfg.static_prompt) {
    for (int l = 0; l < injected; ++l) out.push_back(&prompts.static_tokens[static_cast<std::size_t>(l)]);
    return out;
  }
  for (Param* p : prompts.params(false)) {
    bool unused = false;
    for (int l = injected; l < prompts.layers; ++l) {
      const auto i = static_cast<std::size_t>(l);
      unused = unused || p == &prompts.pfg.projection[i] || (!prompts.pfg.gate_full.empty() && p == &prompts.pfg.gate_full[i]);
    }
    if (!unused) out.push_back(p);
  }
  return out;
}

void configure_trainable(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg) {
  model.set_trainable(cfg.full_finetune);
  for (Param* p : prompts.all_params()) p->trainable = false;
  const std::vector<Param*> active = active_params(model, prompts, cfg);
  const std::vector<Param*> backbone = model.params();
  for (Param* p : active)
    if (std::find(backbone.begin(), backbone.end(), p) == backbone.end()) p->trainable = true;
}

ParamBudget param_budget(std::span<Param* const> params) {
  ParamBudget b;
  for (const Param* p : params) {
    b.total += p->size();
    if (p->trainable) b.trainable += p->size();
  }
  b.ratio = b.total > 0 ? static_cast<double>(b.trainable) / static_cast<double>(b.total) : 0.0;
  return b;
}

ParamBudget param_budget(EbmParams& model, PromptParams& prompts, const TuneConfig& cfg) {
  configure_trainable(model, prompts, cfg);
  return param_budget(active_params(model, prompts, cfg));
}

std::uint64_t param_hash(std::span<Param* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(shape), sizeof shape), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                                 static_cast<std::size_t>(p->value.size()) * sizeof(double)),
                h);
  }
  return h;
}

namespace {

// Train positions per user: the leave-one-out train list for evaluation
// users, every finetune position otherwise.
std::vector<int> train_positions(const TuneContext& ctx, int user, const std::vector<int>& eval_index) {
  const int idx = eval_index[static_cast<std::size_t>(user)];
  if (idx >= 0) return ctx.spec->users[static_cast<std::size_t>(idx)].train;
  const auto n = static_cast<int>(ctx.spec->finetune.user_records(user).size());
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  return all;
}

std::vector<int> make_eval_index(const TuneContext& ctx) {
  std::vector<int> index(static_cast<std::size_t>(ctx.spec->finetune.n_users), -1);
  for (std::size_t i = 0; i < ctx.spec->users.size(); ++i)
    index[static_cast<std::size_t>(ctx.spec->users[i].user)] = static_cast<int>(i);
  return index;
}

std::vector<int> user_attributes(const TuneContext& ctx, int user, const PromptParams& prompts) {
  const std::size_t fields = prompts.attr_vocab.size();
  if (ctx.attributes && static_cast<std::size_t>(user) < ctx.attributes->values.size() &&
      ctx.attributes->values[static_cast<std::size_t>(user)].size() == fields)
    return ctx.attributes->values[static_cast<std::size_t>(user)];
  return std::vector<int>(fields, -1);
}

std::vector<int> target_items(const TuneContext& ctx, int user) {
  std::vector<int> items;
  for (const data::InteractionLog* log : {&ctx.spec->pretrain, &ctx.spec->finetune}) {
    if (user >= log->n_users) continue;
    for (const auto& r : log->user_records(user))
      if (r.behavior == ctx.target_behavior) items.push_back(r.item);
  }
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

}  // namespace

UserCase make_user_case(const TuneContext& ctx, int user, std::span<const int> positions, int before,
                        const PromptParams& prompts) {
  const auto recs = ctx.spec->finetune.user_records(user);
  std::vector<data::InteractionRecord> history;
  if (user < ctx.spec->pretrain.n_users) {
    const auto pre = ctx.spec->pretrain.user_records(user);
    history.assign(pre.begin(), pre.end());
  }
  UserCase uc;
  for (int p : positions) {
    if (p >= before) break;
    const auto& r = recs[static_cast<std::size_t>(p)];
    history.push_back(r);
    uc.events.push_back({r.item, r.behavior});
  }
  uc.profile =
      build_profile(history, user_attributes(ctx, user, prompts), prompts.n_behaviors, prompts.config.gru_len);
  return uc;
}

std::vector<TuneExample> build_tune_examples(const TuneContext& ctx, const TuneConfig& cfg, Rng& rng) {
  const std::vector<int> eval_index = make_eval_index(ctx);
  const data::InteractionLog& fin = ctx.spec->finetune;
  std::vector<TuneExample> out;
  std::vector<TuneExample> user_examples;
  for (int u = 0; u < fin.n_users; ++u) {
    const auto recs = fin.user_records(u);
    if (recs.empty()) continue;
    const std::vector<int> positions = train_positions(ctx, u, eval_index);
    user_examples.clear();
    for (std::size_t i = 1; i < positions.size(); ++i) {
      const auto& r = recs[static_cast<std::size_t>(positions[i])];
      if (r.behavior == ctx.target_behavior) user_examples.push_back({u, positions[i], r.item, 0});
    }
    if (user_examples.empty()) continue;
    if (cfg.samples_per_user > 0 && static_cast<int>(user_examples.size()) > cfg.samples_per_user) {
      for (int i = 0; i < cfg.samples_per_user; ++i) {
        const auto j = i + static_cast<int>(rng.uniform_int(user_examples.size() - static_cast<std::size_t>(i)));
        std::swap(user_examples[static_cast<std::size_t>(i)], user_examples[static_cast<std::size_t>(j)]);
      }
      user_examples.resize(static_cast<std::size_t>(cfg.samples_per_user));
    }
    const std::vector<int> seen = target_items(ctx, u);
    for (auto& ex : user_examples) {
      ex.neg_item = sample_negative_item(seen, fin.n_items, rng);
      out.push_back(ex);
    }
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.uniform_int(i)]);
  return out;
}

PromptParams make_prompt_params(const EbmParams& model, const PromptConfig& cfg, const TuneContext& ctx,
                                std::uint64_t seed) {
  std::vector<int> vocab;
  if (cfg.use_attributes && ctx.attributes) vocab = ctx.attributes->vocab_sizes;
  PromptParams prompts(cfg, model.config.dim, model.config.layers, model.config.n_behaviors, vocab);
  Rng init = Rng::stream(seed, "prompt-init");
  prompts.init(init);
  const std::vector<int> eval_index = make_eval_index(ctx);
  std::vector<std::vector<double>> stats;
  for (int u = 0; u < ctx.spec->finetune.n_users; ++u) {
    if (ctx.spec->finetune.user_records(u).empty()) continue;
    const std::vector<int> positions = train_positions(ctx, u, eval_index);
    const UserCase uc = make_user_case(ctx, u, positions, std::numeric_limits<int>::max(), prompts);
    stats.push_back(uc.profile.stats.to_vector());
  }
  fit_standardizer(stats, prompts.stat_mean, prompts.stat_scale);
  return prompts;
}

namespace {

double tune_validation(EbmParams& model, PromptParams* prompts, const TuneContext& ctx, const TuneConfig& cfg,
                       std::uint64_t seed) {
  double total = 0.0;
  int n = 0;
  for (const auto& us : ctx.spec->users) {
    if (us.train.empty() || us.train.front() >= us.valid) continue;
    const auto recs = ctx.spec->finetune.user_records(us.user);
    const int positive = recs[static_cast<std::size_t>(us.valid)].item;
    const std::vector<int> seen = interacted_items(*ctx.spec, us.user);
    const int n_neg = std::min(cfg.valid_neg, ctx.spec->finetune.n_items - static_cast<int>(seen.size()));
    Rng rng = Rng::stream(seed, "tune-valid", static_cast<std::uint64_t>(us.user));
    std::vector<int> candidates{positive};
    for (int c : sample_eval_negatives(seen, ctx.spec->finetune.n_items, n_neg, rng)) candidates.push_back(c);
    ad::Tape tape(ad::GradMode::None);
    std::vector<ad::Var> tokens;
    UserCase uc;
    if (prompts) {
      uc = make_user_case(ctx, us.user, us.train, us.valid, *prompts);
      tokens = generate_prompts(tape, uc.profile, *prompts, model.tables, cfg.static_prompt, cfg.first_layer_only)
                   .tokens;
    } else {
      for (int p : us.train) {
        if (p >= us.valid) break;
        uc.events.push_back({recs[static_cast<std::size_t>(p)].item, recs[static_cast<std::size_t>(p)].behavior});
      }
    }
    const Mat u = encode_user(tape, uc.events, model, cfg.seq_len, tokens).value();
    const int rank = rank_of(rank_candidates(u, candidates, model.tables.item.value), positive);
    total += hr_ndcg_at_k(rank, 10).ndcg + hr_ndcg_at_k(rank, 20).ndcg;
    ++n;
  }
  return n > 0 ? total / n : 0.0;
}

}  // namespace

TuneResult run_tuning(const EbmParams& backbone, const TuneContext& ctx, const PromptConfig& prompt_cfg,
                      const TuneConfig& cfg, std::uint64_t seed) {
  if (!ctx.spec) throw std::invalid_argument("run_tuning: missing split");
  if (cfg.seq_len > backbone.config.max_len) throw ShapeError("run_tuning: seq_len exceeds model max_len");
  TuneResult res;
  res.model = backbone;
  if (cfg.no_denoise) res.model.config.identity_filter = true;
  res.prompts = make_prompt_params(res.model, prompt_cfg, ctx, seed);
  EbmParams& model = res.model;
  PromptParams& prompts = res.prompts;
  configure_trainable(model, prompts, cfg);
  std::vector<Param*> trainable;
  for (Param* p : active_params(model, prompts, cfg))
    if (p->trainable) trainable.push_back(p);
  Adam opt(trainable, {.lr = cfg.lr});

  const std::vector<int> eval_index = make_eval_index(ctx);
  std::vector<Mat> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (Param* p : trainable) best_values.push_back(p->value);
  };
  snapshot();
  double best = tune_validation(model, &prompts, ctx, cfg, seed);
  res.curve.push_back({0, 0.0, best});
  int bad = 0;
  double seconds = 0.0;
  int epochs_run = 0;
  const int n_factors = prompts.config.n_factors;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = Rng::stream(seed, "tune-negatives", static_cast<std::uint64_t>(epoch));
    const std::vector<TuneExample> examples = build_tune_examples(ctx, cfg, rng);
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch));
    double epoch_loss = 0.0, epoch_pred = 0.0;
    opt.zero_grad();
    for (std::size_t start = 0, b = 0; start < examples.size(); start += batch, ++b) {
      const std::size_t end = std::min(examples.size(), start + batch);
      const double inv = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const TuneExample& ex = examples[i];
        const std::vector<int> positions = train_positions(ctx, ex.user, eval_index);
        const UserCase uc = make_user_case(ctx, ex.user, positions, ex.position, prompts);
        ad::Tape tape(ad::GradMode::Trainable);
        const GeneratedPrompts g =
            generate_prompts(tape, uc.profile, prompts, model.tables, cfg.static_prompt, cfg.first_layer_only);
        const ad::Var u = encode_user(tape, uc.events, model, cfg.seq_len, g.tokens);
        const int pi[] = {ex.pos_item}, ni[] = {ex.neg_item};
        const TuneLoss loss = tune_loss(u, ad::gather_rows(tape, model.tables.item, pi),
                                        ad::gather_rows(tape, model.tables.item, ni), g, n_factors, cfg);
        batch_loss += loss.total.scalar();
        epoch_pred += loss.pred.scalar();
        tape.backward(loss.total, inv);
      }
      if (!std::isfinite(batch_loss)) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "non-finite tuning loss at epoch %d, batch %zu", epoch, b);
        throw TrainingError(buf);
      }
      opt.step();
      opt.zero_grad();
      epoch_loss += batch_loss;
    }
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++epochs_run;
    const double n_ex = std::max<double>(1.0, static_cast<double>(examples.size()));
    res.final_train_pred = epoch_pred / n_ex;
    const double valid = tune_validation(model, &prompts, ctx, cfg, seed);
    res.curve.push_back({epoch, epoch_loss / n_ex, valid});
    if (valid > best) {
      best = valid;
      bad = 0;
      res.best_epoch = epoch;
      snapshot();
    } else if (++bad >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i]->value = best_values[i];
  res.seconds_per_epoch = epochs_run > 0 ? seconds / epochs_run : 0.0;
  for (const auto& us : ctx.spec->users) {
    const UserCase uc = make_user_case(ctx, us.user, us.train, us.test, prompts);
    bool empty = true;
    for (const auto& items : uc.profile.behavior_items) empty = empty && items.empty();
    res.flagged_users += empty ? 1 : 0;
  }
  return res;
}

Scorer make_scorer(EbmParams& model, PromptParams* prompts, const TuneContext& ctx, const TuneConfig& cfg) {
  return [&model, prompts, ctx, cfg](const data::UserSplit& us, std::span<const int> candidates) {
    ad::Tape tape(ad::GradMode::None);
    std::vector<ad::Var> tokens;
    UserCase uc;
    if (prompts) {
      uc = make_user_case(ctx, us.user, us.train, us.test, *prompts);
      tokens = generate_prompts(tape, uc.profile, *prompts, model.tables, cfg.static_prompt, cfg.first_layer_only)
                   .tokens;
    } else {
      const auto recs = ctx.spec->finetune.user_records(us.user);
      for (int p : us.train)
        uc.events.push_back({recs[static_cast<std::size_t>(p)].item, recs[static_cast<std::size_t>(p)].behavior});
    }
    std::vector<double> scores;
    scores.reserve(candidates.size());
    if (uc.events.empty()) {
      scores.assign(candidates.size(), 0.0);
      return scores;
    }
    const Mat u = encode_user(tape, uc.events, model, cfg.seq_len, tokens).value();
    for (int c : candidates) scores.push_back(u.row(0).dot(model.tables.item.value.row(c)));
    return scores;
  };
}

PromptExport export_user_prompts(EbmParams& model, PromptParams& prompts, const TuneContext& ctx, int user,
                                 const TuneConfig& cfg) {
  const std::vector<int> eval_index = make_eval_index(ctx);
  const std::vector<int> positions = train_positions(ctx, user, eval_index);
  const int idx = eval_index[static_cast<std::size_t>(user)];
  const int before = idx >= 0 ? ctx.spec->users[static_cast<std::size_t>(idx)].test : std::numeric_limits<int>::max();
  const UserCase uc = make_user_case(ctx, user, positions, before, prompts);
  ad::Tape tape(ad::GradMode::None);
  const GeneratedPrompts g =
      generate_prompts(tape, uc.profile, prompts, model.tables, cfg.static_prompt, cfg.first_layer_only);
  PromptExport out;
  out.user = user;
  if (g.p.valid()) out.p = g.p.value();
  if (g.e.valid()) out.e = g.e.value();
  for (const auto& t : g.tokens) out.tokens.push_back(t.valid() ? t.value() : Mat());
  return out;
}

double mean_pairwise_cosine(const Mat& rows) {
  double total = 0.0;
  int pairs = 0;
  for (Index i = 0; i < rows.rows(); ++i)
    for (Index j = i + 1; j < rows.rows(); ++j) {
      const double denom = rows.row(i).norm() * rows.row(j).norm();
      total += denom > 0.0 ? rows.row(i).dot(rows.row(j)) / denom : 0.0;
      ++pairs;
    }
  return pairs > 0 ? total / pairs : 0.0;
}

}  // namespace mbp
