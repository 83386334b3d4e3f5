#include "mbp/data.hpp"

#include "mbp/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace mbp::data {

void InteractionLog::index() {
  offsets_.assign(static_cast<std::size_t>(n_users) + 1, 0);
  for (const auto& r : records) {
    if (r.user < 0 || r.user >= n_users) throw DataError("InteractionLog::index: user id out of range");
    ++offsets_[static_cast<std::size_t>(r.user) + 1];
  }
  std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
}

std::span<const InteractionRecord> InteractionLog::user_records(int user) const {
  if (offsets_.size() != static_cast<std::size_t>(n_users) + 1)
    throw DataError("InteractionLog::user_records: log not indexed");
  if (user < 0 || user >= n_users) throw std::out_of_range("InteractionLog::user_records: unknown user");
  const auto b = offsets_[static_cast<std::size_t>(user)];
  const auto e = offsets_[static_cast<std::size_t>(user) + 1];
  return {records.data() + b, e - b};
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string f;
  while (is >> f) out.push_back(f);
  return out;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

void sort_records(std::vector<InteractionRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const InteractionRecord& a, const InteractionRecord& b) {
    if (a.user != b.user) return a.user < b.user;
    return a.timestamp < b.timestamp;
  });
}

// Keeps only the users/items flagged in `keep_*`, re-densifying ids in order.
InteractionLog densify(const InteractionLog& src, const std::vector<char>& keep_user,
                       const std::vector<char>& keep_item) {
  InteractionLog out;
  out.n_behaviors = src.n_behaviors;
  out.target_behavior = src.target_behavior;
  std::vector<int> user_map(static_cast<std::size_t>(src.n_users), -1);
  std::vector<int> item_map(static_cast<std::size_t>(src.n_items), -1);
  for (int u = 0; u < src.n_users; ++u)
    if (keep_user[static_cast<std::size_t>(u)]) {
      user_map[static_cast<std::size_t>(u)] = out.n_users++;
      out.user_ids.push_back(src.user_ids.empty() ? u : src.user_ids[static_cast<std::size_t>(u)]);
    }
  for (int i = 0; i < src.n_items; ++i)
    if (keep_item[static_cast<std::size_t>(i)]) {
      item_map[static_cast<std::size_t>(i)] = out.n_items++;
      out.item_ids.push_back(src.item_ids.empty() ? i : src.item_ids[static_cast<std::size_t>(i)]);
    }
  for (const auto& r : src.records) {
    const int u = user_map[static_cast<std::size_t>(r.user)];
    const int i = item_map[static_cast<std::size_t>(r.item)];
    if (u >= 0 && i >= 0) out.records.push_back({u, i, r.timestamp, r.behavior});
  }
  out.index();
  return out;
}

InteractionLog empty_like(const InteractionLog& log) {
  InteractionLog out;
  out.n_users = log.n_users;
  out.n_items = log.n_items;
  out.n_behaviors = log.n_behaviors;
  out.target_behavior = log.target_behavior;
  out.user_ids = log.user_ids;
  out.item_ids = log.item_ids;
  return out;
}

}  // namespace

InteractionLog load_interactions(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file '" + path.string() + "'");
  const int needed = *std::max_element(schema.columns.begin(), schema.columns.end()) + 1;

  struct Raw {
    std::int64_t user, item, ts, behavior;
  };
  std::vector<Raw> raw;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty()) continue;
    std::int64_t dummy;
    if (first) {
      first = false;
      const bool header = std::none_of(fields.begin(), fields.end(), [&](const std::string& f) { return parse_int(f, dummy); });
      if (header) continue;
    }
    if (static_cast<int>(fields.size()) < needed)
      throw ParseError(line_no, "expected " + std::to_string(needed) + " columns, found " + std::to_string(fields.size()));
    std::int64_t v[4];
    for (int k = 0; k < 4; ++k) {
      const auto& f = fields[static_cast<std::size_t>(schema.columns[static_cast<std::size_t>(k)])];
      if (!parse_int(f, v[k])) throw ParseError(line_no, "column " + std::to_string(schema.columns[static_cast<std::size_t>(k)]) + ": not an integer '" + f + "'");
    }
    if (v[3] < 0 || (schema.n_behaviors > 0 && v[3] >= schema.n_behaviors))
      throw SchemaError("line " + std::to_string(line_no) + ": unknown behavior index " + std::to_string(v[3]));
    raw.push_back({v[0], v[1], v[2], v[3]});
  }

  std::vector<std::int64_t> users, items;
  std::int64_t max_behavior = -1;
  for (const auto& r : raw) {
    users.push_back(r.user);
    items.push_back(r.item);
    max_behavior = std::max(max_behavior, r.behavior);
  }
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());

  InteractionLog log;
  log.n_users = static_cast<int>(users.size());
  log.n_items = static_cast<int>(items.size());
  log.n_behaviors = schema.n_behaviors > 0 ? schema.n_behaviors : static_cast<int>(max_behavior + 1);
  log.target_behavior = schema.target_behavior >= 0 ? schema.target_behavior : std::max(0, log.n_behaviors - 1);
  if (log.n_behaviors > 0 && log.target_behavior >= log.n_behaviors)
    throw SchemaError("target behavior " + std::to_string(log.target_behavior) + " outside [0, " +
                      std::to_string(log.n_behaviors) + ")");
  log.user_ids = users;
  log.item_ids = items;
  log.records.reserve(raw.size());
  for (const auto& r : raw) {
    const int u = static_cast<int>(std::lower_bound(users.begin(), users.end(), r.user) - users.begin());
    const int i = static_cast<int>(std::lower_bound(items.begin(), items.end(), r.item) - items.begin());
    log.records.push_back({u, i, r.ts, static_cast<int>(r.behavior)});
  }
  sort_records(log.records);
  log.index();
  return log;
}

void save_interactions(const std::filesystem::path& path, const InteractionLog& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "user\titem\ttimestamp\tbehavior\n";
  for (const auto& r : log.records) out << r.user << '\t' << r.item << '\t' << r.timestamp << '\t' << r.behavior << '\n';
}

void save_id_map(const std::filesystem::path& path, const InteractionLog& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (std::size_t u = 0; u < log.user_ids.size(); ++u) out << "user\t" << log.user_ids[u] << '\t' << u << '\n';
  for (std::size_t i = 0; i < log.item_ids.size(); ++i) out << "item\t" << log.item_ids[i] << '\t' << i << '\n';
}

InteractionLog filter_min_interactions(const InteractionLog& log, int min_count) {
  if (min_count < 1) throw std::invalid_argument("filter_min_interactions: min_count must be >= 1");
  std::vector<char> keep_user(static_cast<std::size_t>(log.n_users), 1);
  std::vector<char> keep_item(static_cast<std::size_t>(log.n_items), 1);
  for (;;) {
    std::vector<int> uc(static_cast<std::size_t>(log.n_users), 0), ic(static_cast<std::size_t>(log.n_items), 0);
    for (const auto& r : log.records) {
      if (keep_user[static_cast<std::size_t>(r.user)] && keep_item[static_cast<std::size_t>(r.item)]) {
        ++uc[static_cast<std::size_t>(r.user)];
        ++ic[static_cast<std::size_t>(r.item)];
      }
    }
    bool changed = false;
    for (std::size_t u = 0; u < uc.size(); ++u)
      if (keep_user[u] && uc[u] < min_count) keep_user[u] = 0, changed = true;
    for (std::size_t i = 0; i < ic.size(); ++i)
      if (keep_item[i] && ic[i] < min_count) keep_item[i] = 0, changed = true;
    if (!changed) break;
  }
  return densify(log, keep_user, keep_item);
}

TemporalSplit temporal_split(const InteractionLog& log, double ratio, SplitMode mode) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("temporal_split: ratio must lie in (0, 1)");
  TemporalSplit out{empty_like(log), empty_like(log), {}};
  std::vector<char> to_pretrain(log.records.size(), 0);

  if (mode == SplitMode::PerUser) {
    std::size_t begin = 0;
    while (begin < log.records.size()) {
      std::size_t end = begin;
      while (end < log.records.size() && log.records[end].user == log.records[begin].user) ++end;
      const auto n = static_cast<double>(end - begin);
      const auto k = static_cast<std::size_t>(std::ceil(ratio * n - 1e-9));
      for (std::size_t i = begin; i < begin + k; ++i) to_pretrain[i] = 1;
      begin = end;
    }
  } else {
    std::vector<std::size_t> order(log.records.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto& ra = log.records[a];
      const auto& rb = log.records[b];
      if (ra.timestamp != rb.timestamp) return ra.timestamp < rb.timestamp;
      return ra.user < rb.user;
    });
    const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(order.size()) - 1e-9));
    for (std::size_t i = 0; i < k; ++i) to_pretrain[order[i]] = 1;
  }

  std::vector<int> finetune_count(static_cast<std::size_t>(log.n_users), 0);
  std::vector<int> total_count(static_cast<std::size_t>(log.n_users), 0);
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    ++total_count[static_cast<std::size_t>(r.user)];
    if (to_pretrain[i]) {
      out.pretrain.records.push_back(r);
    } else {
      out.finetune.records.push_back(r);
      ++finetune_count[static_cast<std::size_t>(r.user)];
    }
  }
  for (int u = 0; u < log.n_users; ++u)
    if (total_count[static_cast<std::size_t>(u)] > 0 && finetune_count[static_cast<std::size_t>(u)] == 0)
      out.flagged_users.push_back(u);
  out.pretrain.index();
  out.finetune.index();
  return out;
}

SplitSpec make_split_spec(const InteractionLog& pretrain, const InteractionLog& finetune, int target_behavior) {
  if (target_behavior < 0 || target_behavior >= std::max(1, finetune.n_behaviors))
    throw SchemaError("make_split_spec: target behavior " + std::to_string(target_behavior) + " not in log");
  SplitSpec spec;
  spec.pretrain = pretrain;
  spec.finetune = finetune;
  spec.target_behavior = target_behavior;
  for (int u = 0; u < finetune.n_users; ++u) {
    const auto recs = finetune.user_records(u);
    std::vector<int> targets;
    for (std::size_t i = 0; i < recs.size(); ++i)
      if (recs[i].behavior == target_behavior) targets.push_back(static_cast<int>(i));
    if (targets.size() < 2) {
      if (!recs.empty()) ++spec.excluded_users;
      continue;
    }
    UserSplit s;
    s.user = u;
    s.test = targets.back();
    s.valid = targets[targets.size() - 2];
    s.target_count = static_cast<int>(targets.size());
    for (int i = 0; i < s.test; ++i)
      if (i != s.valid) s.train.push_back(i);
    spec.users.push_back(std::move(s));
  }
  return spec;
}

SplitSpec make_split_spec(const InteractionLog& finetune, int target_behavior) {
  InteractionLog pre = empty_like(finetune);
  pre.index();
  return make_split_spec(pre, finetune, target_behavior);
}

double UserStatistics::ratio(int from, int to) const {
  const int b = static_cast<int>(counts.size());
  if (from == to || from < 0 || to < 0 || from >= b || to >= b) throw std::out_of_range("UserStatistics::ratio");
  const int col = to < from ? to : to - 1;
  return conversion_ratios[static_cast<std::size_t>(from * (b - 1) + col)];
}

std::vector<double> UserStatistics::to_vector() const {
  std::vector<double> v(counts.begin(), counts.end());
  v.insert(v.end(), conversion_ratios.begin(), conversion_ratios.end());
  v.push_back(total_length);
  return v;
}

UserStatistics compute_user_statistics(std::span<const InteractionRecord> records, int n_behaviors) {
  UserStatistics s;
  s.counts.assign(static_cast<std::size_t>(n_behaviors), 0);
  for (const auto& r : records) {
    if (r.behavior < 0 || r.behavior >= n_behaviors) throw SchemaError("compute_user_statistics: behavior out of range");
    ++s.counts[static_cast<std::size_t>(r.behavior)];
  }
  for (int from = 0; from < n_behaviors; ++from)
    for (int to = 0; to < n_behaviors; ++to) {
      if (from == to) continue;
      const int c = s.counts[static_cast<std::size_t>(from)];
      s.conversion_ratios.push_back(c > 0 ? static_cast<double>(s.counts[static_cast<std::size_t>(to)]) / c : 0.0);
    }
  s.total_length = static_cast<int>(records.size());
  return s;
}

UserAttributes empty_attributes(int n_users, std::vector<int> vocab_sizes) {
  UserAttributes a;
  a.vocab_sizes = std::move(vocab_sizes);
  a.values.assign(static_cast<std::size_t>(n_users), std::vector<int>(a.vocab_sizes.size(), -1));
  return a;
}

namespace {

// `resolve` maps a user column to a dense index, -1 to skip the row, or throws.
template <typename Resolve>
UserAttributes read_attributes(const std::filesystem::path& path, int n_users, Resolve resolve) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attribute file '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  UserAttributes attrs;
  bool have_vocab = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (!have_vocab) {
      if (fields[0] != "#vocab") throw ParseError(line_no, "attribute file must start with a '#vocab' line");
      for (std::size_t k = 1; k < fields.size(); ++k) {
        std::int64_t v;
        if (!parse_int(fields[k], v) || v < 1) throw ParseError(line_no, "bad vocabulary size '" + fields[k] + "'");
        attrs.vocab_sizes.push_back(static_cast<int>(v));
      }
      attrs.values.assign(static_cast<std::size_t>(n_users), std::vector<int>(attrs.vocab_sizes.size(), -1));
      have_vocab = true;
      continue;
    }
    if (fields.size() != attrs.vocab_sizes.size() + 1)
      throw ParseError(line_no, "expected " + std::to_string(attrs.vocab_sizes.size() + 1) + " columns");
    std::int64_t raw;
    if (!parse_int(fields[0], raw)) throw ParseError(line_no, "unknown user '" + fields[0] + "'");
    const std::int64_t user = resolve(raw, line_no, fields[0]);
    if (user < 0) continue;
    for (std::size_t k = 0; k < attrs.vocab_sizes.size(); ++k) {
      std::int64_t v;
      if (fields[k + 1] == "None") {
        v = -1;
      } else if (!parse_int(fields[k + 1], v) || v < -1 || v >= attrs.vocab_sizes[k]) {
        throw ParseError(line_no, "attribute value '" + fields[k + 1] + "' outside vocabulary");
      }
      attrs.values[static_cast<std::size_t>(user)][k] = static_cast<int>(v);
    }
  }
  if (!have_vocab) return empty_attributes(n_users);
  return attrs;
}

}  // namespace

UserAttributes load_attributes(const std::filesystem::path& path, int n_users) {
  return read_attributes(path, n_users, [n_users](std::int64_t user, std::size_t line_no, const std::string& text) {
    if (user < 0 || user >= n_users) throw ParseError(line_no, "unknown user '" + text + "'");
    return user;
  });
}

UserAttributes load_attributes(const std::filesystem::path& path, std::span<const std::int64_t> user_ids) {
  std::unordered_map<std::int64_t, int> dense;
  for (std::size_t u = 0; u < user_ids.size(); ++u) dense.emplace(user_ids[u], static_cast<int>(u));
  return read_attributes(path, static_cast<int>(user_ids.size()),
                         [&dense](std::int64_t user, std::size_t, const std::string&) -> std::int64_t {
                           const auto it = dense.find(user);
                           return it == dense.end() ? -1 : it->second;
                         });
}

void save_attributes(const std::filesystem::path& path, const UserAttributes& attrs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "#vocab";
  for (int v : attrs.vocab_sizes) out << '\t' << v;
  out << '\n';
  for (std::size_t u = 0; u < attrs.values.size(); ++u) {
    out << u;
    for (int v : attrs.values[u]) {
      out << '\t';
      if (v < 0)
        out << "None";
      else
        out << v;
    }
    out << '\n';
  }
}

SyntheticCorpus generate_synthetic(const SynthConfig& c) {
  if (c.n_users < 1 || c.n_items < 1 || c.n_behaviors < 1 || c.seq_len < 1 || c.n_latent_interests < 1)
    throw SynthConfigError("synthetic config: counts must be positive");
  if (c.n_items < c.n_latent_interests)
    throw SynthConfigError("synthetic config: n_items (" + std::to_string(c.n_items) +
                           ") smaller than n_latent_interests (" + std::to_string(c.n_latent_interests) + ")");
  if (!(c.noise_rate >= 0.0 && c.noise_rate <= 1.0)) throw SynthConfigError("synthetic config: noise_rate outside [0, 1]");
  if (c.interests_per_user < 1) throw SynthConfigError("synthetic config: interests_per_user must be >= 1");

  Rng rng = Rng::stream(c.seed, "synth");
  SyntheticCorpus out;

  // Random balanced item clusters.
  std::vector<int> perm(static_cast<std::size_t>(c.n_items));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
  out.item_cluster.assign(perm.size(), 0);
  std::vector<std::vector<int>> members(static_cast<std::size_t>(c.n_latent_interests));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const int cl = perm[i] % c.n_latent_interests;
    out.item_cluster[i] = cl;
    members[static_cast<std::size_t>(cl)].push_back(static_cast<int>(i));
  }

  const int per_user = std::min(c.interests_per_user, c.n_latent_interests);
  // Escalation probability from behavior b to b + 1.
  auto escalate = [&](int b) { return b == 0 ? 0.35 : 0.55; };

  out.attributes.vocab_sizes.assign(static_cast<std::size_t>(c.n_attributes), c.attribute_vocab);
  InteractionLog& log = out.log;
  log.n_users = c.n_users;
  log.n_items = c.n_items;
  log.n_behaviors = c.n_behaviors;
  log.target_behavior = c.n_behaviors - 1;

  for (int u = 0; u < c.n_users; ++u) {
    std::vector<int> interests;
    while (static_cast<int>(interests.size()) < per_user) {
      const int cl = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.n_latent_interests)));
      if (std::find(interests.begin(), interests.end(), cl) == interests.end()) interests.push_back(cl);
    }
    const double propensity = rng.uniform(0.5, 1.5);
    const std::int64_t start = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c.seq_len)));

    std::vector<int> attrs(static_cast<std::size_t>(c.n_attributes));
    for (int k = 0; k < c.n_attributes; ++k) {
      int v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.attribute_vocab)));
      if (k == 0 && rng.bernoulli(c.attribute_signal)) v = interests[0] % c.attribute_vocab;
      attrs[static_cast<std::size_t>(k)] = v;
    }
    out.attributes.values.push_back(std::move(attrs));

    // Funnel events scheduled for future slots: (slot, item, behavior).
    std::multimap<int, std::pair<int, int>> pending;
    std::vector<InteractionRecord> recs;
    for (int slot = 0; static_cast<int>(recs.size()) < c.seq_len; ++slot) {
      int item, behavior;
      if (!pending.empty() && pending.begin()->first <= slot) {
        std::tie(item, behavior) = pending.begin()->second;
        pending.erase(pending.begin());
      } else {
        // Primary interest carries 60% of the clean traffic.
        int cl = interests[0];
        if (per_user > 1 && !rng.bernoulli(0.6))
          cl = interests[1 + rng.uniform_int(static_cast<std::uint64_t>(per_user - 1))];
        const auto& pool = members[static_cast<std::size_t>(cl)];
        item = pool[rng.uniform_int(pool.size())];
        behavior = 0;
      }
      recs.push_back({u, item, start + slot, behavior});
      if (behavior + 1 < c.n_behaviors) {
        const bool primary = out.item_cluster[static_cast<std::size_t>(item)] == interests[0];
        const double p = std::min(0.95, escalate(behavior) * propensity * (primary ? 1.4 : 0.6));
        if (rng.bernoulli(p)) {
          const int delay = 1 + static_cast<int>(rng.uniform_int(5));
          pending.emplace(slot + delay, std::make_pair(item, behavior + 1));
        }
      }
    }
    // Noise: click-type records replaced by uniformly random catalog items.
    for (auto& r : recs)
      if (r.behavior == 0 && rng.bernoulli(c.noise_rate))
        r.item = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(c.n_items)));
    log.records.insert(log.records.end(), recs.begin(), recs.end());
    out.user_interests.push_back(std::move(interests));
  }
  log.user_ids.resize(static_cast<std::size_t>(c.n_users));
  std::iota(log.user_ids.begin(), log.user_ids.end(), 0);
  log.item_ids.resize(static_cast<std::size_t>(c.n_items));
  std::iota(log.item_ids.begin(), log.item_ids.end(), 0);
  log.index();
  return out;
}

}  // namespace mbp::data
