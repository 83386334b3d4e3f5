#include "mbp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace mbp::pipeline {

using nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FileError("'" + path.string() + "': " + e.what());
  }
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw FileError(what + " not found: '" + path.string() + "'");
}

volatile double g_sink = 0.0;

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw FileError("write failed for '" + path.string() + "'");
}

Dataset load_dataset(const fs::path& path) {
  Dataset ds;
  fs::path interactions = path, attributes;
  if (fs::is_directory(path)) {
    interactions = path / "interactions.tsv";
    attributes = path / "attributes.tsv";
  }
  require_file(interactions, "interaction file");
  ds.log = data::load_interactions(interactions);
  if (!attributes.empty() && fs::exists(attributes))
    ds.attributes = data::load_attributes(attributes, ds.log.user_ids);
  else
    ds.attributes = data::empty_attributes(ds.log.n_users);
  return ds;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  data::save_interactions(dir / "interactions.tsv", ds.log);
  data::save_id_map(dir / "id_map.tsv", ds.log);
  // Attribute rows are keyed by original user id.
  std::ostringstream os;
  os << "#vocab";
  for (int v : ds.attributes.vocab_sizes) os << '\t' << v;
  os << '\n';
  for (std::size_t u = 0; u < ds.attributes.values.size(); ++u) {
    os << (u < ds.log.user_ids.size() ? ds.log.user_ids[u] : static_cast<std::int64_t>(u));
    for (int v : ds.attributes.values[u]) {
      os << '\t';
      if (v < 0)
        os << "None";
      else
        os << v;
    }
    os << '\n';
  }
  write_text(dir / "attributes.tsv", os.str());
}

Dataset synthesize(const RunConfig& cfg) {
  data::SyntheticCorpus corpus = data::generate_synthetic(cfg.synth());
  return {std::move(corpus.log), std::move(corpus.attributes)};
}

Prepared prepare(const Dataset& ds, const RunConfig& cfg) {
  Prepared p;
  p.log = data::filter_min_interactions(ds.log, cfg.min_count());
  if (p.log.empty()) throw data::DataError("no users left after the minimum-interaction filter");
  p.target_behavior = cfg.target_behavior(p.log.n_behaviors);
  p.log.target_behavior = p.target_behavior;

  std::unordered_map<std::int64_t, std::size_t> source;
  for (std::size_t u = 0; u < ds.log.user_ids.size(); ++u) source.emplace(ds.log.user_ids[u], u);
  p.attributes = data::empty_attributes(p.log.n_users, ds.attributes.vocab_sizes);
  for (std::size_t u = 0; u < p.log.user_ids.size(); ++u) {
    const auto it = source.find(p.log.user_ids[u]);
    if (it != source.end() && it->second < ds.attributes.values.size())
      p.attributes.values[u] = ds.attributes.values[it->second];
  }

  p.split = data::temporal_split(p.log, cfg.split_ratio(), cfg.split_mode());
  p.spec = data::make_split_spec(p.split.pretrain, p.split.finetune, p.target_behavior);
  return p;
}

ModelConfig model_config(const RunConfig& cfg, const data::InteractionLog& log) {
  ModelConfig m = cfg.model();
  m.n_items = log.n_items;
  m.n_behaviors = log.n_behaviors;
  m.validate();
  return m;
}

TuneContext tune_context(const Prepared& p) { return {&p.spec, &p.attributes, p.target_behavior}; }

PretrainResult pretrain(const RunConfig& cfg, const Prepared& p) {
  return run_pretraining(p.spec.pretrain, model_config(cfg, p.log), cfg.pretrain(), cfg.seed(),
                         cfg.backbone_fingerprint());
}

TuneResult tune(const RunConfig& cfg, const Prepared& p, const EbmParams& backbone) {
  return run_tuning(backbone, tune_context(p), cfg.prompt(), cfg.tune(), cfg.seed());
}

namespace {

data::SplitSpec eval_spec(const RunConfig& cfg, const Prepared& p, int& target) {
  target = cfg.eval_target_behavior(p.log.n_behaviors);
  data::SplitSpec spec = target == p.target_behavior
                             ? p.spec
                             : data::make_split_spec(p.split.pretrain, p.split.finetune, target);
  if (cfg.cold_start()) spec = cold_start_subset(spec, target);
  return spec;
}

}  // namespace

EvalReport evaluate_model(const RunConfig& cfg, const Prepared& p, EbmParams& model, PromptParams* prompts,
                          const TuneConfig& tune_cfg) {
  int target = 0;
  const data::SplitSpec spec = eval_spec(cfg, p, target);
  const TuneContext ctx{&spec, &p.attributes, target};
  EvalReport report = evaluate(spec, make_scorer(model, prompts, ctx, tune_cfg), cfg.eval());
  report.target_behavior = target;
  return report;
}

double prompt_diversity(EbmParams& model, PromptParams& prompts, const Prepared& p, const TuneConfig& cfg,
                        int max_users) {
  const TuneContext ctx = tune_context(p);
  double total = 0.0;
  int n = 0;
  for (const auto& us : p.spec.users) {
    if (n >= max_users) break;
    const PromptExport ex = export_user_prompts(model, prompts, ctx, us.user, cfg);
    if (ex.p.rows() < 2) continue;
    total += mean_pairwise_cosine(ex.p);
    ++n;
  }
  return n > 0 ? total / n : 0.0;
}

json prompt_config_json(const PromptConfig& c) {
  return {{"n_factors", c.n_factors},
          {"n_tokens", c.n_tokens},
          {"hidden", c.hidden},
          {"gate", c.gate == GateMode::Full ? "full" : "factor"},
          {"projection", c.projection == ProjectionMode::Full ? "full" : "diagonal"},
          {"gru_len", c.gru_len},
          {"use_attributes", c.use_attributes},
          {"use_statistics", c.use_statistics},
          {"use_behaviors", c.use_behaviors}};
}

PromptConfig prompt_config_from_json(const json& j) {
  PromptConfig c;
  c.n_factors = j.at("n_factors").get<int>();
  c.n_tokens = j.at("n_tokens").get<int>();
  c.hidden = j.at("hidden").get<Index>();
  c.gate = j.at("gate").get<std::string>() == "full" ? GateMode::Full : GateMode::Factor;
  c.projection = j.at("projection").get<std::string>() == "full" ? ProjectionMode::Full : ProjectionMode::Diagonal;
  c.gru_len = j.at("gru_len").get<int>();
  c.use_attributes = j.at("use_attributes").get<bool>();
  c.use_statistics = j.at("use_statistics").get<bool>();
  c.use_behaviors = j.at("use_behaviors").get<bool>();
  return c;
}

json tune_config_json(const TuneConfig& c) {
  return {{"seq_len", c.seq_len},
          {"lambda", c.lambda},
          {"compactness_sign", c.sign == CompactnessSign::Literal ? "literal" : "promote_diversity"},
          {"no_denoise", c.no_denoise},
          {"static_prompt", c.static_prompt},
          {"first_layer_only", c.first_layer_only},
          {"no_compactness", c.no_compactness},
          {"full_finetune", c.full_finetune}};
}

namespace {

TuneConfig tune_config_from_json(const json& j) {
  TuneConfig c;
  c.seq_len = j.at("seq_len").get<Index>();
  c.lambda = j.at("lambda").get<double>();
  c.sign = j.at("compactness_sign").get<std::string>() == "literal" ? CompactnessSign::Literal
                                                                       : CompactnessSign::PromoteDiversity;
  c.no_denoise = j.at("no_denoise").get<bool>();
  c.static_prompt = j.at("static_prompt").get<bool>();
  c.first_layer_only = j.at("first_layer_only").get<bool>();
  c.no_compactness = j.at("no_compactness").get<bool>();
  c.full_finetune = j.at("full_finetune").get<bool>();
  return c;
}

}  // namespace

void save_prompts(const fs::path& path, PromptParams& prompts, const TuneConfig& tune_cfg,
                  const std::string& backbone_fingerprint) {
  ParamFile file;
  file.header = {{"kind", "prompts"},
                 {"prompt", prompt_config_json(prompts.config)},
                 {"dim", prompts.dim},
                 {"layers", prompts.layers},
                 {"n_behaviors", prompts.n_behaviors},
                 {"attr_vocab", prompts.attr_vocab},
                 {"tune", tune_config_json(tune_cfg)},
                 {"backbone_fingerprint", backbone_fingerprint}};
  for (Param* p : prompts.all_params()) file.tensors.emplace_back(p->name, p->value);
  file.tensors.emplace_back("stat_mean", prompts.stat_mean);
  file.tensors.emplace_back("stat_scale", prompts.stat_scale);
  write_param_file(path, file);
}

PromptFile load_prompts(const fs::path& path) {
  require_file(path, "prompt file");
  const ParamFile file = read_param_file(path);
  if (file.header.value("kind", "") != "prompts")
    throw IncompatibleCheckpoint("'" + path.string() + "' is not a prompt file");
  PromptFile out;
  const auto& h = file.header;
  out.prompts = PromptParams(prompt_config_from_json(h.at("prompt")), h.at("dim").get<Index>(),
                             h.at("layers").get<int>(), h.at("n_behaviors").get<int>(),
                             h.at("attr_vocab").get<std::vector<int>>());
  // The constructor may have disabled sources; restore the stored flags.
  out.prompts.config = prompt_config_from_json(h.at("prompt"));
  const auto params = out.prompts.all_params();
  assign_params(file, params);
  out.prompts.stat_mean = file.tensor("stat_mean");
  out.prompts.stat_scale = file.tensor("stat_scale");
  out.tune = tune_config_from_json(h.at("tune"));
  out.backbone_fingerprint = h.value("backbone_fingerprint", "");
  return out;
}

fs::path create_run_dir(const fs::path& root, const RunConfig& cfg) {
  fs::create_directories(root);
  const std::string base = cfg.fingerprint().substr(0, 12) + "-" + utc_stamp();
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  write_text(dir / kConfigFile, cfg.tree.dump(2) + "\n");
  write_text(root / "LATEST", dir.filename().string() + "\n");
  return dir;
}

fs::path resolve_run_dir(const fs::path& path) {
  if (fs::exists(path / kBackboneFile)) return path;
  if (fs::exists(path / "LATEST")) {
    std::string name = read_text(path / "LATEST");
    name.erase(name.find_last_not_of(" \t\r\n") + 1);
    const fs::path dir = path / name;
    if (fs::exists(dir / kBackboneFile)) return dir;
    throw FileError("backbone checkpoint not found: '" + (dir / kBackboneFile).string() + "'");
  }
  throw FileError("backbone checkpoint not found: '" + (path / kBackboneFile).string() + "'");
}

json run_config_tree(const fs::path& run_dir) {
  require_file(run_dir / kConfigFile, "run configuration");
  return read_json(run_dir / kConfigFile);
}

fs::path run_data_path(const fs::path& run_dir) {
  require_file(run_dir / kRunInfoFile, "run information");
  return fs::path(read_json(run_dir / kRunInfoFile).at("data").get<std::string>());
}

fs::path synth_stage(const RunConfig& cfg, const fs::path& out_dir) {
  const Dataset ds = synthesize(cfg);
  save_dataset(out_dir, ds);
  json echo = {{"seed", cfg.tree.at("seed")}, {"synth", cfg.tree.at("synth")},
               {"records", ds.log.size()},     {"users", ds.log.n_users},
               {"items", ds.log.n_items},      {"behaviors", ds.log.n_behaviors}};
  write_text(out_dir / "synth.json", echo.dump(2) + "\n");
  return out_dir;
}

namespace {

json split_summary(const Prepared& p) {
  return {{"users", p.log.n_users},
          {"items", p.log.n_items},
          {"records", p.log.size()},
          {"pretrain_records", p.split.pretrain.size()},
          {"finetune_records", p.split.finetune.size()},
          {"flagged_users", p.split.flagged_users.size()},
          {"eval_users", p.spec.users.size()},
          {"excluded_users", p.spec.excluded_users},
          {"target_behavior", p.target_behavior}};
}

Checkpoint load_backbone(const RunConfig& cfg, const fs::path& run_dir, const data::InteractionLog& log) {
  const fs::path path = run_dir / kBackboneFile;
  require_file(path, "backbone checkpoint");
  return load_checkpoint(path, model_config(cfg, log), cfg.backbone_fingerprint());
}

}  // namespace

fs::path pretrain_stage(const RunConfig& cfg, const fs::path& data_path, const fs::path& runs_root) {
  const Prepared p = prepare(load_dataset(data_path), cfg);
  const fs::path dir = create_run_dir(runs_root, cfg);
  const json info = {{"data", fs::absolute(data_path).lexically_normal().string()},
                     {"fingerprint", cfg.fingerprint()},
                     {"backbone_fingerprint", cfg.backbone_fingerprint()}};
  write_text(dir / kRunInfoFile, info.dump(2) + "\n");
  write_text(dir / "split.json", split_summary(p).dump(2) + "\n");
  const PretrainResult res = pretrain(cfg, p);
  save_checkpoint(dir / kBackboneFile, res.checkpoint);
  write_text(dir / "pretrain_curve.csv", curve_csv(res.curve));
  return dir;
}

fs::path tune_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path) {
  const Prepared p = prepare(load_dataset(data_path), cfg);
  const Checkpoint ckpt = load_backbone(cfg, run_dir, p.log);
  const TuneConfig tcfg = cfg.tune();
  TuneResult res = tune(cfg, p, ckpt.model);
  save_prompts(run_dir / kPromptFile, res.prompts, tcfg, cfg.backbone_fingerprint());
  if (tcfg.full_finetune) {
    Checkpoint tuned;
    tuned.model = res.model;
    tuned.fingerprint = ckpt.fingerprint;
    save_checkpoint(run_dir / kTunedBackboneFile, tuned);
  }
  write_text(run_dir / "tune_curve.csv", curve_csv(res.curve));
  const ParamBudget b = param_budget(res.model, res.prompts, tcfg);
  const json summary = {{"trainable_params", b.trainable},
                        {"total_params", b.total},
                        {"ratio", b.ratio},
                        {"best_epoch", res.best_epoch},
                        {"seconds_per_epoch", res.seconds_per_epoch},
                        {"flagged_users", res.flagged_users},
                        {"tune", cfg.tree.at("tune")},
                        {"prompt", cfg.tree.at("prompt")}};
  write_text(run_dir / "tune.json", summary.dump(2) + "\n");
  return run_dir;
}

EvalReport eval_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path,
                      const EvalStageOptions& options) {
  const Prepared p = prepare(load_dataset(data_path), cfg);
  Checkpoint ckpt = load_backbone(cfg, run_dir, p.log);
  EbmParams model = std::move(ckpt.model);
  std::optional<PromptFile> prompts;
  TuneConfig tcfg = cfg.tune();
  if (!options.backbone_only) {
    prompts = load_prompts(run_dir / kPromptFile);
    if (prompts->backbone_fingerprint != cfg.backbone_fingerprint())
      throw IncompatibleCheckpoint("prompt file was tuned against backbone " + prompts->backbone_fingerprint +
                                   ", run expects " + cfg.backbone_fingerprint());
    tcfg = prompts->tune;
    if (tcfg.full_finetune) model = load_checkpoint(run_dir / kTunedBackboneFile).model;
  }
  const EvalReport report = evaluate_model(cfg, p, model, prompts ? &prompts->prompts : nullptr, tcfg);
  write_text(run_dir / "eval_report.csv", report.to_csv());
  write_text(run_dir / "eval_report.txt", report.to_table());
  return report;
}

fs::path export_stage(const RunConfig& cfg, const fs::path& run_dir, const fs::path& data_path,
                      std::vector<int> users, int limit) {
  const Prepared p = prepare(load_dataset(data_path), cfg);
  Checkpoint ckpt = load_backbone(cfg, run_dir, p.log);
  PromptFile pf = load_prompts(run_dir / kPromptFile);
  if (pf.tune.full_finetune) ckpt.model = load_checkpoint(run_dir / kTunedBackboneFile).model;
  if (users.empty())
    for (const auto& us : p.spec.users) {
      if (static_cast<int>(users.size()) >= limit) break;
      users.push_back(us.user);
    }
  const TuneContext ctx = tune_context(p);
  std::ostringstream os;
  os << "user,kind,layer,row";
  for (Index j = 0; j < ckpt.model.config.dim; ++j) os << ",v" << j;
  os << '\n';
  char buf[32];
  auto emit = [&](int user, const char* kind, int layer, const Mat& m) {
    for (Index r = 0; r < m.rows(); ++r) {
      os << user << ',' << kind << ',' << layer << ',' << r;
      for (Index j = 0; j < m.cols(); ++j) {
        std::snprintf(buf, sizeof buf, ",%.10g", m(r, j));
        os << buf;
      }
      os << '\n';
    }
  };
  for (int u : users) {
    if (u < 0 || u >= p.spec.finetune.n_users) throw data::DataError("export: unknown user " + std::to_string(u));
    const PromptExport ex = export_user_prompts(ckpt.model, pf.prompts, ctx, u, pf.tune);
    emit(u, "p", -1, ex.p);
    emit(u, "e", -1, ex.e);
    for (std::size_t l = 0; l < ex.tokens.size(); ++l) emit(u, "token", static_cast<int>(l), ex.tokens[l]);
  }
  const fs::path out = run_dir / "prompts_export.csv";
  write_text(out, os.str());
  return out;
}

std::vector<ScalingRow> time_scaling(Index dim, int k, std::span<const Index> lengths, int repeats,
                                     std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "bench");
  EflParams efl("bench", dim, k);
  efl.init(rng);
  std::vector<ScalingRow> rows;
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  for (Index len : lengths) {
    Mat x(len, dim);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    std::vector<double> te, ta;
    for (int r = 0; r < std::max(1, repeats); ++r) {
      auto t0 = std::chrono::steady_clock::now();
      g_sink = efl_forward(x, efl, fft::Mode::Real)(0, 0);
      auto t1 = std::chrono::steady_clock::now();
      g_sink = attention_reference(x)(0, 0);
      auto t2 = std::chrono::steady_clock::now();
      te.push_back(std::chrono::duration<double>(t1 - t0).count());
      ta.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    rows.push_back({len, median(te), median(ta)});
  }
  return rows;
}

std::vector<BudgetRow> budget_table(const RunConfig& cfg, const data::InteractionLog& log,
                                    const std::vector<int>& attr_vocab) {
  EbmParams model(model_config(cfg, log));
  std::vector<BudgetRow> rows;
  auto add = [&](const std::string& name, PromptConfig pc, TuneConfig tc) {
    EbmParams m = model;
    m.config.identity_filter = tc.no_denoise;
    PromptParams prompts(pc, m.config.dim, m.config.layers, m.config.n_behaviors,
                         pc.use_attributes ? attr_vocab : std::vector<int>{});
    rows.push_back({name, param_budget(m, prompts, tc)});
  };
  const PromptConfig pc = cfg.prompt();
  TuneConfig tc = cfg.tune();
  tc.full_finetune = false;
  add("prompt tuning", pc, tc);
  PromptConfig literal = pc;
  literal.hidden = 0;
  literal.gate = GateMode::Full;
  literal.projection = ProjectionMode::Full;
  add("prompt tuning, literal shapes", literal, tc);
  TuneConfig st = tc;
  st.static_prompt = true;
  add("static prompt", pc, st);
  TuneConfig fl = tc;
  fl.first_layer_only = true;
  add("first layer only", pc, fl);
  TuneConfig ff = tc;
  ff.full_finetune = true;
  add("full finetune", pc, ff);
  return rows;
}

std::string bench_report(const RunConfig& cfg, const std::optional<fs::path>& data_path, int repeats) {
  std::ostringstream os;
  char buf[256];
  const ModelConfig mc = cfg.model();
  os << "# filter parameter census (d=" << mc.dim << ", k=" << mc.k << ")\n";
  os << "length\tweights\tbiases\tmixer_slice\ttotal\tclosed_form\n";
  for (Index len : {16, 64, 256}) {
    const EflCensus c = efl_census(mc.dim, mc.k, len);
    const double d = static_cast<double>(mc.dim);
    std::snprintf(buf, sizeof buf, "%lld\t%lld\t%lld\t%lld\t%lld\t%.0f\n", static_cast<long long>(len),
                  static_cast<long long>(c.weights), static_cast<long long>(c.biases),
                  static_cast<long long>(c.mixer_slice), static_cast<long long>(c.total()),
                  (1.0 + 4.0 / mc.k) * d * d + 4.0 * d);
    os << buf;
  }
  os << "\n# forward time scaling (d=64, k=4, median of " << repeats << ")\n";
  os << "length\tfilter_s\tattention_s\tfilter_ratio\tattention_ratio\n";
  const Index lengths[] = {256, 512, 1024};
  const auto rows = time_scaling(64, 4, lengths, repeats, cfg.seed());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double fr = i > 0 ? rows[i].efl_seconds / rows[i - 1].efl_seconds : 0.0;
    const double ar = i > 0 ? rows[i].attention_seconds / rows[i - 1].attention_seconds : 0.0;
    std::snprintf(buf, sizeof buf, "%lld\t%.6f\t%.6f\t%.3f\t%.3f\n", static_cast<long long>(rows[i].length),
                  rows[i].efl_seconds, rows[i].attention_seconds, fr, ar);
    os << buf;
  }

  data::InteractionLog log;
  std::vector<int> vocab;
  std::optional<Prepared> prepared;
  if (data_path) {
    prepared = prepare(load_dataset(*data_path), cfg);
    log = prepared->log;
    vocab = prepared->attributes.vocab_sizes;
  } else {
    const auto sc = cfg.synth();
    log.n_items = sc.n_items;
    log.n_behaviors = sc.n_behaviors;
    vocab.assign(static_cast<std::size_t>(sc.n_attributes), sc.attribute_vocab);
  }
  os << "\n# parameter budget (n_items=" << log.n_items << ")\n";
  os << "variant\ttrainable\ttotal\tratio\n";
  for (const auto& r : budget_table(cfg, log, vocab)) {
    std::snprintf(buf, sizeof buf, "%s\t%lld\t%lld\t%.4f%%\n", r.variant.c_str(),
                  static_cast<long long>(r.budget.trainable), static_cast<long long>(r.budget.total),
                  100.0 * r.budget.ratio);
    os << buf;
  }

  if (prepared) {
    RunConfig one = cfg;
    one.tree["pretrain"]["max_epochs"] = 1;
    one.tree["tune"]["max_epochs"] = 1;
    const PretrainResult pre = pretrain(one, *prepared);
    os << "\n# tuning time per epoch (one epoch each)\n";
    os << "variant\tseconds_per_epoch\n";
    for (bool full : {false, true}) {
      one.tree["tune"]["full_finetune"] = full;
      const TuneResult res = tune(one, *prepared, pre.checkpoint.model);
      std::snprintf(buf, sizeof buf, "%s\t%.4f\n", full ? "full finetune" : "prompt tuning", res.seconds_per_epoch);
      os << buf;
    }
  }
  return os.str();
}

}  // namespace mbp::pipeline
