#include "mbp/config.hpp"

#include "mbp/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mbp {

using nlohmann::json;

json default_config() {
  return {
      {"seed", 1},
      {"data", {{"min_count", 20}, {"split_ratio", 0.6}, {"split_mode", "per_user"}, {"target_behavior", -1}}},
      {"synth",
       {{"n_users", 2000},
        {"n_items", 1000},
        {"n_behaviors", 4},
        {"seq_len", 60},
        {"n_latent_interests", 20},
        {"interests_per_user", 2},
        {"noise_rate", 0.2},
        {"n_attributes", 2},
        {"attribute_vocab", 8},
        {"attribute_signal", 0.6}}},
      {"model",
       {{"dim", 64}, {"layers", 4}, {"k", 4}, {"max_len", 64}, {"ffn_mult", 2}, {"fft", "real"}, {"pooling", "last"}}},
      {"pretrain",
       {{"lr", 1e-3},
        {"batch", 128},
        {"max_epochs", 1000},
        {"patience", 20},
        {"min_ctx", 4},
        {"final_only", false},
        {"samples_per_user", 0},
        {"seq_len", 64},
        {"valid_neg", 100},
        {"valid_users", 0}}},
      {"prompt",
       {{"n_factors", 8},
        {"n_tokens", 8},
        {"hidden", 16},
        {"gate", "factor"},
        {"projection", "diagonal"},
        {"gru_len", 32},
        {"use_attributes", true},
        {"use_statistics", true},
        {"use_behaviors", true}}},
      {"tune",
       {{"lr", 1e-3},
        {"batch", 128},
        {"max_epochs", 1000},
        {"patience", 20},
        {"seq_len", 32},
        {"lambda", 0.01},
        {"lambda_e", 1.0},
        {"lambda_p", 1.0},
        {"eps_e2", 1.0},
        {"eps_p2", 1.0},
        {"compactness_sign", "promote_diversity"},
        {"no_denoise", false},
        {"static_prompt", false},
        {"first_layer_only", false},
        {"no_compactness", false},
        {"full_finetune", false},
        {"valid_neg", 100},
        {"samples_per_user", 0}}},
      {"eval", {{"ks", {10, 20}}, {"n_neg", 100}, {"cold_start", false}, {"target_behavior", -1}, {"seed", -1}}},
  };
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

std::string suggestion(const json& obj, const std::string& key) {
  std::string best;
  std::size_t best_d = 3;
  for (const auto& [k, v] : obj.items()) {
    const std::size_t d = edit_distance(key, k);
    if (d < best_d) best_d = d, best = k;
  }
  return best;
}

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return std::string(type_name(a)) == type_name(b);
}

}  // namespace

void merge_config(json& base, const json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  std::vector<std::string> unknown;
  for (const auto& [key, value] : overlay.items()) {
    const std::string kp = join(path, key);
    if (!base.contains(key)) {
      std::string msg = "unknown key '" + kp + "'";
      const std::string hint = suggestion(base, key);
      if (!hint.empty()) msg += " (did you mean '" + join(path, hint) + "'?)";
      unknown.push_back(msg);
      continue;
    }
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, kp);
      continue;
    }
    if (!same_kind(value, slot))
      throw ConfigError(kp + ": expected " + type_name(slot) + ", got " + type_name(value));
    slot = value;
  }
  if (!unknown.empty()) {
    std::string msg;
    for (const auto& u : unknown) msg += (msg.empty() ? "" : "; ") + u;
    throw ConfigError(msg);
  }
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  json* slot = &tree;
  std::string path;
  std::istringstream parts(key);
  std::string part;
  json overlay;
  json* cursor = &overlay;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::string parent = path;
    path = join(path, keys[i]);
    if (!slot->is_object() || !slot->contains(keys[i])) {
      std::string msg = "unknown key '" + path + "'";
      if (slot->is_object()) {
        const std::string hint = suggestion(*slot, keys[i]);
        if (!hint.empty()) msg += " (did you mean '" + join(parent, hint) + "'?)";
      }
      throw ConfigError(msg);
    }
    slot = &(*slot)[keys[i]];
    if (i + 1 < keys.size()) cursor = &(*cursor)[keys[i]];
  }
  try {
    if (slot->is_boolean()) {
      if (text == "true" || text == "1") value = true;
      else if (text == "false" || text == "0") value = false;
      else throw ConfigError(key + ": expected boolean, got '" + text + "'");
    } else if (slot->is_number_integer()) {
      std::size_t used = 0;
      value = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } else if (slot->is_number()) {
      std::size_t used = 0;
      value = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } else if (slot->is_array()) {
      value = json::array();
      std::istringstream items(text);
      std::string item;
      while (std::getline(items, item, ',')) value.push_back(std::stoll(item));
    } else {
      value = text;
    }
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected " + type_name(*slot) + ", got '" + text + "'");
  }
  (*cursor)[keys.back()] = value;
  merge_config(tree, overlay);
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  merge_config(cfg.tree, j);
  return cfg;
}

json read_config_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file '" + file.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + file.string() + "': " + e.what());
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (file) merge_config(cfg.tree, read_config_file(*file));
  for (const auto& o : overrides) apply_override(cfg.tree, o);
  return cfg;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
T get(const json& tree, const char* section, const char* key) {
  return tree.at(section).at(key).get<T>();
}

}  // namespace

std::string RunConfig::fingerprint() const { return hex(fnv1a64(canonical())); }

std::string RunConfig::backbone_fingerprint() const {
  json part = {{"seed", tree.at("seed")},       {"data", tree.at("data")},
               {"synth", tree.at("synth")},     {"model", tree.at("model")},
               {"pretrain", tree.at("pretrain")}, {"no_denoise", tree.at("tune").at("no_denoise")}};
  return hex(fnv1a64(part.dump()));
}

std::uint64_t RunConfig::seed() const { return tree.at("seed").get<std::uint64_t>(); }

data::SynthConfig RunConfig::synth() const {
  data::SynthConfig s;
  s.n_users = get<int>(tree, "synth", "n_users");
  s.n_items = get<int>(tree, "synth", "n_items");
  s.n_behaviors = get<int>(tree, "synth", "n_behaviors");
  s.seq_len = get<int>(tree, "synth", "seq_len");
  s.n_latent_interests = get<int>(tree, "synth", "n_latent_interests");
  s.interests_per_user = get<int>(tree, "synth", "interests_per_user");
  s.noise_rate = get<double>(tree, "synth", "noise_rate");
  s.n_attributes = get<int>(tree, "synth", "n_attributes");
  s.attribute_vocab = get<int>(tree, "synth", "attribute_vocab");
  s.attribute_signal = get<double>(tree, "synth", "attribute_signal");
  s.seed = derive_seed(seed(), "synth");
  return s;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.dim = get<Index>(tree, "model", "dim");
  m.layers = get<int>(tree, "model", "layers");
  m.k = get<int>(tree, "model", "k");
  m.max_len = get<int>(tree, "model", "max_len");
  m.ffn_mult = get<int>(tree, "model", "ffn_mult");
  const auto fft_mode = get<std::string>(tree, "model", "fft");
  if (fft_mode != "real" && fft_mode != "full") throw ConfigError("model.fft: expected 'real' or 'full'");
  m.fft_mode = fft_mode == "full" ? fft::Mode::Full : fft::Mode::Real;
  const auto pooling = get<std::string>(tree, "model", "pooling");
  if (pooling != "last" && pooling != "mean") throw ConfigError("model.pooling: expected 'last' or 'mean'");
  m.pooling = pooling == "mean" ? Pooling::Mean : Pooling::Last;
  m.identity_filter = get<bool>(tree, "tune", "no_denoise");
  return m;
}

PretrainConfig RunConfig::pretrain() const {
  PretrainConfig p;
  p.lr = get<double>(tree, "pretrain", "lr");
  p.batch = get<int>(tree, "pretrain", "batch");
  p.max_epochs = get<int>(tree, "pretrain", "max_epochs");
  p.patience = get<int>(tree, "pretrain", "patience");
  p.min_ctx = get<int>(tree, "pretrain", "min_ctx");
  p.final_only = get<bool>(tree, "pretrain", "final_only");
  p.samples_per_user = get<int>(tree, "pretrain", "samples_per_user");
  p.seq_len = get<Index>(tree, "pretrain", "seq_len");
  p.valid_neg = get<int>(tree, "pretrain", "valid_neg");
  p.valid_users = get<int>(tree, "pretrain", "valid_users");
  return p;
}

PromptConfig RunConfig::prompt() const {
  PromptConfig p;
  p.n_factors = get<int>(tree, "prompt", "n_factors");
  p.n_tokens = get<int>(tree, "prompt", "n_tokens");
  p.hidden = get<Index>(tree, "prompt", "hidden");
  const auto gate = get<std::string>(tree, "prompt", "gate");
  if (gate != "factor" && gate != "full") throw ConfigError("prompt.gate: expected 'factor' or 'full'");
  p.gate = gate == "full" ? GateMode::Full : GateMode::Factor;
  const auto proj = get<std::string>(tree, "prompt", "projection");
  if (proj != "diagonal" && proj != "full") throw ConfigError("prompt.projection: expected 'diagonal' or 'full'");
  p.projection = proj == "full" ? ProjectionMode::Full : ProjectionMode::Diagonal;
  p.gru_len = get<int>(tree, "prompt", "gru_len");
  p.use_attributes = get<bool>(tree, "prompt", "use_attributes");
  p.use_statistics = get<bool>(tree, "prompt", "use_statistics");
  p.use_behaviors = get<bool>(tree, "prompt", "use_behaviors");
  return p;
}

TuneConfig RunConfig::tune() const {
  TuneConfig t;
  t.lr = get<double>(tree, "tune", "lr");
  t.batch = get<int>(tree, "tune", "batch");
  t.max_epochs = get<int>(tree, "tune", "max_epochs");
  t.patience = get<int>(tree, "tune", "patience");
  t.seq_len = get<Index>(tree, "tune", "seq_len");
  t.lambda = get<double>(tree, "tune", "lambda");
  t.weights.lambda_e = get<double>(tree, "tune", "lambda_e");
  t.weights.lambda_p = get<double>(tree, "tune", "lambda_p");
  t.weights.eps_e2 = get<double>(tree, "tune", "eps_e2");
  t.weights.eps_p2 = get<double>(tree, "tune", "eps_p2");
  const auto sign = get<std::string>(tree, "tune", "compactness_sign");
  if (sign != "promote_diversity" && sign != "literal")
    throw ConfigError("tune.compactness_sign: expected 'promote_diversity' or 'literal'");
  t.sign = sign == "literal" ? CompactnessSign::Literal : CompactnessSign::PromoteDiversity;
  t.no_denoise = get<bool>(tree, "tune", "no_denoise");
  t.static_prompt = get<bool>(tree, "tune", "static_prompt");
  t.first_layer_only = get<bool>(tree, "tune", "first_layer_only");
  t.no_compactness = get<bool>(tree, "tune", "no_compactness");
  t.full_finetune = get<bool>(tree, "tune", "full_finetune");
  t.valid_neg = get<int>(tree, "tune", "valid_neg");
  t.samples_per_user = get<int>(tree, "tune", "samples_per_user");
  return t;
}

EvalOptions RunConfig::eval() const {
  EvalOptions e;
  e.ks = tree.at("eval").at("ks").get<std::vector<int>>();
  e.n_neg = get<int>(tree, "eval", "n_neg");
  const auto own = tree.at("eval").at("seed").get<std::int64_t>();
  e.seed = derive_seed(own >= 0 ? static_cast<std::uint64_t>(own) : seed(), "eval");
  e.fingerprint = fingerprint();
  return e;
}

int RunConfig::min_count() const { return get<int>(tree, "data", "min_count"); }
double RunConfig::split_ratio() const { return get<double>(tree, "data", "split_ratio"); }

data::SplitMode RunConfig::split_mode() const {
  const auto m = get<std::string>(tree, "data", "split_mode");
  if (m != "per_user" && m != "global") throw ConfigError("data.split_mode: expected 'per_user' or 'global'");
  return m == "global" ? data::SplitMode::Global : data::SplitMode::PerUser;
}

int RunConfig::target_behavior(int n_behaviors) const {
  const int t = get<int>(tree, "data", "target_behavior");
  const int r = t < 0 ? n_behaviors - 1 : t;
  if (r < 0 || r >= n_behaviors) throw ConfigError("data.target_behavior: " + std::to_string(t) + " not in log");
  return r;
}

int RunConfig::eval_target_behavior(int n_behaviors) const {
  const int t = get<int>(tree, "eval", "target_behavior");
  if (t < 0) return target_behavior(n_behaviors);
  if (t >= n_behaviors) throw ConfigError("eval.target_behavior: " + std::to_string(t) + " not in log");
  return t;
}

bool RunConfig::cold_start() const { return get<bool>(tree, "eval", "cold_start"); }

}  // namespace mbp
