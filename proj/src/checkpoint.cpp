#include "mbp/checkpoint.hpp"

#include "mbp/rng.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace mbp {

namespace {

constexpr char kMagic[8] = {'M', 'B', 'P', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_)
      throw CorruptCheckpoint("'" + path_ + "' is truncated at byte " + std::to_string(pos_));
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

const Mat& ParamFile::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw CorruptCheckpoint("missing tensor '" + name + "'");
}

bool ParamFile::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.first == name) return true;
  return false;
}

void write_param_file(const std::filesystem::path& path, const ParamFile& file) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = file.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint64_t>(out, file.tensors.size());
  for (const auto& [name, m] : file.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::int64_t>(out, m.rows());
    put<std::int64_t>(out, m.cols());
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write '" + path.string() + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write failed for '" + path.string() + "'");
}

ParamFile read_param_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  Reader r(bytes, path.string());
  if (r.take(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw CorruptCheckpoint("'" + path.string() + "' is not a parameter file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IncompatibleCheckpoint("'" + path.string() + "' has version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  ParamFile file;
  const auto header_len = r.get<std::uint64_t>();
  try {
    file.header = nlohmann::json::parse(r.take(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptCheckpoint("'" + path.string() + "' has a malformed header: " + e.what());
  }
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.take(name_len);
    const auto rows = r.get<std::int64_t>();
    const auto cols = r.get<std::int64_t>();
    if (rows < 0 || cols < 0) throw CorruptCheckpoint("'" + path.string() + "' has a negative tensor shape");
    const auto count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    if (cols != 0 && count / static_cast<std::size_t>(cols) != static_cast<std::size_t>(rows))
      throw CorruptCheckpoint("'" + path.string() + "' has an oversized tensor");
    r.need(count * sizeof(double));
    Mat m(rows, cols);
    std::memcpy(m.data(), r.take(count * sizeof(double)).data(), count * sizeof(double));
    file.tensors.emplace_back(std::move(name), std::move(m));
  }
  const std::size_t body = r.pos();
  const auto checksum = r.get<std::uint64_t>();
  if (checksum != fnv1a64(std::string_view(bytes.data(), body)))
    throw CorruptCheckpoint("'" + path.string() + "' failed its checksum");
  if (r.pos() != bytes.size()) throw CorruptCheckpoint("'" + path.string() + "' has trailing bytes");
  return file;
}

nlohmann::json model_config_json(const ModelConfig& cfg) {
  return {{"dim", cfg.dim},
          {"layers", cfg.layers},
          {"k", cfg.k},
          {"n_behaviors", cfg.n_behaviors},
          {"n_items", cfg.n_items},
          {"max_len", cfg.max_len},
          {"ffn_mult", cfg.ffn_mult},
          {"fft", cfg.fft_mode == fft::Mode::Real ? "real" : "full"},
          {"pooling", cfg.pooling == Pooling::Last ? "last" : "mean"},
          {"identity_filter", cfg.identity_filter}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.dim = j.at("dim").get<Index>();
    c.layers = j.at("layers").get<int>();
    c.k = j.at("k").get<int>();
    c.n_behaviors = j.at("n_behaviors").get<int>();
    c.n_items = j.at("n_items").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.fft_mode = j.at("fft").get<std::string>() == "full" ? fft::Mode::Full : fft::Mode::Real;
    c.pooling = j.at("pooling").get<std::string>() == "mean" ? Pooling::Mean : Pooling::Last;
    c.identity_filter = j.at("identity_filter").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ParamFile file;
  file.header = {{"kind", "backbone"},
                 {"model", model_config_json(ckpt.model.config)},
                 {"epoch", ckpt.epoch},
                 {"adam_steps", ckpt.adam_steps},
                 {"rng_state", ckpt.rng_state},
                 {"fingerprint", ckpt.fingerprint}};
  auto& model = const_cast<EbmParams&>(ckpt.model);
  const auto params = model.params();
  for (Param* p : params) file.tensors.emplace_back(p->name, p->value);
  for (std::size_t i = 0; i < ckpt.adam_m.size() && i < params.size(); ++i) {
    file.tensors.emplace_back("adam.m/" + params[i]->name, ckpt.adam_m[i]);
    file.tensors.emplace_back("adam.v/" + params[i]->name, ckpt.adam_v[i]);
  }
  write_param_file(path, file);
}

void assign_params(const ParamFile& file, std::span<Param* const> params, const std::string& prefix) {
  for (Param* p : params) {
    const Mat& m = file.tensor(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw IncompatibleCheckpoint("tensor '" + p->name + "' has shape " + std::to_string(m.rows()) + "x" +
                                   std::to_string(m.cols()) + ", expected " + std::to_string(p->value.rows()) + "x" +
                                   std::to_string(p->value.cols()));
    p->value = m;
    p->zero_grad();
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const ParamFile file = read_param_file(path);
  if (file.header.value("kind", "") != "backbone")
    throw IncompatibleCheckpoint("'" + path.string() + "' is not a backbone checkpoint");
  Checkpoint ckpt;
  ckpt.model = EbmParams(model_config_from_json(file.header.at("model")));
  const auto params = ckpt.model.params();
  assign_params(file, params);
  ckpt.epoch = file.header.value("epoch", 0);
  ckpt.adam_steps = file.header.value("adam_steps", 0LL);
  ckpt.rng_state = file.header.value("rng_state", "");
  ckpt.fingerprint = file.header.value("fingerprint", "");
  if (file.has("adam.m/" + params.front()->name)) {
    for (Param* p : params) {
      ckpt.adam_m.push_back(file.tensor("adam.m/" + p->name));
      ckpt.adam_v.push_back(file.tensor("adam.v/" + p->name));
    }
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected,
                           const std::string& expected_fingerprint) {
  Checkpoint ckpt = load_checkpoint(path);
  const nlohmann::json have = model_config_json(ckpt.model.config);
  const nlohmann::json want = model_config_json(expected);
  std::string diffs;
  for (const auto& [key, value] : want.items()) {
    if (have.at(key) == value) continue;
    if (!diffs.empty()) diffs += ", ";
    diffs += key + " (checkpoint " + have.at(key).dump() + ", config " + value.dump() + ")";
  }
  if (!diffs.empty()) throw IncompatibleCheckpoint("'" + path.string() + "' does not match the configuration: " + diffs);
  if (!expected_fingerprint.empty() && ckpt.fingerprint != expected_fingerprint)
    throw IncompatibleCheckpoint("'" + path.string() + "' has fingerprint " + ckpt.fingerprint +
                                 ", configuration expects " + expected_fingerprint);
  return ckpt;
}

}  // namespace mbp
