#include "mbp/config.hpp"
#include "test_util.hpp"

#include <array>
#include <cstdio>
#include <memory>

#include "doctest.h"

using namespace mbp;

namespace {

struct Command {
  int status = -1;
  std::string output;
};

Command run_cli(const std::string& args) {
  const std::string cmd = std::string(MBP_CLI_PATH) + " " + args + " 2>&1";
  Command out;
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  REQUIRE(pipe);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) out.output += buf.data();
  out.status = pclose(pipe.release());
  return out;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("an empty file gives the defaults") {
    test::TempDir dir;
    const RunConfig c = resolve_config(dir.write("empty.json", ""));
    CHECK(c.tree == default_config());
    CHECK(c.fingerprint() == RunConfig{}.fingerprint());
    const RunConfig b = resolve_config(dir.write("braces.json", "{}"));
    CHECK(b.tree == default_config());
  }

  TEST_CASE("precedence is flag over file over default") {
    test::TempDir dir;
    const auto file = dir.write("c.json", R"({"tune": {"lambda": 0.5}, "model": {"dim": 16}})");
    const RunConfig from_file = resolve_config(file);
    CHECK(from_file.tune().lambda == 0.5);
    CHECK(from_file.model().dim == 16);
    const RunConfig flagged = resolve_config(file, {"tune.lambda=0.25", "seed=7"});
    CHECK(flagged.tune().lambda == 0.25);
    CHECK(flagged.model().dim == 16);
    CHECK(flagged.seed() == 7);
    CHECK(RunConfig{}.tune().lambda == default_config()["tune"]["lambda"].get<double>());
  }

  TEST_CASE("typos get a suggestion") {
    test::TempDir dir;
    const auto file = dir.write("c.json", R"({"tune": {"lamda": 0.5}})");
    const std::string msg = message_of([&] { resolve_config(file); });
    CHECK(msg.find("lamda") != std::string::npos);
    CHECK(msg.find("did you mean 'tune.lambda'") != std::string::npos);
    const std::string flag = message_of([] { resolve_config(std::nullopt, {"tune.lamda=1"}); });
    CHECK(flag.find("tune.lambda") != std::string::npos);
    CHECK(edit_distance("lamda", "lambda") == 1);
    CHECK(edit_distance("", "abc") == 3);
  }

  TEST_CASE("malformed input is rejected") {
    test::TempDir dir;
    CHECK_THROWS_AS(resolve_config(dir.write("bad.json", "{\"tune\": ")), ConfigError);
    CHECK_THROWS_AS(resolve_config(dir.path / "missing.json"), ConfigError);
    CHECK_THROWS_AS(resolve_config(dir.write("t.json", R"({"tune": {"lambda": "big"}})")), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, {"tune.lambda"}), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.dim=abc"}), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.fft=complex"}).model(), ConfigError);
  }

  TEST_CASE("fingerprints are stable and track the values") {
    const RunConfig a = resolve_config(std::nullopt, {"model.dim=32"});
    const RunConfig b = resolve_config(std::nullopt, {"model.dim=32"});
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint().size() == 16);
    const RunConfig c = resolve_config(std::nullopt, {"model.dim=48"});
    CHECK(a.fingerprint() != c.fingerprint());
    // Tuning keys do not shape the backbone.
    const RunConfig d = resolve_config(std::nullopt, {"model.dim=32", "tune.lambda=0.3"});
    CHECK(a.backbone_fingerprint() == d.backbone_fingerprint());
    CHECK(a.fingerprint() != d.fingerprint());
  }

  TEST_CASE("shipped configs parse") {
    for (const char* name : {"desk.json", "reference.json", "experiment.json"}) {
      CAPTURE(name);
      const RunConfig c = resolve_config(std::filesystem::path(MBP_SOURCE_DIR) / "configs" / name);
      CHECK_NOTHROW(c.model().validate());
      CHECK_NOTHROW(c.tune());
      CHECK_NOTHROW(c.prompt());
    }
  }

  TEST_CASE("command line") {
    test::TempDir dir;
    const Command missing = run_cli("eval --run " + (dir.path / "nothing").string());
    CHECK(missing.status != 0);
    CHECK_FALSE(missing.output.empty());

    const Command bad = run_cli("pretrain --data " + dir.path.string() + " --set tune.lamda=1");
    CHECK(bad.status != 0);
    CHECK(bad.output.find("tune.lambda") != std::string::npos);

    const Command bench = run_cli("bench --repeats 1 --set model.dim=16");
    CHECK(bench.status == 0);
    CHECK(bench.output.find("parameter census") != std::string::npos);
    CHECK(bench.output.find("parameter budget") != std::string::npos);

    const Command help = run_cli("--help");
    CHECK(help.status == 0);
    for (const char* sub : {"synth", "pretrain", "tune", "eval", "export-prompts", "gradcheck", "bench"})
      CHECK(help.output.find(sub) != std::string::npos);
  }
}
