#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "argd/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(ARGD_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (const std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

std::vector<fs::path> subdirs(const fs::path& root) {
  std::vector<fs::path> v;
  if (!fs::exists(root)) return v;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) v.push_back(e.path());
  return v;
}

// One small attack run shared by every case in this file.
struct Workspace {
  fs::path root = fs::temp_directory_path() / "argd-test-cli";
  fs::path config = root / "tiny.toml";
  fs::path out = root / "runs";
  fs::path attack_dir;
  fs::path checkpoint;
  std::string attack_stdout;

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(config) << R"([run]
name = "tiny"
seed = 1

[data]
train_size = 200
test_size = 100
clean_ratio = 0.1

[model]
base_width = 4

[train]
epochs = 1
batch_size = 32

[defense]
epochs = 1
batch_size = 32
embed_dim = 8

[ablation]
seeds = [1]
ratios = [0.1]
)";
    const auto r = run(args("attack"));
    REQUIRE(r.code == 0);
    attack_stdout = r.out;
    attack_dir = out / "attack-tiny-s1";
    checkpoint = attack_dir / "checkpoints" / "backdoored.ckpt";
  }

  std::string args(const std::string& verb, const std::string& extra = "") const {
    return "--config " + config.string() + " --out " + out.string() + " " + verb + " " + extra;
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("cli: attack writes the run directory" * doctest::test_suite("contract")) {
  auto& w = workspace();
  for (const char* f : {"config.toml", "invocation.json", "poison_manifest.json", "metrics.jsonl", "report.json",
                        "checkpoints/backdoored.ckpt"})
    CHECK(fs::exists(w.attack_dir / f));
  CHECK(w.attack_stdout.find("backdoored: ACC") != std::string::npos);
  const auto manifest = read_json(w.attack_dir / "poison_manifest.json");
  CHECK(manifest["poisoned_count"] == 40);
  const auto report = read_json(w.attack_dir / "report.json");
  CHECK(report["backdoored"].contains("asr"));
}

TEST_CASE("cli: configuration errors exit with code 2" * doctest::test_suite("contract")) {
  auto& w = workspace();
  auto r = run("--config /nonexistent/argd.toml attack");
  CHECK(r.code == 2);
  CHECK(r.out.find("config") != std::string::npos);
  CHECK(run(w.args("attack", "") + " --set train.epoch=1").code == 2);
  CHECK(run(w.args("defend", "--method bogus --checkpoint " + w.checkpoint.string())).code == 2);
  CHECK(run("--config " + w.config.string() + " --device cuda attack").code == 2);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("cli: the same seed reproduces the metrics in a fresh directory" * doctest::test_suite("contract")) {
  auto& w = workspace();
  const auto r = run(w.args("attack") + " --seed 1");
  REQUIRE(r.code == 0);
  const auto again = w.out / "attack-tiny-s1-2";
  REQUIRE(fs::exists(again));
  CHECK(slurp(again / "metrics.jsonl") == slurp(w.attack_dir / "metrics.jsonl"));
  CHECK(slurp(again / "checkpoints/backdoored.ckpt") == slurp(w.checkpoint));

  SUBCASE("re-running from the config snapshot reproduces the metrics") {
    const auto snap = run("--config " + (w.attack_dir / "config.toml").string() + " --out " + w.out.string() +
                          " attack");
    REQUIRE(snap.code == 0);
    CHECK(slurp(w.out / "attack-tiny-s1-3" / "metrics.jsonl") == slurp(w.attack_dir / "metrics.jsonl"));
  }
}

TEST_CASE("cli: evaluate reproduces the attack metrics" * doctest::test_suite("contract")) {
  auto& w = workspace();
  const auto r = run(w.args("evaluate", "--checkpoint " + w.checkpoint.string()));
  REQUIRE(r.code == 0);
  const auto eval = read_json(w.out / "evaluate-tiny-s1" / "report.json");
  const auto attack = read_json(w.attack_dir / "report.json")["backdoored"];
  CHECK(eval["acc"] == attack["acc"]);
  CHECK(eval["asr"] == attack["asr"]);
}

TEST_CASE("cli: defend dispatches each method and supports dry runs" * doctest::test_suite("contract")) {
  auto& w = workspace();
  const auto before = subdirs(w.out).size();
  const auto dry = run(w.args("defend", "--dry-run --checkpoint " + w.checkpoint.string()));
  REQUIRE(dry.code == 0);
  CHECK(dry.out.find("[defense]") != std::string::npos);
  CHECK(subdirs(w.out).size() == before);

  const auto attack_files = tree(w.attack_dir);
  for (const std::string method : {"argd", "nad", "finetune"}) {
    CAPTURE(method);
    const auto r = run(w.args("defend", "--method " + method + " --clean-ratio 0.05 --checkpoint " +
                                            w.checkpoint.string()));
    REQUIRE(r.code == 0);
    CHECK(r.out.find(method + ": ACC") != std::string::npos);
  }
  const auto dirs = subdirs(w.out);
  int reports = 0;
  for (const auto& d : dirs) {
    if (d.filename().string().rfind("defend-", 0) != 0) continue;
    ++reports;
    const auto report = read_json(d / "report.json");
    CHECK(report.contains("purified"));
    CHECK(fs::exists(d / "checkpoints/purified.ckpt"));
    CHECK(fs::exists(d / "subset_indices.txt"));
    CHECK(fs::exists(d / "arg_snapshot.json"));
  }
  CHECK(reports == 3);
  CHECK(tree(w.attack_dir) == attack_files);
}

TEST_CASE("cli: ablate, visualize and render-trigger" * doctest::test_suite("contract")) {
  auto& w = workspace();
  const auto attack_files = tree(w.attack_dir);
  const auto ab = run(w.args("ablate", "--checkpoint " + w.checkpoint.string()));
  REQUIRE(ab.code == 0);
  for (const char* label : {"\nfinetune,", "\nnad,", "\nnode+edge,", "\nargd,", "\nargd@0.1,"})
    CHECK(ab.out.find(label) != std::string::npos);
  CHECK(fs::exists(w.out / "ablate-tiny-s1" / "report.csv"));

  const auto vis = run(w.args("visualize", "--triggered --checkpoint " + w.checkpoint.string()));
  REQUIRE(vis.code == 0);
  CHECK(vis.out.find("edges.json") != std::string::npos);

  const auto png = w.root / "trigger.png";
  CHECK(run(w.args("render-trigger", "--output " + png.string())).code == 0);
  CHECK(fs::file_size(png) > 0);
  CHECK(run(w.args("render-trigger", "--output " + png.string())).code != 0);
  CHECK(tree(w.attack_dir) == attack_files);
}

TEST_CASE("cli: runtime failures map to their categories" * doctest::test_suite("contract")) {
  auto& w = workspace();
  const auto bad = w.root / "corrupt.ckpt";
  std::string bytes = slurp(w.checkpoint);
  bytes[bytes.size() / 2] ^= 0x21;
  std::ofstream(bad, std::ios::binary) << bytes;
  CHECK(run(w.args("evaluate", "--checkpoint " + bad.string())).code ==
        argd::exit_code(argd::ErrorCategory::kIntegrity));
  CHECK(run(w.args("evaluate", "--checkpoint " + (w.root / "absent.ckpt").string())).code ==
        argd::exit_code(argd::ErrorCategory::kIo));
  CHECK(run("--config " + w.config.string() + " --out " + w.out.string() +
            " --set data.dataset=cifar10 --set data.root=/nonexistent attack")
            .code == argd::exit_code(argd::ErrorCategory::kIngestion));
}
