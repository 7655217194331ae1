// Acceptance run: one PASS/FAIL line per criterion.
//
// 1-3 run the unit-test binaries filtered to the oracle, gradcheck and
// invariant suites and time them. 4-7 train a backdoored model and its clean
// twin on synthetic-desk with configs/badnets.toml, then run the component
// ablation and the clean-ratio sweep over the configured seeds.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "argd/attacks.hpp"
#include "argd/config.hpp"
#include "argd/eval.hpp"
#include "argd/pipeline.hpp"

using namespace argd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
// ctest hides the output of passing tests, so every line also goes here.
FILE* report = nullptr;

void say(const char* format, ...) {
  std::va_list args;
  va_start(args, format);
  std::va_list copy;
  va_copy(copy, args);
  std::vprintf(format, args);
  std::fflush(stdout);
  if (report) {
    std::vfprintf(report, format, copy);
    std::fflush(report);
  }
  va_end(copy);
  va_end(args);
}

void verdict(int id, bool pass, const std::string& detail) {
  say("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::string> split(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

void suite_criterion(int id, const std::string& suite, double limit) {
  const auto start = Clock::now();
  bool ok = true;
  for (const auto& bin : split(ARGD_UNIT_BINARIES)) {
    const std::string cmd = bin + " -ts=" + suite + " -nv -m > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      ok = false;
      say("  suite %s failed in %s\n", suite.c_str(), bin.c_str());
    }
  }
  const double t = seconds_since(start);
  verdict(id, ok && t < limit,
          suite + " suite " + (ok ? "passed" : "failed") + fmt(", %.1f s (limit %.0f s)", t, limit));
}

const AblationRow* find_row(const AblationTable& t, const std::string& label) {
  for (const auto& r : t.rows)
    if (r.label == label) return &r;
  return nullptr;
}

}  // namespace

int main() {
  report = std::fopen("acceptance_report.txt", "w");
  suite_criterion(1, "oracle", 10.0);
  suite_criterion(2, "gradcheck", 60.0);
  suite_criterion(3, "invariant", 60.0);

  try {
    RunConfig c = load_run_config(fs::path(ARGD_CONFIG_DIR) / "badnets.toml");
    c.validate();
    const LabeledImageSet train = load_dataset(c.data, Split::kTrain);
    const LabeledImageSet test = load_dataset(c.data, Split::kTest);
    const ChannelStats stats = channel_stats_for(train);
    const PoisonedSet poisoned = poison_dataset(train, c.trigger, c.poison);
    const AttackTestSet attack = make_attack_testset(test, c.trigger);

    auto start = Clock::now();
    CheckpointMeta meta;
    meta.seed = c.seed;
    meta.attack = {{"trigger", to_json(c.trigger)}};
    Checkpoint bd = train_backdoored(TapModel(c.arch, c.seed), poisoned.set, stats, c.train, meta);
    const double attack_time = seconds_since(start);
    const MetricsReport bd_report = evaluate_model(bd.model, test, attack, stats);
    CheckpointMeta twin_meta;
    twin_meta.seed = c.seed;
    Checkpoint twin = train_backdoored(TapModel(c.arch, c.seed), train, stats, c.train, twin_meta);
    const MetricsReport twin_report = evaluate_model(twin.model, test, attack, stats);
    const double gap = twin_report.acc - bd_report.acc;
    verdict(4, bd_report.asr >= 95.0 && std::abs(gap) <= 5.0 && attack_time <= 600.0,
            fmt("ASR %.2f (>= 95), ACC %.2f vs clean twin %.2f (gap %.2f, |gap| <= 5)", bd_report.asr, bd_report.acc,
                twin_report.acc, gap) +
                fmt(", backdoor training %.0f s (limit 600 s)", attack_time));
    say("  note: clean twin ASR %.2f (sanity bound 2x chance = 20)\n", twin_report.asr);
    {
      auto clean_img = test.image(attack.source_indices[0]);
      const auto clean_edges = image_edge_matrix(bd.model, clean_img, stats);
      const auto trig_edges = image_edge_matrix(bd.model, attack.set.image(0), stats);
      double delta = 0.0;
      for (std::size_t i = 0; i < clean_edges.size(); ++i)
        for (std::size_t j = 0; j < clean_edges.size(); ++j) delta += std::abs(clean_edges[i][j] - trig_edges[i][j]);
      say("  note: edge-matrix delta between clean and triggered input %.4f\n", delta);
    }

    std::vector<AblationCell> grid = component_grid(c.defense);
    for (auto& cell : ratio_grid(c.defense, c.ablation.ratios)) grid.push_back(cell);
    AblationInputs in{&bd, &train, &test, &attack};
    start = Clock::now();
    const AblationTable table = run_ablation(grid, c.ablation.seeds, in, [](const AblationRow& r) {
      say("  %-12s ASR %6.2f +- %5.2f  ACC %6.2f +- %5.2f%s\n", r.label.c_str(), r.asr_mean, r.asr_std,
                  r.acc_mean, r.acc_std, r.failed ? ("  FAILED: " + r.error).c_str() : "");
    });
    say("  ablation %.0f s over %zu seeds\n", seconds_since(start), c.ablation.seeds.size());

    const AblationRow* full = find_row(table, "argd");
    const AblationRow* node = find_row(table, "nad");
    const AblationRow* ft = find_row(table, "finetune");
    if (full && !full->failed) {
      const double drop = table.backdoored_acc - full->acc_mean;
      verdict(5, full->asr_mean <= 20.0 && drop <= 5.0,
              fmt("ARGD ASR %.2f (<= 20), ACC %.2f vs backdoored %.2f (drop %.2f <= 5)", full->asr_mean,
                  full->acc_mean, table.backdoored_acc, drop) +
                  " over " + std::to_string(full->seeds.size()) + " seeds");
    } else {
      verdict(5, false, "ARGD row failed");
    }
    if (full && node && ft && !full->failed && !node->failed && !ft->failed) {
      const bool hard = full->asr_mean <= node->asr_mean + 2.0;
      const bool advisory = node->asr_mean <= ft->asr_mean + 2.0;
      verdict(6, hard,
              fmt("mean ASR full %.2f <= node-only %.2f + 2; advisory node-only <= finetune %.2f + 2: ",
                  full->asr_mean, node->asr_mean, ft->asr_mean) +
                  (advisory ? "holds" : "does not hold"));
    } else {
      verdict(6, false, "an ablation row failed");
    }

    bool sweep_ok = true;
    std::string sweep;
    std::vector<double> accs;
    for (const auto& cell : ratio_grid(c.defense, c.ablation.ratios)) {
      const AblationRow* r = find_row(table, cell.label);
      if (!r || r->failed) {
        sweep_ok = false;
        continue;
      }
      accs.push_back(r->acc_mean);
      sweep += fmt(" %.2f:", r->clean_ratio) + fmt("ASR %.2f/ACC %.2f", r->asr_mean, r->acc_mean);
    }
    const fs::path report_dir = fs::temp_directory_path() / "argd-acceptance";
    fs::remove_all(report_dir);
    fs::create_directories(report_dir);
    write_ablation_report(table, report_dir);
    sweep_ok = sweep_ok && fs::exists(report_dir / "report.csv") && fs::exists(report_dir / "report.json");
    bool monotone = true;
    for (std::size_t i = 1; i < accs.size(); ++i) monotone = monotone && accs[i] >= accs[i - 1];
    verdict(7, sweep_ok,
            "ratio sweep" + sweep + "; report written; advisory monotone ACC: " + (monotone ? "holds" : "does not hold"));
  } catch (const std::exception& e) {
    say("acceptance run aborted: %s\n", e.what());
    for (int id = 4; id <= 7; ++id) verdict(id, false, "not measured");
  }
  say("%d criteria failed\n", failures);
  if (report) std::fclose(report);
  return failures == 0 ? 0 : 1;
}
