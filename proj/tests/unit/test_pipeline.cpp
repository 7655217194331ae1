#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "argd/attacks.hpp"
#include "argd/eval.hpp"
#include "argd/pipeline.hpp"

using namespace argd;
namespace fs = std::filesystem;

namespace {

struct Desk {
  LabeledImageSet train = make_synthetic_desk(5, 120, Split::kTrain);
  LabeledImageSet test = make_synthetic_desk(5, 60, Split::kTest);
  ChannelStats stats = channel_stats_for(train);
  ArchSpec arch = [] {
    ArchSpec a;
    a.base_width = 4;
    return a;
  }();
};

TrainConfig quick(int epochs = 1) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.lr = 0.05;
  c.seed = 2;
  c.lr_schedule = LrSchedule::kConstant;
  return c;
}

Checkpoint model_for(const Desk& d, std::uint64_t seed = 1) {
  CheckpointMeta meta;
  meta.arch = d.arch;
  meta.normalization = d.stats;
  return {TapModel(d.arch, seed), meta};
}

DefenseConfig quick_defense() {
  DefenseConfig c;
  c.train = quick();
  c.projector.embed_dim = 8;
  return c;
}

std::vector<std::vector<float>> parameter_values(TapModel& m) {
  std::vector<std::vector<float>> v;
  for (auto* p : m.parameters()) v.push_back(p->value);
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("distillation leaves the teacher bitwise unchanged" * doctest::test_suite("invariant")) {
  Desk d;
  auto student = model_for(d, 1);
  auto teacher = model_for(d, 2);
  TapModel before = teacher.model.clone();
  for (auto method : {DefenseMethod::kArgd, DefenseMethod::kNad}) {
    auto cfg = quick_defense();
    cfg.toggles = toggles_for(method);
    distill_argd(student, teacher, d.train, cfg);
    CHECK(same_weights(teacher.model, before));
  }
}

TEST_CASE("training is reproducible for a fixed seed" * doctest::test_suite("invariant")) {
  Desk d;
  auto base = model_for(d);
  auto first = model_for(d, 2);
  auto a = distill_argd(base, first, d.train, quick_defense());
  auto teacher = model_for(d, 2);
  auto b = distill_argd(base, teacher, d.train, quick_defense());
  CHECK(same_weights(a.student.model, b.student.model));
  CHECK(a.arg_snapshot == b.arg_snapshot);
  auto cfg = quick_defense();
  cfg.train.seed = 3;
  auto c = distill_argd(base, teacher, d.train, cfg);
  CHECK(!same_weights(a.student.model, c.student.model));
}

TEST_CASE("defense no-op contracts" * doctest::test_suite("contract")) {
  Desk d;
  auto student = model_for(d);
  SUBCASE("zero-epoch finetune returns an exact copy") {
    auto t = finetune_teacher(student, d.train, quick(0));
    CHECK(same_weights(t.model, student.model));
    CHECK(t.meta.role == "teacher");
  }
  SUBCASE("lr = 0 leaves every parameter unchanged") {
    auto teacher = model_for(d, 2);
    auto cfg = quick_defense();
    cfg.train.lr = 0.0;
    auto r = distill_argd(student, teacher, d.train, cfg);
    CHECK(parameter_values(r.student.model) == parameter_values(student.model));
  }
  SUBCASE("finetune baseline equals finetune_teacher on the student") {
    auto teacher = model_for(d, 2);
    auto r = run_baseline("finetune", student, teacher, d.train, quick_defense());
    auto t = finetune_teacher(student, d.train, quick_defense().train);
    CHECK(same_weights(r.student.model, t.model));
  }
  SUBCASE("baseline dispatch") {
    CHECK(toggles_for(DefenseMethod::kNad) == LossToggles::nad());
    CHECK(LossToggles::nad().node);
    CHECK(!LossToggles::nad().edge);
    CHECK(!LossToggles::nad().embedding);
    auto teacher = model_for(d, 2);
    CHECK_THROWS_AS(run_baseline("mcr", student, teacher, d.train, quick_defense()), ConfigError);
    CHECK(parse_defense_method("node+edge") == DefenseMethod::kNodeEdge);
  }
  SUBCASE("mismatched tap counts are a configuration error") {
    Desk other;
    other.arch.taps = {"stage2", "stage3"};
    auto teacher = model_for(other, 2);
    CHECK_THROWS_AS(distill_argd(student, teacher, d.train, quick_defense()), ConfigError);
  }
  SUBCASE("diverging training raises TrainingError") {
    auto cfg = quick(1);
    cfg.lr = 1e30;
    cfg.batch_size = 8;
    CHECK_THROWS_AS(train_backdoored(student.model.clone(), d.train, d.stats, cfg, student.meta), TrainingError);
  }
}

TEST_CASE("every epoch logs the loss breakdown and metrics" * doctest::test_suite("contract")) {
  Desk d;
  std::vector<nlohmann::json> rows;
  TrainingHooks hooks;
  hooks.evaluate = [&](TapModel& m, int) { return nlohmann::json{{"acc", compute_acc(m, d.test, d.stats)}}; };
  hooks.record = [&](const nlohmann::json& row) { rows.push_back(row); };
  auto ckpt = train_backdoored(TapModel(d.arch, 1), d.train, d.stats, quick(2), {}, hooks);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1]["epoch"] == 2);
  CHECK(rows[0]["loss"].contains("ce"));
  CHECK(rows[0].contains("acc"));
  CHECK(ckpt.meta.role == "backdoored");
  CHECK(ckpt.meta.epochs == 2);

  rows.clear();
  auto teacher = model_for(d, 2);
  distill_argd(ckpt, teacher, d.train, quick_defense(), hooks);
  REQUIRE(rows.size() == 1);
  for (const char* key : {"ce", "node", "edge", "embedding", "total"}) CHECK(rows[0]["loss"].contains(key));
  CHECK(rows[0]["loss"]["node"].get<double>() >= 0.0);
}

TEST_CASE("metrics: hand-evaluated values" * doctest::test_suite("oracle")) {
  const auto [m, s] = mean_std({2.0, 4.0, 9.0});
  CHECK(m == doctest::Approx(5.0));
  CHECK(s == doctest::Approx(std::sqrt(13.0)));
  CHECK(mean_std({7.0}).second == 0.0);
  CHECK(round2(2.41499) == doctest::Approx(2.41));
  CHECK(round2(2.415001) == doctest::Approx(2.42));
}

TEST_CASE("ACC and ASR agree with the predictions" * doctest::test_suite("contract")) {
  Desk d;
  TapModel model(d.arch, 4);
  const auto pred = predict(model, d.test, d.stats, 7);
  CHECK(pred == predict(model, d.test, d.stats, 200));
  int correct = 0;
  for (int i = 0; i < d.test.size(); ++i) correct += pred[static_cast<std::size_t>(i)] == d.test.labels[static_cast<std::size_t>(i)];
  CHECK(compute_acc(model, d.test, d.stats) == doctest::Approx(100.0 * correct / d.test.size()));

  TriggerSpec t;
  t.target_label = 3;
  const auto attack = make_attack_testset(d.test, t);
  const auto tp = predict(model, attack.set, d.stats);
  int hits = 0;
  for (const int p : tp) hits += p == 3;
  CHECK(compute_asr(model, attack, d.stats) == doctest::Approx(100.0 * hits / attack.set.size()));
  const auto report = evaluate_model(model, d.test, attack, d.stats);
  CHECK(report.asr_denominator == attack.set.size());
  CHECK(report.acc_denominator == d.test.size());
  CHECK(to_json(report).contains("rounded"));
  CHECK(compute_acc(model, d.test, d.stats) == compute_acc(model, d.test, d.stats));

  LabeledImageSet empty = d.test.subset(std::vector<int>{});
  CHECK_THROWS_AS(compute_acc(model, empty, d.stats), EvaluationError);
  CHECK_THROWS_AS(compute_asr(model, empty, 3, d.stats), EvaluationError);
}

TEST_CASE("visualize_arg writes one heatmap per tap and a symmetric edge matrix" * doctest::test_suite("contract")) {
  Desk d;
  TapModel model(d.arch, 4);
  TapModel teacher(d.arch, 5);
  const auto dir = fs::temp_directory_path() / "argd-test-vis";
  fs::remove_all(dir);
  const auto files = visualize_arg(model, d.test.image(0), d.stats, dir / "a", &teacher);
  REQUIRE(files.heatmaps.size() == 3);
  for (const auto& f : files.heatmaps) CHECK(fs::file_size(f) > 0);
  std::ifstream in(files.edges_json);
  const auto j = nlohmann::json::parse(in);
  for (const char* who : {"student", "teacher"}) {
    const auto e = j[who]["edges"].get<std::vector<std::vector<double>>>();
    REQUIRE(e.size() == 3);
    for (int a = 0; a < 3; ++a) {
      CHECK(e[a][a] == 0.0);
      for (int b = 0; b < 3; ++b) CHECK(e[a][b] == e[b][a]);
    }
  }
  const auto again = visualize_arg(model, d.test.image(0), d.stats, dir / "b", &teacher);
  for (std::size_t p = 0; p < 3; ++p) CHECK(slurp(files.heatmaps[p]) == slurp(again.heatmaps[p]));
  CHECK(slurp(files.edges_json) == slurp(again.edges_json));
  CHECK(image_edge_matrix(model, d.test.image(0), d.stats) == j["student"]["edges"].get<std::vector<std::vector<double>>>());
}

TEST_CASE("ablation grids run deterministically and report every row" * doctest::test_suite("contract")) {
  Desk d;
  auto backdoored = model_for(d);
  backdoored.meta.role = "backdoored";
  TriggerSpec t;
  const auto attack = make_attack_testset(d.test, t);
  auto base = quick_defense();
  base.clean_ratio = 0.1;
  auto grid = component_grid(base);
  REQUIRE(grid.size() == 4);
  CHECK(grid[0].label == "finetune");
  CHECK(grid[3].config.toggles == LossToggles::full());
  const auto ratios = ratio_grid(base, {0.05, 0.1});
  REQUIRE(ratios.size() == 2);
  CHECK(ratios[0].config.clean_ratio == 0.05);
  grid.push_back(ratios[0]);
  // A ratio that selects no samples fails its row without stopping the others.
  auto broken = ratios[0];
  broken.label = "argd@tiny";
  broken.config.clean_ratio = 0.001;
  grid.push_back(broken);

  AblationInputs in{&backdoored, &d.train, &d.test, &attack};
  int seen = 0;
  const auto table = run_ablation(grid, {1, 2}, in, [&](const AblationRow&) { ++seen; });
  CHECK(seen == 6);
  REQUIRE(table.rows.size() == 6);
  for (std::size_t r = 0; r + 1 < table.rows.size(); ++r) {
    CHECK(!table.rows[r].failed);
    CHECK(table.rows[r].asr.size() == 2);
  }
  CHECK(table.rows.back().failed);
  const auto again = run_ablation(grid, {1, 2}, in);
  CHECK(to_json(again) == to_json(table));
  const auto csv = ablation_csv(table);
  CHECK(csv.rfind("label,method,clean_ratio,asr_mean", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
}
