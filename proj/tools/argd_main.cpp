// argd: command-line entry point. Every verb that does work writes a fresh
// run directory holding the resolved config, checkpoints and metrics.

#include <omp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/config.hpp"
#include "argd/error.hpp"
#include "argd/eval.hpp"
#include "argd/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace argd;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::string device;
  std::vector<std::string> overrides;
};

struct DefendOptions {
  std::string method;
  std::optional<double> clean_ratio;
  std::string checkpoint;
  std::string teacher;
  bool dry_run = false;
};

struct VisualizeOptions {
  std::string checkpoint;
  std::string teacher;
  std::string image;
  int index = 0;
  bool triggered = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) : out_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void write(const json& row) {
    out_ << row.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Config file, then CLI overrides; the result is validated before any work.
RunConfig resolve_config(const GlobalOptions& g, bool config_required) {
  json raw = json::object();
  if (!g.config.empty()) {
    if (!fs::exists(g.config)) throw ConfigError("config file not found: " + g.config);
    raw = load_toml_file(g.config);
  } else if (config_required) {
    throw ConfigError("this command needs --config <file>");
  }
  for (const auto& o : g.overrides) apply_override(raw, o);
  RunConfig c = run_config_from_json(raw);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out_root = g.out;
  if (g.deterministic) c.deterministic = true;
  if (!g.device.empty()) c.device = g.device;
  c.apply_seed();
  return c;
}

struct Data {
  LabeledImageSet train;
  LabeledImageSet test;
};

Data load_data(RunConfig& c) {
  Data d{load_dataset(c.data, Split::kTrain), load_dataset(c.data, Split::kTest)};
  c.arch.in_channels = d.train.channels;
  c.arch.image_size = d.train.height;
  c.arch.num_classes = d.train.num_classes;
  return d;
}

// Creates <root>/<verb>-<name>-s<seed>, adding a numeric suffix rather than
// reusing a directory that already exists.
fs::path create_run_dir(const RunConfig& c, const std::string& verb) {
  const fs::path root = resolve_out_root(c.out_root);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create output root " + root.string() + ": " + ec.message());
  const std::string base = verb + "-" + c.name + "-s" + std::to_string(c.seed);
  for (int n = 0; n < 10000; ++n) {
    const fs::path dir = root / (n == 0 ? base : base + "-" + std::to_string(n + 1));
    if (fs::create_directory(dir, ec)) {
      fs::create_directory(dir / "checkpoints");
      return dir;
    }
    if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  }
  throw IoError("no free run directory name under " + root.string());
}

void snapshot_config(const fs::path& dir, const RunConfig& c, const std::string& verb, const json& extra = {}) {
  write_text(dir / "config.toml", to_toml(to_json(c)));
  json invocation = {{"verb", verb}};
  if (!extra.is_null()) invocation.update(extra);
  write_json(dir / "invocation.json", invocation);
}

TrainingHooks logging_hooks(MetricsLog& log, const LabeledImageSet& test, const AttackTestSet& attack,
                            const ChannelStats& stats) {
  TrainingHooks hooks;
  hooks.evaluate = [&test, &attack, &stats](TapModel& m, int) {
    return json{{"acc", compute_acc(m, test, stats)}, {"asr", compute_asr(m, attack, stats)}};
  };
  hooks.record = [&log](const json& row) {
    log.write(row);
    std::cerr << row.value("phase", "") << " epoch " << row.value("epoch", 0) << " acc "
              << row.value("acc", 0.0) << " asr " << row.value("asr", 0.0) << "\n";
  };
  return hooks;
}

json attack_json(const RunConfig& c) {
  return {{"trigger", to_json(c.trigger)},
          {"injection_ratio", c.poison.injection_ratio},
          {"poison_seed", c.poison.seed},
          {"relabel", c.poison.relabel}};
}

// The trigger a checkpoint was attacked with, else the configured one.
TriggerSpec trigger_for(const Checkpoint& ckpt, const RunConfig& c) {
  if (ckpt.meta.attack.is_object() && ckpt.meta.attack.contains("trigger")) {
    return trigger_from_json(ckpt.meta.attack.at("trigger"));
  }
  return c.trigger;
}

Checkpoint load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

json report_json(const MetricsReport& r) { return to_json(r); }

void print_metrics(const std::string& label, const MetricsReport& r) {
  std::printf("%s: ACC %.2f  ASR %.2f\n", label.c_str(), round2(r.acc), round2(r.asr));
}

int cmd_attack(const GlobalOptions& g) {
  RunConfig c = resolve_config(g, true);
  Data d = load_data(c);
  c.validate();
  const fs::path dir = create_run_dir(c, "attack");
  snapshot_config(dir, c, "attack");

  const ChannelStats stats = channel_stats_for(d.train);
  const PoisonedSet poisoned = poison_dataset(d.train, c.trigger, c.poison);
  const AttackTestSet attack = make_attack_testset(d.test, c.trigger);
  std::vector<int> poisoned_indices;
  for (int i = 0; i < static_cast<int>(poisoned.poison_mask.size()); ++i) {
    if (poisoned.poison_mask[static_cast<std::size_t>(i)]) poisoned_indices.push_back(i);
  }
  write_json(dir / "poison_manifest.json", {{"attack", attack_json(c)},
                                            {"train_size", d.train.size()},
                                            {"poisoned_count", poisoned_indices.size()},
                                            {"poisoned_indices", poisoned_indices}});

  MetricsLog log(dir / "metrics.jsonl");
  TrainingHooks hooks = logging_hooks(log, d.test, attack, stats);
  CheckpointMeta meta;
  meta.seed = c.seed;
  meta.attack = attack_json(c);
  Checkpoint bd = train_backdoored(TapModel(c.arch, c.seed), poisoned.set, stats, c.train, meta, hooks);
  save_checkpoint(bd, dir / "checkpoints" / "backdoored.ckpt");
  MetricsReport report = evaluate_model(bd.model, d.test, attack, stats);
  report.metadata = {{"verb", "attack"}, {"attack", attack_json(c)}, {"seed", c.seed}, {"role", "backdoored"}};
  print_metrics("backdoored", report);
  json out = {{"backdoored", report_json(report)}};

  if (c.train_clean_twin) {
    CheckpointMeta twin_meta;
    twin_meta.seed = c.seed;
    twin_meta.role = "clean";
    Checkpoint twin = train_backdoored(TapModel(c.arch, c.seed), d.train, stats, c.train, twin_meta, hooks);
    save_checkpoint(twin, dir / "checkpoints" / "clean.ckpt");
    MetricsReport twin_report = evaluate_model(twin.model, d.test, attack, stats);
    twin_report.metadata = {{"verb", "attack"}, {"seed", c.seed}, {"role", "clean"}};
    print_metrics("clean twin", twin_report);
    out["clean_twin"] = report_json(twin_report);
  }
  write_json(dir / "report.json", out);
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

int cmd_defend(const GlobalOptions& g, const DefendOptions& o) {
  RunConfig c = resolve_config(g, true);
  if (!o.method.empty()) {
    c.method = parse_defense_method(o.method);
    c.defense.toggles = toggles_for(c.method);
  }
  if (o.clean_ratio) c.clean_ratio = c.defense.clean_ratio = *o.clean_ratio;
  if (!o.teacher.empty()) c.defense.teacher_checkpoint = o.teacher;
  if (o.checkpoint.empty()) throw ConfigError("defend needs --checkpoint <backdoored checkpoint>");
  c.validate();

  if (o.dry_run) {
    if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
    const json plan = {
        {"verb", "defend"},
        {"checkpoint", o.checkpoint},
        {"steps",
         {c.defense.teacher_checkpoint.empty()
              ? "finetune a teacher on the clean subset for " + std::to_string(c.defense.train.epochs) + " epochs"
              : "load teacher " + c.defense.teacher_checkpoint.string(),
          std::string("distill with ") + defense_method_name(c.method) + " for " +
              std::to_string(c.defense.train.epochs) + " epochs",
          "evaluate ACC and ASR"}},
        {"config", to_json(c)}};
    std::printf("%s\n%s", plan.dump(2).c_str(), to_toml(to_json(c)).c_str());
    return 0;
  }

  Checkpoint bd = load_model(o.checkpoint);
  Data d = load_data(c);
  const TriggerSpec trigger = trigger_for(bd, c);
  const AttackTestSet attack = make_attack_testset(d.test, trigger);
  const ChannelStats& stats = bd.meta.normalization;
  std::optional<Checkpoint> given_teacher;
  if (!c.defense.teacher_checkpoint.empty()) given_teacher = load_model(c.defense.teacher_checkpoint.string());

  const fs::path dir = create_run_dir(c, std::string("defend-") + defense_method_name(c.method));
  snapshot_config(dir, c, "defend", {{"checkpoint", o.checkpoint}, {"method", defense_method_name(c.method)}});
  const std::vector<int> subset_indices = sample_clean_subset_indices(d.train, {c.clean_ratio, c.seed});
  write_index_list(dir / "subset_indices.txt", subset_indices);
  const LabeledImageSet subset = d.train.subset(subset_indices);

  MetricsLog log(dir / "metrics.jsonl");
  const TrainingHooks hooks = logging_hooks(log, d.test, attack, stats);
  DefenseOutcome outcome =
      run_defense(bd, subset, c.method, c.defense, given_teacher ? &*given_teacher : nullptr, hooks);
  save_checkpoint(outcome.teacher, dir / "checkpoints" / "teacher.ckpt");
  save_checkpoint(outcome.result.student, dir / "checkpoints" / "purified.ckpt");
  write_json(dir / "arg_snapshot.json", outcome.result.arg_snapshot);

  MetricsReport before = evaluate_model(bd.model, d.test, attack, stats);
  MetricsReport teacher = evaluate_model(outcome.teacher.model, d.test, attack, stats);
  MetricsReport after = evaluate_model(outcome.result.student.model, d.test, attack, stats);
  after.metadata = {{"attack", bd.meta.attack},
                    {"defense", defense_method_name(c.method)},
                    {"clean_ratio", c.clean_ratio},
                    {"clean_samples", subset.size()},
                    {"seed", c.seed}};
  print_metrics("backdoored", before);
  print_metrics("teacher", teacher);
  print_metrics(defense_method_name(c.method), after);
  write_json(dir / "report.json",
             {{"backdoored", report_json(before)}, {"teacher", report_json(teacher)}, {"purified", report_json(after)}});
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

int cmd_evaluate(const GlobalOptions& g, const std::string& checkpoint) {
  RunConfig c = resolve_config(g, false);
  Checkpoint ckpt = load_model(checkpoint);
  Data d = load_data(c);
  c.validate();
  const AttackTestSet attack = make_attack_testset(d.test, trigger_for(ckpt, c));
  MetricsReport report = evaluate_model(ckpt.model, d.test, attack, ckpt.meta.normalization);
  report.metadata = {{"checkpoint", checkpoint}, {"role", ckpt.meta.role}, {"attack", ckpt.meta.attack},
                     {"seed", ckpt.meta.seed}};
  const fs::path dir = create_run_dir(c, "evaluate");
  snapshot_config(dir, c, "evaluate", {{"checkpoint", checkpoint}});
  write_json(dir / "report.json", report_json(report));
  print_metrics(ckpt.meta.role.empty() ? "model" : ckpt.meta.role, report);
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

int cmd_ablate(const GlobalOptions& g, const std::string& checkpoint) {
  RunConfig c = resolve_config(g, true);
  Checkpoint bd = load_model(checkpoint);
  Data d = load_data(c);
  c.validate();
  const AttackTestSet attack = make_attack_testset(d.test, trigger_for(bd, c));

  std::vector<AblationCell> grid;
  if (c.ablation.components) {
    for (auto& cell : component_grid(c.defense)) grid.push_back(cell);
  }
  if (c.ablation.ratio_sweep) {
    for (auto& cell : ratio_grid(c.defense, c.ablation.ratios)) grid.push_back(cell);
  }
  if (grid.empty()) throw ConfigError("ablation has neither components nor ratio_sweep enabled");

  const fs::path dir = create_run_dir(c, "ablate");
  snapshot_config(dir, c, "ablate", {{"checkpoint", checkpoint}});
  MetricsLog log(dir / "metrics.jsonl");
  AblationInputs inputs{&bd, &d.train, &d.test, &attack};
  const AblationTable table = run_ablation(grid, c.ablation.seeds, inputs, [&log](const AblationRow& row) {
    log.write({{"label", row.label}, {"asr", row.asr}, {"acc", row.acc}, {"asr_mean", row.asr_mean},
               {"acc_mean", row.acc_mean}, {"failed", row.failed}, {"error", row.error}});
    std::fprintf(stderr, "%s: ASR %.2f +- %.2f  ACC %.2f +- %.2f%s\n", row.label.c_str(), row.asr_mean,
                 row.asr_std, row.acc_mean, row.acc_std, row.failed ? "  FAILED" : "");
  });
  write_ablation_report(table, dir);
  std::printf("%s", ablation_csv(table).c_str());
  std::printf("run directory: %s\n", dir.c_str());
  return 0;
}

std::vector<std::uint8_t> planar_from_png(const PngImage& img, int channels) {
  std::vector<std::uint8_t> planar(static_cast<std::size_t>(channels) * img.width * img.height);
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  for (int c = 0; c < channels; ++c) {
    const int src = img.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < plane; ++i) planar[c * plane + i] = img.pixels[i * img.channels + src];
  }
  return planar;
}

int cmd_visualize(const GlobalOptions& g, const VisualizeOptions& o) {
  RunConfig c = resolve_config(g, false);
  Checkpoint ckpt = load_model(o.checkpoint);
  std::optional<Checkpoint> teacher;
  if (!o.teacher.empty()) teacher = load_model(o.teacher);
  const ArchSpec& arch = ckpt.meta.arch;

  std::vector<std::uint8_t> image;
  if (!o.image.empty()) {
    if (!fs::exists(o.image)) throw IoError("image not found: " + o.image);
    const PngImage png = read_png(o.image);
    if (png.width != arch.image_size || png.height != arch.image_size) {
      throw InputError("image is " + std::to_string(png.width) + "x" + std::to_string(png.height) +
                       ", the model expects " + std::to_string(arch.image_size) + "x" +
                       std::to_string(arch.image_size));
    }
    image = planar_from_png(png, arch.in_channels);
  } else {
    Data d = load_data(c);
    if (o.index < 0 || o.index >= d.test.size()) {
      throw InputError("--index " + std::to_string(o.index) + " outside the test set of " +
                       std::to_string(d.test.size()));
    }
    const auto src = d.test.image(o.index);
    image.assign(src.begin(), src.end());
  }
  if (o.triggered) {
    std::vector<float> f(image.begin(), image.end());
    apply_trigger(f, arch.in_channels, arch.image_size, arch.image_size, trigger_for(ckpt, c));
    for (std::size_t i = 0; i < f.size(); ++i) {
      image[i] = static_cast<std::uint8_t>(std::clamp(std::lround(f[i]), 0L, 255L));
    }
  }
  const fs::path dir = create_run_dir(c, "visualize");
  snapshot_config(dir, c, "visualize", {{"checkpoint", o.checkpoint}, {"teacher", o.teacher}, {"image", o.image},
                                        {"index", o.index}, {"triggered", o.triggered}});
  const VisualizationFiles files =
      visualize_arg(ckpt.model, image, ckpt.meta.normalization, dir, teacher ? &teacher->model : nullptr);
  for (const auto& f : files.heatmaps) std::printf("%s\n", f.c_str());
  std::printf("%s\n", files.edges_json.c_str());
  return 0;
}

int cmd_render_trigger(const GlobalOptions& g, const std::string& output, int scale) {
  RunConfig c = resolve_config(g, false);
  c.validate();
  const int side = c.arch.image_size;
  const int channels = c.arch.in_channels;
  std::vector<float> blank(static_cast<std::size_t>(channels) * side * side, 0.0f);
  apply_trigger(blank, channels, side, side, c.trigger);
  if (scale < 1) throw ConfigError("--scale must be >= 1");
  const int out_side = side * scale;
  std::vector<std::uint8_t> planar(static_cast<std::size_t>(channels) * out_side * out_side);
  for (int ch = 0; ch < channels; ++ch) {
    for (int y = 0; y < out_side; ++y) {
      for (int x = 0; x < out_side; ++x) {
        const float v = blank[(static_cast<std::size_t>(ch) * side + y / scale) * side + x / scale];
        planar[(static_cast<std::size_t>(ch) * out_side + y) * out_side + x] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  fs::path path = output;
  if (path.empty()) {
    const fs::path dir = create_run_dir(c, "render-trigger");
    snapshot_config(dir, c, "render-trigger");
    path = dir / "trigger.png";
  } else if (fs::exists(path)) {
    throw IoError("refusing to overwrite " + path.string());
  }
  write_png(path, out_side, out_side, channels, interleave(planar, channels, out_side, out_side));
  std::printf("%s\n", path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention relation graph distillation: backdoor attacks and defenses"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Run config file (TOML)");
  app.add_option("--seed", g.seed, "Run seed, overriding run.seed");
  app.add_option("--out", g.out, "Output root, overriding run.out and ARGD_OUT_ROOT");
  app.add_flag("--deterministic", g.deterministic, "Record deterministic mode (kernels are always bitwise reproducible)");
  app.add_option("--device", g.device, "Compute device (cpu)");
  app.add_option("--set", g.overrides, "Config override section.key=value, repeatable")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  auto* attack = app.add_subcommand("attack", "Poison the training set and train a backdoored model");
  attack->fallthrough();

  DefendOptions defend_opts;
  auto* defend = app.add_subcommand("defend", "Purify a backdoored checkpoint");
  defend->fallthrough();
  defend->add_option("--method", defend_opts.method, "finetune | nad | node+edge | argd");
  defend->add_option("--clean-ratio", defend_opts.clean_ratio, "Fraction of the training set used as clean data");
  defend->add_option("--checkpoint", defend_opts.checkpoint, "Backdoored checkpoint");
  defend->add_option("--teacher", defend_opts.teacher, "Use this teacher instead of finetuning one");
  defend->add_flag("--dry-run", defend_opts.dry_run, "Validate and print the resolved plan without training");

  std::string eval_checkpoint;
  auto* evaluate = app.add_subcommand("evaluate", "Measure ACC and ASR of a checkpoint");
  evaluate->fallthrough();
  evaluate->add_option("--checkpoint", eval_checkpoint, "Checkpoint to evaluate")->required();

  std::string ablate_checkpoint;
  auto* ablate = app.add_subcommand("ablate", "Run the component and clean-ratio ablations");
  ablate->fallthrough();
  ablate->add_option("--checkpoint", ablate_checkpoint, "Backdoored checkpoint")->required();

  VisualizeOptions vis;
  auto* visualize = app.add_subcommand("visualize", "Write attention heatmaps and the edge matrix for one image");
  visualize->fallthrough();
  visualize->add_option("--checkpoint", vis.checkpoint, "Model checkpoint")->required();
  visualize->add_option("--teacher", vis.teacher, "Teacher checkpoint shown side by side");
  visualize->add_option("--image", vis.image, "PNG input; default is a test-set image");
  visualize->add_option("--index", vis.index, "Test-set image index when no --image is given");
  visualize->add_flag("--triggered", vis.triggered, "Stamp the checkpoint's trigger on the image first");

  std::string trigger_out;
  int trigger_scale = 8;
  auto* render = app.add_subcommand("render-trigger", "Write the trigger applied to a blank image as a PNG");
  render->fallthrough();
  render->add_option("--output", trigger_out, "PNG path; default is a new run directory");
  render->add_option("--scale", trigger_scale, "Nearest-neighbour upscaling factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorCategory::kConfig);
  }

  if (g.deterministic) omp_set_dynamic(0);
  try {
    if (*attack) return cmd_attack(g);
    if (*defend) return cmd_defend(g, defend_opts);
    if (*evaluate) return cmd_evaluate(g, eval_checkpoint);
    if (*ablate) return cmd_ablate(g, ablate_checkpoint);
    if (*visualize) return cmd_visualize(g, vis);
    if (*render) return cmd_render_trigger(g, trigger_out, trigger_scale);
  } catch (const Error& e) {
    std::fprintf(stderr, "argd: %s error: %s\n", category_name(e.category()), e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "argd: unexpected error: %s\n", e.what());
    return 1;
  }
  return 1;
}
