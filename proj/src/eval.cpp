#include "argd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "argd/image_io.hpp"

namespace argd {

std::vector<int> predict(TapModel& model, const LabeledImageSet& set, const ChannelStats& stats, int batch_size) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(set.size()));
  std::mt19937_64 unused(0);
  const Augmentation none{false, 0, false};
  for (int start = 0; start < set.size(); start += batch_size) {
    const int end = std::min(set.size(), start + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = preprocess(gather_pixels(set, idx), stats, PreprocessMode::kEval, none, unused);
    const auto logits = model.forward(x, false).logits;
    const int c = logits.dim(1);
    for (int b = 0; b < end - start; ++b) {
      const float* row = logits.data() + static_cast<std::size_t>(b) * c;
      out.push_back(static_cast<int>(std::max_element(row, row + c) - row));
    }
  }
  return out;
}

double compute_acc(TapModel& model, const LabeledImageSet& clean_test, const ChannelStats& stats) {
  if (clean_test.size() == 0) throw EvaluationError("accuracy over an empty test set");
  const auto pred = predict(model, clean_test, stats);
  int correct = 0;
  for (int i = 0; i < clean_test.size(); ++i) correct += pred[static_cast<std::size_t>(i)] == clean_test.labels[static_cast<std::size_t>(i)];
  return 100.0 * correct / clean_test.size();
}

double compute_asr(TapModel& model, const LabeledImageSet& attack_test, int target, const ChannelStats& stats) {
  if (attack_test.size() == 0) throw EvaluationError("attack success rate over an empty attack test set");
  const auto pred = predict(model, attack_test, stats);
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return 100.0 * static_cast<double>(hits) / attack_test.size();
}

double compute_asr(TapModel& model, const AttackTestSet& attack_test, const ChannelStats& stats) {
  return compute_asr(model, attack_test.set, attack_test.target_label, stats);
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

nlohmann::json to_json(const MetricsReport& r) {
  return {{"asr", r.asr},
          {"acc", r.acc},
          {"asr_denominator", r.asr_denominator},
          {"acc_denominator", r.acc_denominator},
          {"rounded", {{"asr", round2(r.asr)}, {"acc", round2(r.acc)}}},
          {"series", r.series},
          {"metadata", r.metadata}};
}

MetricsReport evaluate_model(TapModel& model, const LabeledImageSet& clean_test, const AttackTestSet& attack_test,
                             const ChannelStats& stats) {
  MetricsReport r;
  r.acc = compute_acc(model, clean_test, stats);
  r.asr = compute_asr(model, attack_test, stats);
  r.acc_denominator = clean_test.size();
  r.asr_denominator = attack_test.set.size();
  return r;
}

std::vector<AblationCell> component_grid(const DefenseConfig& base) {
  std::vector<AblationCell> grid;
  for (auto m : {DefenseMethod::kFinetune, DefenseMethod::kNad, DefenseMethod::kNodeEdge, DefenseMethod::kArgd}) {
    AblationCell cell{defense_method_name(m), m, base};
    cell.config.toggles = toggles_for(m);
    grid.push_back(cell);
  }
  return grid;
}

std::vector<AblationCell> ratio_grid(const DefenseConfig& base, const std::vector<double>& ratios) {
  std::vector<AblationCell> grid;
  for (double r : ratios) {
    std::ostringstream label;
    label << "argd@" << r;
    AblationCell cell{label.str(), DefenseMethod::kArgd, base};
    cell.config.clean_ratio = r;
    cell.config.toggles = LossToggles::full();
    grid.push_back(cell);
  }
  return grid;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

AblationTable run_ablation(const std::vector<AblationCell>& grid, const std::vector<std::uint64_t>& seeds,
                           const AblationInputs& in, const std::function<void(const AblationRow&)>& on_row) {
  if (in.backdoored == nullptr || in.train == nullptr || in.clean_test == nullptr || in.attack_test == nullptr) {
    throw ConfigError("ablation needs a backdoored checkpoint, training data and both test sets");
  }
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const ChannelStats& stats = in.backdoored->meta.normalization;
  AblationTable table;
  {
    Checkpoint probe = in.backdoored->clone();
    table.backdoored_acc = compute_acc(probe.model, *in.clean_test, stats);
    table.backdoored_asr = compute_asr(probe.model, *in.attack_test, stats);
  }
  // Teachers depend only on (seed, clean ratio, teacher training config).
  std::map<std::pair<std::uint64_t, double>, Checkpoint> teachers;
  for (const auto& cell : grid) {
    AblationRow row;
    row.label = cell.label;
    row.method = defense_method_name(cell.method);
    row.clean_ratio = cell.config.clean_ratio;
    row.seeds = seeds;
    try {
      for (auto seed : seeds) {
        DefenseConfig cfg = cell.config;
        cfg.train.seed = seed;
        cfg.toggles = toggles_for(cell.method);
        cfg.validate();
        const auto subset = sample_clean_subset(*in.train, {cfg.clean_ratio, seed});
        const auto key = std::make_pair(seed, cfg.clean_ratio);
        auto it = teachers.find(key);
        if (it == teachers.end()) {
          it = teachers.emplace(key, finetune_teacher(*in.backdoored, subset, cfg.train)).first;
        }
        auto result = distill_argd(*in.backdoored, it->second, subset, cfg);
        row.acc.push_back(compute_acc(result.student.model, *in.clean_test, stats));
        row.asr.push_back(compute_asr(result.student.model, *in.attack_test, stats));
      }
      std::tie(row.asr_mean, row.asr_std) = mean_std(row.asr);
      std::tie(row.acc_mean, row.acc_std) = mean_std(row.acc);
    } catch (const Error& e) {
      row.failed = true;
      row.error = std::string(category_name(e.category())) + ": " + e.what();
    }
    if (on_row) on_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json j{{"label", r.label},
                     {"method", r.method},
                     {"clean_ratio", r.clean_ratio},
                     {"seeds", r.seeds},
                     {"asr", r.asr},
                     {"acc", r.acc},
                     {"failed", r.failed}};
    if (r.failed) {
      j["error"] = r.error;
    } else {
      j["asr_mean"] = r.asr_mean;
      j["asr_std"] = r.asr_std;
      j["acc_mean"] = r.acc_mean;
      j["acc_std"] = r.acc_std;
      j["rounded"] = {{"asr_mean", round2(r.asr_mean)},
                      {"asr_std", round2(r.asr_std)},
                      {"acc_mean", round2(r.acc_mean)},
                      {"acc_std", round2(r.acc_std)}};
    }
    rows.push_back(j);
  }
  return {{"backdoored", {{"asr", t.backdoored_asr}, {"acc", t.backdoored_acc}}}, {"rows", rows}};
}

std::string ablation_csv(const AblationTable& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "label,method,clean_ratio,asr_mean,asr_std,acc_mean,acc_std,seeds,status\n";
  os << "backdoored,none,0," << t.backdoored_asr << ",0.00," << t.backdoored_acc << ",0.00,0,ok\n";
  for (const auto& r : t.rows) {
    os << r.label << ',' << r.method << ',' << std::setprecision(4) << r.clean_ratio << std::setprecision(2) << ',';
    if (r.failed) {
      os << ",,,," << r.seeds.size() << ",failed\n";
    } else {
      os << r.asr_mean << ',' << r.asr_std << ',' << r.acc_mean << ',' << r.acc_std << ',' << r.seeds.size()
         << ",ok\n";
    }
  }
  return os.str();
}

void write_ablation_report(const AblationTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "report.csv");
  std::ofstream json(dir / "report.json");
  if (!csv || !json) throw IoError("cannot write report files in " + dir.string());
  csv << ablation_csv(t);
  json << to_json(t).dump(2) << '\n';
}

namespace {

std::vector<Tensor<double>> image_taps(TapModel& model, std::span<const std::uint8_t> image, const ChannelStats& stats) {
  const ArchSpec& a = model.arch();
  if (image.size() != static_cast<std::size_t>(a.in_channels) * a.image_size * a.image_size) {
    throw InputError("image does not match the model input " + std::to_string(a.in_channels) + "x" +
                     std::to_string(a.image_size) + "x" + std::to_string(a.image_size));
  }
  Tensor<float> raw({1, a.in_channels, a.image_size, a.image_size});
  std::transform(image.begin(), image.end(), raw.data(), [](std::uint8_t v) { return static_cast<float>(v); });
  std::mt19937_64 unused(0);
  const auto x = preprocess(raw, stats, PreprocessMode::kEval, Augmentation{false, 0, false}, unused);
  std::vector<Tensor<double>> taps;
  for (const auto& t : model.forward(x, false).taps) taps.push_back(t.cast<double>());
  return taps;
}

std::vector<std::vector<double>> edge_matrix(const AttentionRelationGraph& g) {
  std::vector<std::vector<double>> m(static_cast<std::size_t>(g.k()), std::vector<double>(static_cast<std::size_t>(g.k())));
  for (int i = 0; i < g.k(); ++i)
    for (int j = 0; j < g.k(); ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = g.edge(0, i, j);
  return m;
}

/// Heat-coloured (size x size) RGB rendering of one attention map, min-max scaled.
std::vector<std::uint8_t> render_map(const Tensor<double>& node, int size) {
  const auto up = resize_to(node, size, size);
  const auto [lo, hi] = std::minmax_element(up.vec().begin(), up.vec().end());
  const double range = *hi - *lo;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(size) * size * 3);
  for (std::size_t i = 0; i < up.size(); ++i) {
    heat_color(range > 0 ? (up[i] - *lo) / range : 0.0, &rgb[i * 3]);
  }
  return rgb;
}

}  // namespace

std::vector<std::vector<double>> image_edge_matrix(TapModel& model, std::span<const std::uint8_t> image,
                                                   const ChannelStats& stats) {
  return edge_matrix(build_arg(image_taps(model, image, stats)));
}

VisualizationFiles visualize_arg(TapModel& model, std::span<const std::uint8_t> image, const ChannelStats& stats,
                                 const std::filesystem::path& out_dir, TapModel* teacher) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const ArchSpec& a = model.arch();
  const int size = a.image_size * 2;
  const auto s_graph = build_arg(image_taps(model, image, stats));
  std::optional<AttentionRelationGraph> t_graph;
  if (teacher != nullptr) {
    if (teacher->tap_count() != model.tap_count()) throw ConfigError("teacher and student tap counts differ");
    t_graph = build_arg(image_taps(*teacher, image, stats));
  }

  VisualizationFiles files;
  if (a.in_channels == 3 || a.in_channels == 1) {
    write_png(out_dir / "input.png", a.image_size, a.image_size, a.in_channels,
              interleave(image, a.in_channels, a.image_size, a.image_size));
  }
  for (int p = 0; p < s_graph.k(); ++p) {
    const auto student_rgb = render_map(s_graph.nodes[static_cast<std::size_t>(p)], size);
    std::vector<std::uint8_t> rgb;
    int width = size;
    if (t_graph) {
      // Teacher on the left, student on the right, 2-pixel gap.
      const auto teacher_rgb = render_map(t_graph->nodes[static_cast<std::size_t>(p)], size);
      width = 2 * size + 2;
      rgb.assign(static_cast<std::size_t>(width) * size * 3, 255);
      for (int y = 0; y < size; ++y) {
        std::copy_n(&teacher_rgb[static_cast<std::size_t>(y) * size * 3], size * 3,
                    &rgb[static_cast<std::size_t>(y) * width * 3]);
        std::copy_n(&student_rgb[static_cast<std::size_t>(y) * size * 3], size * 3,
                    &rgb[(static_cast<std::size_t>(y) * width + size + 2) * 3]);
      }
    } else {
      rgb = student_rgb;
    }
    const auto path = out_dir / ("tap" + std::to_string(p + 1) + "_" + a.taps[static_cast<std::size_t>(p)] + ".png");
    write_png(path, width, size, 3, rgb);
    files.heatmaps.push_back(path);
  }

  nlohmann::json j{{"taps", a.taps}, {"student", {{"edges", edge_matrix(s_graph)}, {"nodes", arg_snapshot(s_graph).at("nodes")}}}};
  if (t_graph) {
    j["teacher"] = {{"edges", edge_matrix(*t_graph)}, {"nodes", arg_snapshot(*t_graph).at("nodes")}};
  }
  files.edges_json = out_dir / "edges.json";
  std::ofstream out(files.edges_json);
  if (!out) throw IoError("cannot write " + files.edges_json.string());
  out << j.dump(2) << '\n';
  return files;
}

}  // namespace argd
