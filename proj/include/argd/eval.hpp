#pragma once

// Clean accuracy and attack success rate, the ablation grid runner and
// attention relation graph visualization.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/attacks.hpp"
#include "argd/pipeline.hpp"

namespace argd {

/// Argmax predictions in eval mode, in sample order.
std::vector<int> predict(TapModel& model, const LabeledImageSet& set, const ChannelStats& stats,
                         int batch_size = 200);

/// 100 * correct / N. EvaluationError on an empty set.
double compute_acc(TapModel& model, const LabeledImageSet& clean_test, const ChannelStats& stats);

/// 100 * (predictions equal to target) / N over the triggered set.
double compute_asr(TapModel& model, const LabeledImageSet& attack_test, int target, const ChannelStats& stats);
double compute_asr(TapModel& model, const AttackTestSet& attack_test, const ChannelStats& stats);

struct MetricsReport {
  double asr = 0.0;
  double acc = 0.0;
  int asr_denominator = 0;
  int acc_denominator = 0;
  nlohmann::json series = nlohmann::json::array();  ///< per-epoch rows
  nlohmann::json metadata = nlohmann::json::object();
};

/// Raw values plus two-decimal rounded copies under "rounded".
nlohmann::json to_json(const MetricsReport& r);

double round2(double v);

MetricsReport evaluate_model(TapModel& model, const LabeledImageSet& clean_test, const AttackTestSet& attack_test,
                             const ChannelStats& stats);

struct AblationCell {
  std::string label;
  DefenseMethod method = DefenseMethod::kArgd;
  DefenseConfig config;
};

/// The four component rows: finetune, node, node+edge, full.
std::vector<AblationCell> component_grid(const DefenseConfig& base);

/// One row per clean ratio, all with the full method.
std::vector<AblationCell> ratio_grid(const DefenseConfig& base, const std::vector<double>& ratios);

struct AblationRow {
  std::string label;
  std::string method;
  double clean_ratio = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> asr;
  std::vector<double> acc;
  double asr_mean = 0.0;
  double asr_std = 0.0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  bool failed = false;
  std::string error;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  double backdoored_asr = 0.0;
  double backdoored_acc = 0.0;
};

struct AblationInputs {
  const Checkpoint* backdoored = nullptr;
  const LabeledImageSet* train = nullptr;  ///< clean subsets are drawn from here
  const LabeledImageSet* clean_test = nullptr;
  const AttackTestSet* attack_test = nullptr;
};

/// Runs every cell for every seed. The seed drives the clean subset, the
/// teacher finetuning and the distillation, so cells sharing a seed and a
/// clean ratio share the same teacher. A failing cell is recorded and the
/// rest proceed. `on_row` is called as each row completes.
AblationTable run_ablation(const std::vector<AblationCell>& grid, const std::vector<std::uint64_t>& seeds,
                           const AblationInputs& inputs,
                           const std::function<void(const AblationRow&)>& on_row = {});

nlohmann::json to_json(const AblationTable& t);
std::string ablation_csv(const AblationTable& t);
void write_ablation_report(const AblationTable& t, const std::filesystem::path& dir);

/// Sample mean and (n - 1) standard deviation; 0 deviation for one value.
std::pair<double, double> mean_std(const std::vector<double>& v);

struct VisualizationFiles {
  std::vector<std::filesystem::path> heatmaps;
  std::filesystem::path edges_json;
};

/// Writes one heatmap PNG per tap (teacher left, student right when a
/// teacher is given), the input image, and edges.json with the k x k edge
/// matrices. `image` is one (C, H, W) uint8 image.
VisualizationFiles visualize_arg(TapModel& model, std::span<const std::uint8_t> image, const ChannelStats& stats,
                                 const std::filesystem::path& out_dir, TapModel* teacher = nullptr);

/// Edge matrix (k x k) of one image under `model`.
std::vector<std::vector<double>> image_edge_matrix(TapModel& model, std::span<const std::uint8_t> image,
                                                   const ChannelStats& stats);

}  // namespace argd
