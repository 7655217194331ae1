#pragma once

// Training procedures: backdoored training, teacher finetuning and
// attention relation graph distillation, with the baseline variants
// expressed as distillation with some loss terms switched off.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "argd/data.hpp"
#include "argd/losses.hpp"
#include "argd/models.hpp"
#include "argd/optim.hpp"

namespace argd {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::kStep;
  Augmentation augmentation;

  /// Throws ConfigError. Zero epochs are only accepted when allow_zero_epochs.
  void validate(bool allow_zero_epochs = false) const;
};

nlohmann::json to_json(const TrainConfig& c);

struct DefenseConfig {
  TrainConfig train{10, 64, 0.1, 0.9, 5e-4, 0, LrSchedule::kConstant, {}};
  LossToggles toggles;
  LossWeights weights;
  double clean_ratio = 0.05;
  std::filesystem::path teacher_checkpoint;  ///< empty: finetune a teacher from the student
  ProjectorConfig projector;
  double projector_weight_decay = 0.0;
  /// Overrides weights.graph_metric during distillation.
  EdgeMetric graph_metric = EdgeMetric::kNormalized;

  void validate() const;
};

nlohmann::json to_json(const DefenseConfig& c);

/// finetune | nad | node+edge | argd
enum class DefenseMethod { kFinetune, kNad, kNodeEdge, kArgd };

DefenseMethod parse_defense_method(const std::string& name);
const char* defense_method_name(DefenseMethod m);
LossToggles toggles_for(DefenseMethod m);

/// Per-epoch callbacks. `evaluate` returns extra metrics (acc, asr, ...) to
/// log for the model after each epoch; `record` receives one JSON object per
/// epoch. Either may be empty.
struct TrainingHooks {
  std::function<nlohmann::json(TapModel&, int epoch)> evaluate;
  std::function<void(const nlohmann::json&)> record;
};

/// SGD training on `train` (typically poisoned). `meta` supplies the
/// provenance fields (attack, seed); role, epochs, arch and normalization
/// are filled in. Non-finite loss raises TrainingError with the step index.
Checkpoint train_backdoored(TapModel model, const LabeledImageSet& train, const ChannelStats& stats,
                            const TrainConfig& cfg, CheckpointMeta meta, const TrainingHooks& hooks = {});

/// Cross-entropy finetuning of a copy of `backdoored` on the clean subset.
/// Zero epochs return an exact copy.
Checkpoint finetune_teacher(const Checkpoint& backdoored, const LabeledImageSet& clean_subset,
                            const TrainConfig& cfg, const TrainingHooks& hooks = {});

struct DistillationResult {
  Checkpoint student;
  /// Attention relation graphs of both models on the first clean batch
  /// after the final epoch.
  nlohmann::json arg_snapshot;
};

/// Purifies a copy of `student` under the frozen `teacher` with the losses
/// enabled in cfg.toggles. Throws ConfigError when tap counts differ.
DistillationResult distill_argd(const Checkpoint& student, Checkpoint& teacher,
                                const LabeledImageSet& clean_subset, const DefenseConfig& cfg,
                                const TrainingHooks& hooks = {});

/// Finetunes a teacher on the clean subset (unless one is given) and then
/// distills with the toggles of `method`.
struct DefenseOutcome {
  Checkpoint teacher;
  DistillationResult result;
};

DefenseOutcome run_defense(const Checkpoint& backdoored, const LabeledImageSet& clean_subset,
                           DefenseMethod method, const DefenseConfig& cfg,
                           const Checkpoint* teacher = nullptr, const TrainingHooks& hooks = {});

/// Baseline dispatch by name: finetune (all graph terms off) or nad (node only).
DistillationResult run_baseline(const std::string& kind, const Checkpoint& student, Checkpoint& teacher,
                                const LabeledImageSet& clean_subset, DefenseConfig cfg,
                                const TrainingHooks& hooks = {});

/// True when every parameter and buffer of the two models is bitwise equal.
bool same_weights(TapModel& a, TapModel& b);

}  // namespace argd
