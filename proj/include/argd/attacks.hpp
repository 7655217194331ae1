#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/data.hpp"

namespace argd {

enum class TriggerKind { kBadNets, kBlend, kSig };

const char* trigger_kind_name(TriggerKind kind);
TriggerKind parse_trigger_kind(const std::string& name);

/// Backdoor trigger. Only the fields of the selected kind are used.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::kBadNets;
  int target_label = 0;
  // badnets: size x size checkerboard in the top-right corner, top-left cell = high.
  int size = 3;
  int high = 255;
  int low = 128;
  // blend: out = (1 - alpha) * image + alpha * uniform-noise pattern(pattern_seed)
  std::uint64_t pattern_seed = 0;
  double alpha = 0.2;
  // sig: out = image + delta * sin(2 pi * col * freq / W)
  double delta = 20.0;
  double freq = 6.0;

  /// Throws ConfigError for invalid parameters or a trigger that does not fit.
  void validate(int channels, int height, int width) const;
};

nlohmann::json to_json(const TriggerSpec& spec);
TriggerSpec trigger_from_json(const nlohmann::json& j);

struct PoisonPolicy {
  double injection_ratio = 0.2;
  std::uint64_t seed = 0;
  bool relabel = true;
};

/// Applies the trigger in place to one (C, H, W) image of float pixels in
/// [0, 255]. badnets is an idempotent overwrite; blend and sig are not.
void apply_trigger(std::span<float> image, int channels, int height, int width,
                   const TriggerSpec& spec);

/// uint8 convenience: applies in float and rounds back to the pixel domain.
void apply_trigger(std::span<std::uint8_t> image, int channels, int height, int width,
                   const TriggerSpec& spec);

/// The seeded blend pattern, (C, H, W) pixels in [0, 255].
std::vector<float> blend_pattern(const TriggerSpec& spec, int channels, int height, int width);

struct PoisonedSet {
  LabeledImageSet set;
  std::vector<bool> poison_mask;

  int poisoned_count() const;
};

/// Stamps the trigger on exactly round(injection_ratio * N) seed-selected
/// samples (relabelled to the target when policy.relabel). Other samples are
/// copied unchanged.
PoisonedSet poison_dataset(const LabeledImageSet& set, const TriggerSpec& spec,
                           const PoisonPolicy& policy);

struct AttackTestSet {
  LabeledImageSet set;  ///< triggered images, original labels
  int target_label = 0;
  std::vector<int> source_indices;
};

/// Triggered copy of every test sample whose true label differs from the
/// target. Throws EvaluationError when nothing remains.
AttackTestSet make_attack_testset(const LabeledImageSet& test, const TriggerSpec& spec);

}  // namespace argd
