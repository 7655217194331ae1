#include "argd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace argd {

const char* trigger_kind_name(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::kBadNets: return "badnets";
    case TriggerKind::kBlend: return "blend";
    case TriggerKind::kSig: return "sig";
  }
  return "?";
}

TriggerKind parse_trigger_kind(const std::string& name) {
  if (name == "badnets") return TriggerKind::kBadNets;
  if (name == "blend") return TriggerKind::kBlend;
  if (name == "sig") return TriggerKind::kSig;
  throw ConfigError("unknown attack kind '" + name + "' (expected badnets, blend or sig)");
}

void TriggerSpec::validate(int channels, int height, int width) const {
  if (target_label < 0) throw ConfigError("attack.target_label must be >= 0");
  if (channels <= 0 || height <= 0 || width <= 0) throw ConfigError("trigger applied to an empty image");
  switch (kind) {
    case TriggerKind::kBadNets:
      if (size < 1) throw ConfigError("badnets size must be >= 1");
      if (size > height || size > width) {
        throw ConfigError("badnets trigger of size " + std::to_string(size) +
                          " does not fit a " + std::to_string(height) + "x" + std::to_string(width) +
                          " image");
      }
      if (high < 0 || high > 255 || low < 0 || low > 255) {
        throw ConfigError("badnets values must lie in [0, 255]");
      }
      break;
    case TriggerKind::kBlend:
      if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("blend alpha must lie in [0, 1)");
      break;
    case TriggerKind::kSig:
      if (!(delta >= 0.0)) throw ConfigError("sig delta must be >= 0");
      if (!(freq >= 1.0)) throw ConfigError("sig freq must be >= 1");
      break;
  }
}

nlohmann::json to_json(const TriggerSpec& spec) {
  nlohmann::json j{{"kind", trigger_kind_name(spec.kind)}, {"target_label", spec.target_label}};
  switch (spec.kind) {
    case TriggerKind::kBadNets:
      j["size"] = spec.size;
      j["high"] = spec.high;
      j["low"] = spec.low;
      break;
    case TriggerKind::kBlend:
      j["alpha"] = spec.alpha;
      j["pattern_seed"] = spec.pattern_seed;
      break;
    case TriggerKind::kSig:
      j["delta"] = spec.delta;
      j["freq"] = spec.freq;
      break;
  }
  return j;
}

TriggerSpec trigger_from_json(const nlohmann::json& j) {
  TriggerSpec s;
  s.kind = parse_trigger_kind(j.at("kind").get<std::string>());
  s.target_label = j.value("target_label", 0);
  s.size = j.value("size", s.size);
  s.high = j.value("high", s.high);
  s.low = j.value("low", s.low);
  s.alpha = j.value("alpha", s.alpha);
  s.pattern_seed = j.value("pattern_seed", s.pattern_seed);
  s.delta = j.value("delta", s.delta);
  s.freq = j.value("freq", s.freq);
  return s;
}

std::vector<float> blend_pattern(const TriggerSpec& spec, int channels, int height, int width) {
  std::mt19937_64 gen(spec.pattern_seed ^ 0xb1e4d0ULL);
  std::uniform_int_distribution<int> dist(0, 255);
  std::vector<float> pattern(static_cast<std::size_t>(channels) * height * width);
  for (auto& v : pattern) v = static_cast<float>(dist(gen));
  return pattern;
}

void apply_trigger(std::span<float> image, int channels, int height, int width,
                   const TriggerSpec& spec) {
  spec.validate(channels, height, width);
  if (image.size() != static_cast<std::size_t>(channels) * height * width) {
    throw InputError("apply_trigger: image size does not match its shape");
  }
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  switch (spec.kind) {
    case TriggerKind::kBadNets:
      for (int c = 0; c < channels; ++c) {
        for (int r = 0; r < spec.size; ++r) {
          for (int k = 0; k < spec.size; ++k) {
            const int col = width - spec.size + k;
            image[c * plane + static_cast<std::size_t>(r) * width + col] =
                static_cast<float>((r + k) % 2 == 0 ? spec.high : spec.low);
          }
        }
      }
      break;
    case TriggerKind::kBlend: {
      const auto pattern = blend_pattern(spec, channels, height, width);
      const double a = spec.alpha;
      for (std::size_t i = 0; i < image.size(); ++i) {
        image[i] = static_cast<float>(std::clamp((1.0 - a) * image[i] + a * pattern[i], 0.0, 255.0));
      }
      break;
    }
    case TriggerKind::kSig: {
      constexpr double kPi = 3.14159265358979323846;
      for (int col = 0; col < width; ++col) {
        const double s = spec.delta * std::sin(2.0 * kPi * col * spec.freq / width);
        for (int c = 0; c < channels; ++c) {
          for (int r = 0; r < height; ++r) {
            float& v = image[c * plane + static_cast<std::size_t>(r) * width + col];
            v = static_cast<float>(std::clamp(v + s, 0.0, 255.0));
          }
        }
      }
      break;
    }
  }
}

void apply_trigger(std::span<std::uint8_t> image, int channels, int height, int width,
                   const TriggerSpec& spec) {
  std::vector<float> tmp(image.begin(), image.end());
  apply_trigger(std::span<float>(tmp), channels, height, width, spec);
  for (std::size_t i = 0; i < tmp.size(); ++i) {
    image[i] = static_cast<std::uint8_t>(std::lround(std::clamp(tmp[i], 0.0f, 255.0f)));
  }
}

int PoisonedSet::poisoned_count() const {
  return static_cast<int>(std::count(poison_mask.begin(), poison_mask.end(), true));
}

PoisonedSet poison_dataset(const LabeledImageSet& set, const TriggerSpec& spec,
                           const PoisonPolicy& policy) {
  if (set.size() == 0) throw ConfigError("cannot poison an empty dataset");
  if (!(policy.injection_ratio >= 0.0 && policy.injection_ratio <= 1.0)) {
    throw ConfigError("injection ratio must lie in [0, 1]");
  }
  spec.validate(set.channels, set.height, set.width);
  if (spec.target_label >= set.num_classes) {
    throw ConfigError("target label " + std::to_string(spec.target_label) + " outside " +
                      std::to_string(set.num_classes) + " classes");
  }

  PoisonedSet out{set, std::vector<bool>(static_cast<std::size_t>(set.size()), false)};
  const int count = static_cast<int>(std::lround(policy.injection_ratio * set.size()));
  if (count == 0) return out;

  std::vector<int> order(static_cast<std::size_t>(set.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(policy.seed ^ 0x7015011ULL);
  std::shuffle(order.begin(), order.end(), gen);
  for (int i = 0; i < count; ++i) {
    const int idx = order[static_cast<std::size_t>(i)];
    apply_trigger(out.set.image(idx), set.channels, set.height, set.width, spec);
    if (policy.relabel) out.set.labels[static_cast<std::size_t>(idx)] = spec.target_label;
    out.poison_mask[static_cast<std::size_t>(idx)] = true;
  }
  return out;
}

AttackTestSet make_attack_testset(const LabeledImageSet& test, const TriggerSpec& spec) {
  spec.validate(test.channels, test.height, test.width);
  std::vector<int> keep;
  for (int i = 0; i < test.size(); ++i) {
    if (test.labels[static_cast<std::size_t>(i)] != spec.target_label) keep.push_back(i);
  }
  if (keep.empty()) {
    throw EvaluationError("attack test set is empty: every sample belongs to target class " +
                          std::to_string(spec.target_label));
  }
  AttackTestSet out{test.subset(keep), spec.target_label, keep};
  for (int i = 0; i < out.set.size(); ++i) {
    apply_trigger(out.set.image(i), test.channels, test.height, test.width, spec);
  }
  return out;
}

}  // namespace argd
