#pragma once

// Run configuration: a TOML subset parsed to JSON, bound to the typed
// configuration of every module with unknown keys rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/attacks.hpp"
#include "argd/data.hpp"
#include "argd/models.hpp"
#include "argd/pipeline.hpp"

namespace argd {

/// Parses tables ([a] and [a.b]), dotted and bare keys, strings, integers,
/// floats, booleans and (possibly multi-line) arrays. ConfigError names the
/// line on malformed input or duplicate keys.
nlohmann::json parse_toml(const std::string& text);
nlohmann::json load_toml_file(const std::filesystem::path& path);

/// Inverse of parse_toml for objects of scalars, arrays and nested tables.
std::string to_toml(const nlohmann::json& j);

struct AblationSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<double> ratios = {0.01, 0.05, 0.10};
  bool components = true;
  bool ratio_sweep = true;
};

struct RunConfig {
  std::string name = "run";
  /// Drives model initialization, poisoning, batch order, the clean subset
  /// and the defense.
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string device = "cpu";
  std::filesystem::path out_root;  ///< empty: $ARGD_OUT_ROOT, else ./runs

  DatasetOptions data;
  double clean_ratio = 0.05;

  TriggerSpec trigger;
  PoisonPolicy poison;

  ArchSpec arch;
  TrainConfig train;
  /// Clean-trained twin of the attack run, trained with the same settings.
  bool train_clean_twin = false;

  DefenseMethod method = DefenseMethod::kArgd;
  DefenseConfig defense;

  AblationSettings ablation;

  /// Per-run seeds follow from `seed`; call after every override.
  void apply_seed();
  /// Throws ConfigError on any invalid field.
  void validate() const;
};

/// Unknown sections or keys raise ConfigError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

/// Reads `path`; a missing file raises IoError naming it.
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one `section.key=value` override; the value is parsed as a TOML
/// value, falling back to a bare string.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::filesystem::path resolve_out_root(const std::filesystem::path& configured);

}  // namespace argd
