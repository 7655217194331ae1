#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/data.hpp"
#include "argd/nn.hpp"

namespace argd {

/// Architecture descriptor, persisted in checkpoints.
struct ArchSpec {
  std::string kind = "desk-cnn";  ///< "desk-cnn" or "wrn"
  int base_width = 8;             ///< desk-cnn: channels of the first block
  int depth = 16;                 ///< wrn: total depth, (depth - 4) % 6 == 0
  int widen = 1;                  ///< wrn: widening factor
  int in_channels = 3;
  int image_size = 32;
  int num_classes = 10;
  std::vector<std::string> taps = {"stage1", "stage2", "stage3"};

  /// Throws ConfigError for unknown kinds, bad sizes, fewer than two taps or
  /// taps out of forward order.
  void validate() const;
  int tap_count() const { return static_cast<int>(taps.size()); }
  bool operator==(const ArchSpec&) const = default;
};

nlohmann::json to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

/// Convolutional classifier instrumented with k feature taps. Stages run in
/// order; each tap reads the output of one stage.
template <typename T>
class TapNetwork {
 public:
  struct Output {
    Tensor<T> logits;              ///< (B, num_classes)
    std::vector<Tensor<T>> taps;   ///< k feature maps (B, C_p, H_p, W_p)
  };

  TapNetwork(const ArchSpec& arch, std::uint64_t init_seed);
  TapNetwork(const TapNetwork&) = delete;
  TapNetwork& operator=(const TapNetwork&) = delete;
  TapNetwork(TapNetwork&&) noexcept = default;
  TapNetwork& operator=(TapNetwork&&) noexcept = default;

  Output forward(const Tensor<T>& batch, bool train);

  /// Backpropagates logits gradient plus optional per-tap gradients (an empty
  /// tensor, or an empty vector, means no gradient at that tap). Parameter
  /// gradients accumulate.
  void backward(const Tensor<T>& grad_logits, const std::vector<Tensor<T>>& grad_taps);

  std::vector<nn::Parameter<T>*> parameters();
  std::vector<nn::Buffer<T>> buffers();
  void zero_grad();

  /// Deep copy of parameters and buffers.
  TapNetwork clone() const;
  void copy_state_from(TapNetwork& other);

  const ArchSpec& arch() const { return arch_; }
  int tap_count() const { return arch_.tap_count(); }
  std::size_t parameter_count();

 private:
  ArchSpec arch_;
  std::unique_ptr<nn::Sequential<T>> stem_;
  std::vector<std::unique_ptr<nn::Sequential<T>>> stages_;
  std::unique_ptr<nn::Sequential<T>> head_;
  std::vector<int> tap_stage_;  ///< stage index for each tap
  std::vector<nn::Parameter<T>*> params_;
  std::vector<nn::Buffer<T>> buffers_;
  std::vector<int> stage_batch_shape_;
};

using TapModel = TapNetwork<float>;

/// Checkpoint provenance header.
struct CheckpointMeta {
  ArchSpec arch;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string role;              ///< backdoored | clean | teacher | purified
  nlohmann::json attack;         ///< {kind, target_label, injection_ratio, ...} or null
  ChannelStats normalization;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const CheckpointMeta& meta);
CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j);

struct Checkpoint {
  TapModel model;
  CheckpointMeta meta;

  Checkpoint clone() const { return {model.clone(), meta}; }
};

/// Single-file archive: magic, JSON header, named float tensors, checksum.
void save_checkpoint(TapModel& model, const CheckpointMeta& meta, const std::filesystem::path& path);
inline void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path) {
  save_checkpoint(ckpt.model, ckpt.meta, path);
}

/// Throws IntegrityError for corrupt files, and LoadError naming the field
/// when the stored architecture disagrees with `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchSpec* expected = nullptr);

}  // namespace argd
