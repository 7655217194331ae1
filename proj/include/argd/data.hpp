#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "argd/tensor.hpp"

namespace argd {

enum class Split { kTrain, kTest };

const char* split_name(Split s);

/// Images at rest: uint8 pixels in NCHW order.
struct LabeledImageSet {
  std::string name;
  Split split = Split::kTrain;
  int num_classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t image_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<std::uint8_t> image(int i) {
    return {pixels.data() + image_size() * static_cast<std::size_t>(i), image_size()};
  }
  std::span<const std::uint8_t> image(int i) const {
    return {pixels.data() + image_size() * static_cast<std::size_t>(i), image_size()};
  }

  /// Throws InputError when the count or label invariants are broken.
  void validate() const;

  /// New set holding the given samples in the given order.
  LabeledImageSet subset(std::span<const int> indices) const;

  std::vector<int> class_counts() const;
};

struct DatasetOptions {
  std::string name = "synthetic-desk";
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int synthetic_train_size = 10000;
  int synthetic_test_size = 1000;
  /// Keep only the first `limit` samples of a file-backed split (0 = all).
  int limit = 0;
};

/// Dataset root: explicit option, else $ARGD_DATA_ROOT, else ./data.
std::filesystem::path resolve_data_root(const std::filesystem::path& configured);

/// Loads `cifar10` (binary batches), `mnist` (idx files) or generates
/// `synthetic-desk`. Unknown names raise ConfigError; missing or malformed
/// files raise IngestionError naming the file.
LabeledImageSet load_dataset(const DatasetOptions& options, Split split);

/// Procedural 10-class Gaussian-blob dataset over 3x32x32. Pure in (seed, size, split).
LabeledImageSet make_synthetic_desk(std::uint64_t seed, int size, Split split);

struct CleanSubsetSpec {
  double ratio = 0.05;
  std::uint64_t seed = 0;
};

/// Stratified sample of round(ratio * N) unique indices. Per-class quotas are
/// equal; the remainder (and any shortfall of small classes) is handed out in
/// a seeded class order. The returned order is a seeded shuffle.
std::vector<int> sample_clean_subset_indices(const LabeledImageSet& set, const CleanSubsetSpec& spec);

LabeledImageSet sample_clean_subset(const LabeledImageSet& set, const CleanSubsetSpec& spec);

/// Per-channel standardization statistics on the [0, 1] pixel scale.
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;
};

/// Published constants for cifar10/mnist, measured from `train` otherwise.
ChannelStats channel_stats_for(const LabeledImageSet& train);

struct Augmentation {
  bool enabled = true;
  int pad = 4;
  bool flip = true;
};

enum class PreprocessMode { kTrain, kEval };

/// Gathers the given samples as float pixels in [0, 255], shape (B, C, H, W).
Tensor<float> gather_pixels(const LabeledImageSet& set, std::span<const int> indices);

/// Train mode: zero-pad random crop and random horizontal flip, then
/// standardization. Eval mode: standardization only.
Tensor<float> preprocess(const Tensor<float>& raw, const ChannelStats& stats, PreprocessMode mode,
                         const Augmentation& augmentation, std::mt19937_64& gen);

void write_index_list(const std::filesystem::path& path, std::span<const int> indices);
std::vector<int> read_index_list(const std::filesystem::path& path);

}  // namespace argd
