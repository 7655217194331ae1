#include "argd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>

#include <nlohmann/json.hpp>

namespace argd {

namespace fs = std::filesystem;

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void LabeledImageSet::validate() const {
  if (pixels.size() != image_size() * labels.size()) {
    throw InputError("dataset '" + name + "': " + std::to_string(pixels.size()) +
                     " pixel bytes do not hold " + std::to_string(labels.size()) + " images");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InputError("dataset '" + name + "': label " + std::to_string(labels[i]) +
                       " at index " + std::to_string(i) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  }
}

LabeledImageSet LabeledImageSet::subset(std::span<const int> indices) const {
  LabeledImageSet out;
  out.name = name;
  out.split = split;
  out.num_classes = num_classes;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * image_size());
  for (int i : indices) {
    if (i < 0 || i >= size()) throw InputError("subset index " + std::to_string(i) + " out of range");
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

std::vector<int> LabeledImageSet::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

fs::path resolve_data_root(const fs::path& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("ARGD_DATA_ROOT"); env != nullptr && *env != '\0') return env;
  return "data";
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open data file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path locate(const fs::path& root, const std::string& subdir, const std::string& file) {
  const fs::path nested = root / subdir / file;
  if (fs::exists(nested)) return nested;
  const fs::path flat = root / file;
  if (fs::exists(flat)) return flat;
  throw IngestionError("missing data file " + nested.string());
}

LabeledImageSet load_cifar10(const fs::path& root, Split split) {
  LabeledImageSet set;
  set.name = "cifar10";
  set.split = split;
  set.num_classes = 10;
  set.channels = 3;
  set.height = 32;
  set.width = 32;
  std::vector<std::string> files;
  if (split == Split::kTrain) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  for (const auto& name : files) {
    const fs::path path = locate(root, "cifar-10-batches-bin", name);
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw IngestionError("corrupt data file " + path.string() + ": size " +
                           std::to_string(bytes.size()) + " is not a multiple of " +
                           std::to_string(kRecord));
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      const int label = bytes[off];
      if (label >= 10) {
        throw IngestionError("corrupt data file " + path.string() + ": label " +
                             std::to_string(label) + " at record " + std::to_string(off / kRecord));
      }
      set.labels.push_back(label);
      set.pixels.insert(set.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                        bytes.begin() + static_cast<std::ptrdiff_t>(off + kRecord));
    }
  }
  return set;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

LabeledImageSet load_mnist(const fs::path& root, Split split) {
  const std::string prefix = split == Split::kTrain ? "train" : "t10k";
  const fs::path image_path = locate(root, "mnist", prefix + "-images-idx3-ubyte");
  const fs::path label_path = locate(root, "mnist", prefix + "-labels-idx1-ubyte");
  const auto images = read_file(image_path);
  const auto labels = read_file(label_path);
  if (images.size() < 16 || read_be32(images, 0) != 2051) {
    throw IngestionError("corrupt data file " + image_path.string() + ": bad idx3 header");
  }
  if (labels.size() < 8 || read_be32(labels, 0) != 2049) {
    throw IngestionError("corrupt data file " + label_path.string() + ": bad idx1 header");
  }
  const std::size_t n = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  if (images.size() != 16 + n * rows * cols) {
    throw IngestionError("corrupt data file " + image_path.string() + ": truncated pixel data");
  }
  if (read_be32(labels, 4) != n || labels.size() != 8 + n) {
    throw IngestionError("corrupt data file " + label_path.string() + ": label count mismatch");
  }
  LabeledImageSet set;
  set.name = "mnist";
  set.split = split;
  set.num_classes = 10;
  set.channels = 1;
  set.height = static_cast<int>(rows);
  set.width = static_cast<int>(cols);
  set.pixels.assign(images.begin() + 16, images.end());
  set.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[8 + i] >= 10) {
      throw IngestionError("corrupt data file " + label_path.string() + ": label out of range");
    }
    set.labels.push_back(labels[8 + i]);
  }
  return set;
}

}  // namespace

LabeledImageSet make_synthetic_desk(std::uint64_t seed, int size, Split split) {
  constexpr int kClasses = 10;
  constexpr int kSide = 32;
  constexpr double kPi = 3.14159265358979323846;
  // Class identity is carried by blob position (a ring around the centre)
  // and, more weakly, by colour; a random distractor blob and background
  // noise keep the task from being trivially separable. Up to three small
  // binary texture patches per image give clean data the local contrast
  // that natural photographs have.
  static constexpr std::array<std::array<double, 3>, 5> kPalette{{
      {1.0, 0.35, 0.25}, {0.3, 0.9, 0.35}, {0.3, 0.45, 1.0}, {0.95, 0.85, 0.3}, {0.75, 0.35, 0.95}}};

  LabeledImageSet set;
  set.name = "synthetic-desk";
  set.split = split;
  set.num_classes = kClasses;
  set.channels = 3;
  set.height = kSide;
  set.width = kSide;
  set.labels.resize(static_cast<std::size_t>(size));
  set.pixels.resize(static_cast<std::size_t>(size) * 3 * kSide * kSide);

  std::mt19937_64 gen(seed * 2 + (split == Split::kTrain ? 0 : 1) + 0x5eed);
  for (int i = 0; i < size; ++i) set.labels[static_cast<std::size_t>(i)] = i % kClasses;
  std::shuffle(set.labels.begin(), set.labels.end(), gen);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> canvas(3 * kSide * kSide);
  for (int i = 0; i < size; ++i) {
    const int label = set.labels[static_cast<std::size_t>(i)];
    const double angle = 2.0 * kPi * label / kClasses;
    const double cx = 15.5 + 8.0 * std::cos(angle) + 1.5 * normal(gen);
    const double cy = 15.5 + 8.0 * std::sin(angle) + 1.5 * normal(gen);
    const double sigma = 2.5 + 1.5 * unit(gen);
    const double amp = 80.0 + 70.0 * unit(gen);
    const auto& color = kPalette[static_cast<std::size_t>(label % 5)];

    const double dx = 4.0 + 24.0 * unit(gen);
    const double dy = 4.0 + 24.0 * unit(gen);
    const double dsigma = 2.0 + 2.0 * unit(gen);
    const double damp = 30.0 + 60.0 * unit(gen);
    const auto& dcolor = kPalette[static_cast<std::size_t>(gen() % 5)];

    for (int c = 0; c < 3; ++c) {
      const double base = 40.0 + 70.0 * unit(gen);
      for (int y = 0; y < kSide; ++y) {
        for (int x = 0; x < kSide; ++x) {
          const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double d2 = (x - dx) * (x - dx) + (y - dy) * (y - dy);
          canvas[(static_cast<std::size_t>(c) * kSide + y) * kSide + x] =
              base + amp * color[c] * std::exp(-r2 / (2 * sigma * sigma)) +
              damp * dcolor[c] * std::exp(-d2 / (2 * dsigma * dsigma)) + 18.0 * normal(gen);
        }
      }
    }
    const int patches = static_cast<int>(gen() % 4);
    for (int q = 0; q < patches; ++q) {
      const int side = 2 + static_cast<int>(gen() % 3);
      const int px = static_cast<int>(gen() % static_cast<std::uint64_t>(kSide - side + 1));
      const int py = static_cast<int>(gen() % static_cast<std::uint64_t>(kSide - side + 1));
      for (int y = py; y < py + side; ++y) {
        for (int x = px; x < px + side; ++x) {
          const double v = (gen() & 1) ? 190.0 : 130.0;
          for (int c = 0; c < 3; ++c) canvas[(static_cast<std::size_t>(c) * kSide + y) * kSide + x] = v;
        }
      }
    }
    auto img = set.image(i);
    for (std::size_t p = 0; p < img.size(); ++p) {
      img[p] = static_cast<std::uint8_t>(std::clamp(std::lround(canvas[p]), 0L, 255L));
    }
  }
  return set;
}

LabeledImageSet load_dataset(const DatasetOptions& options, Split split) {
  LabeledImageSet set;
  if (options.name == "synthetic-desk") {
    const int size = split == Split::kTrain ? options.synthetic_train_size : options.synthetic_test_size;
    if (size <= 0) throw ConfigError("synthetic-desk size must be positive");
    set = make_synthetic_desk(options.seed, size, split);
  } else if (options.name == "cifar10") {
    set = load_cifar10(resolve_data_root(options.root), split);
  } else if (options.name == "mnist") {
    set = load_mnist(resolve_data_root(options.root), split);
  } else {
    throw ConfigError("unknown dataset '" + options.name +
                      "' (expected cifar10, mnist or synthetic-desk)");
  }
  if (options.limit > 0 && options.limit < set.size()) {
    set.labels.resize(static_cast<std::size_t>(options.limit));
    set.pixels.resize(set.image_size() * static_cast<std::size_t>(options.limit));
  }
  set.validate();
  return set;
}

std::vector<int> sample_clean_subset_indices(const LabeledImageSet& set, const CleanSubsetSpec& spec) {
  if (!(spec.ratio > 0.0 && spec.ratio <= 1.0)) {
    throw ConfigError("clean subset ratio must lie in (0, 1], got " + std::to_string(spec.ratio));
  }
  if (set.size() == 0) throw ConfigError("cannot sample a clean subset of an empty set");
  const int total = static_cast<int>(std::lround(spec.ratio * set.size()));
  if (total == 0) {
    throw ConfigError("clean subset ratio " + std::to_string(spec.ratio) + " of " +
                      std::to_string(set.size()) + " samples yields zero samples");
  }

  std::mt19937_64 gen(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  const int k = set.num_classes;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(k));
  for (int i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[static_cast<std::size_t>(i)])].push_back(i);
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), gen);
  std::vector<int> class_order(static_cast<std::size_t>(k));
  std::iota(class_order.begin(), class_order.end(), 0);
  std::shuffle(class_order.begin(), class_order.end(), gen);

  std::vector<int> quota(static_cast<std::size_t>(k), 0);
  int remaining = total;
  // Round-robin in seeded class order: equal shares, remainder to the first
  // classes, and classes that run out simply stop receiving.
  while (remaining > 0) {
    bool progressed = false;
    for (int c : class_order) {
      if (remaining == 0) break;
      auto& q = quota[static_cast<std::size_t>(c)];
      if (q < static_cast<int>(by_class[static_cast<std::size_t>(c)].size())) {
        ++q;
        --remaining;
        progressed = true;
      }
    }
    if (!progressed) break;
  }

  std::vector<int> picked;
  picked.reserve(static_cast<std::size_t>(total));
  for (int c = 0; c < k; ++c) {
    const auto& members = by_class[static_cast<std::size_t>(c)];
    picked.insert(picked.end(), members.begin(), members.begin() + quota[static_cast<std::size_t>(c)]);
  }
  std::shuffle(picked.begin(), picked.end(), gen);
  return picked;
}

LabeledImageSet sample_clean_subset(const LabeledImageSet& set, const CleanSubsetSpec& spec) {
  const auto idx = sample_clean_subset_indices(set, spec);
  return set.subset(idx);
}

ChannelStats channel_stats_for(const LabeledImageSet& train) {
  if (train.name == "cifar10") return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  if (train.name == "mnist") return {{0.1307f}, {0.3081f}};
  ChannelStats stats;
  const std::size_t plane = static_cast<std::size_t>(train.height) * train.width;
  for (int c = 0; c < train.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < train.size(); ++i) {
      const auto img = train.image(i);
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = img[static_cast<std::size_t>(c) * plane + p] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(plane) * std::max(1, train.size());
    const double mean = sum / n;
    stats.mean.push_back(static_cast<float>(mean));
    stats.stddev.push_back(static_cast<float>(std::max(1e-3, std::sqrt(std::max(0.0, sq / n - mean * mean)))));
  }
  return stats;
}

Tensor<float> gather_pixels(const LabeledImageSet& set, std::span<const int> indices) {
  Tensor<float> out({static_cast<int>(indices.size()), set.channels, set.height, set.width});
  const std::size_t n = set.image_size();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = set.image(indices[b]);
    std::transform(img.begin(), img.end(), out.data() + b * n,
                   [](std::uint8_t v) { return static_cast<float>(v); });
  }
  return out;
}

Tensor<float> preprocess(const Tensor<float>& raw, const ChannelStats& stats, PreprocessMode mode,
                         const Augmentation& augmentation, std::mt19937_64& gen) {
  require_rank(raw, 4, "preprocess input");
  const int n = raw.dim(0), c = raw.dim(1), h = raw.dim(2), w = raw.dim(3);
  if (static_cast<int>(stats.mean.size()) != c || static_cast<int>(stats.stddev.size()) != c) {
    throw InputError("preprocess: statistics have " + std::to_string(stats.mean.size()) +
                     " channels, batch has " + std::to_string(c));
  }
  Tensor<float> out(raw.shape());
  const bool augment = mode == PreprocessMode::kTrain && augmentation.enabled;
  const int pad = augmentation.pad;
  std::uniform_int_distribution<int> offset(0, 2 * pad);
  std::bernoulli_distribution coin(0.5);
  for (int b = 0; b < n; ++b) {
    int dy = pad, dx = pad;
    bool flip = false;
    if (augment) {
      dy = offset(gen);
      dx = offset(gen);
      flip = augmentation.flip && coin(gen);
    }
    for (int ch = 0; ch < c; ++ch) {
      const float mean = stats.mean[static_cast<std::size_t>(ch)];
      const float inv = 1.0f / stats.stddev[static_cast<std::size_t>(ch)];
      const float* src = raw.data() + (static_cast<std::size_t>(b) * c + ch) * h * w;
      float* dst = out.data() + (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int sy = y + dy - pad;
          const int sxp = (flip ? w - 1 - x : x) + dx - pad;
          const float v = (sy >= 0 && sy < h && sxp >= 0 && sxp < w) ? src[sy * w + sxp] : 0.0f;
          dst[y * w + x] = (v / 255.0f - mean) * inv;
        }
      }
    }
  }
  return out;
}

void write_index_list(const fs::path& path, std::span<const int> indices) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json(std::vector<int>(indices.begin(), indices.end())).dump() << '\n';
}

std::vector<int> read_index_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in).get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed index list " + path.string() + ": " + e.what());
  }
}

}  // namespace argd
