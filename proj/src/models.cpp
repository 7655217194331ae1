#include "argd/models.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>

namespace argd {

namespace {

constexpr int kStageCount = 3;

int stage_index(const std::string& tap) {
  for (int s = 0; s < kStageCount; ++s) {
    if (tap == "stage" + std::to_string(s + 1)) return s;
  }
  return -1;
}

}  // namespace

void ArchSpec::validate() const {
  if (kind == "desk-cnn") {
    if (base_width < 1) throw ConfigError("model.base_width must be >= 1");
  } else if (kind == "wrn") {
    if (depth < 10 || (depth - 4) % 6 != 0) {
      throw ConfigError("model.depth must satisfy (depth - 4) % 6 == 0, got " + std::to_string(depth));
    }
    if (widen < 1) throw ConfigError("model.widen must be >= 1");
  } else {
    throw ConfigError("unknown model.arch '" + kind + "' (expected desk-cnn or wrn)");
  }
  if (in_channels < 1) throw ConfigError("model input channels must be >= 1");
  if (image_size < 8) throw ConfigError("model image size must be >= 8");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (taps.size() < 2) throw ConfigError("model.taps needs at least 2 taps to form a graph edge");
  int previous = -1;
  for (const auto& t : taps) {
    const int s = stage_index(t);
    if (s < 0) throw ConfigError("unknown tap '" + t + "' (expected stage1, stage2 or stage3)");
    if (s <= previous) throw ConfigError("model.taps must be listed in forward order without repeats");
    previous = s;
  }
}

nlohmann::json to_json(const ArchSpec& a) {
  return {{"kind", a.kind},          {"base_width", a.base_width}, {"depth", a.depth},
          {"widen", a.widen},        {"in_channels", a.in_channels},
          {"image_size", a.image_size}, {"num_classes", a.num_classes}, {"taps", a.taps}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec a;
  a.kind = j.at("kind").get<std::string>();
  a.base_width = j.at("base_width").get<int>();
  a.depth = j.at("depth").get<int>();
  a.widen = j.at("widen").get<int>();
  a.in_channels = j.at("in_channels").get<int>();
  a.image_size = j.at("image_size").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.taps = j.at("taps").get<std::vector<std::string>>();
  return a;
}

template <typename T>
TapNetwork<T>::TapNetwork(const ArchSpec& arch, std::uint64_t init_seed) : arch_(arch) {
  arch_.validate();
  std::mt19937_64 gen(init_seed);
  stem_ = std::make_unique<nn::Sequential<T>>();
  head_ = std::make_unique<nn::Sequential<T>>();
  int channels = arch_.in_channels;
  if (arch_.kind == "desk-cnn") {
    // conv-BN-ReLU x2 per block, stride-2 entry conv from block 2 onwards.
    for (int s = 0; s < kStageCount; ++s) {
      const int width = arch_.base_width << s;
      auto stage = std::make_unique<nn::Sequential<T>>();
      stage->template emplace<nn::Conv2d<T>>(channels, width, 3, s == 0 ? 1 : 2, 1, false, gen);
      stage->template emplace<nn::BatchNorm2d<T>>(width);
      stage->template emplace<nn::ReLU<T>>();
      stage->template emplace<nn::Conv2d<T>>(width, width, 3, 1, 1, false, gen);
      stage->template emplace<nn::BatchNorm2d<T>>(width);
      stage->template emplace<nn::ReLU<T>>();
      stages_.push_back(std::move(stage));
      channels = width;
    }
    head_->template emplace<nn::GlobalAvgPool<T>>();
    head_->template emplace<nn::Linear<T>>(channels, arch_.num_classes, gen);
  } else {
    const int blocks = (arch_.depth - 4) / 6;
    const std::array<int, 4> widths{16, 16 * arch_.widen, 32 * arch_.widen, 64 * arch_.widen};
    stem_->template emplace<nn::Conv2d<T>>(channels, widths[0], 3, 1, 1, false, gen);
    channels = widths[0];
    for (int s = 0; s < kStageCount; ++s) {
      auto stage = std::make_unique<nn::Sequential<T>>();
      for (int b = 0; b < blocks; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        stage->template emplace<nn::WideBasicBlock<T>>(channels, widths[static_cast<std::size_t>(s) + 1],
                                                       stride, gen);
        channels = widths[static_cast<std::size_t>(s) + 1];
      }
      stages_.push_back(std::move(stage));
    }
    head_->template emplace<nn::BatchNorm2d<T>>(channels);
    head_->template emplace<nn::ReLU<T>>();
    head_->template emplace<nn::GlobalAvgPool<T>>();
    head_->template emplace<nn::Linear<T>>(channels, arch_.num_classes, gen);
  }
  for (const auto& t : arch_.taps) tap_stage_.push_back(stage_index(t));

  stem_->collect("stem.", params_, buffers_);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    stages_[s]->collect("stage" + std::to_string(s + 1) + ".", params_, buffers_);
  }
  head_->collect("head.", params_, buffers_);
}

template <typename T>
typename TapNetwork<T>::Output TapNetwork<T>::forward(const Tensor<T>& batch, bool train) {
  if (batch.rank() != 4 || batch.dim(1) != arch_.in_channels || batch.dim(2) != arch_.image_size ||
      batch.dim(3) != arch_.image_size) {
    throw InputError("model expects (B, " + std::to_string(arch_.in_channels) + ", " +
                     std::to_string(arch_.image_size) + ", " + std::to_string(arch_.image_size) +
                     ") input, got " + batch.shape_string());
  }
  Output out;
  Tensor<T> h = stem_->empty() ? batch : stem_->forward(batch, train);
  std::vector<Tensor<T>> stage_out;
  for (auto& stage : stages_) {
    h = stage->forward(h, train);
    stage_out.push_back(h);
  }
  out.logits = head_->forward(h, train);
  for (int s : tap_stage_) out.taps.push_back(stage_out[static_cast<std::size_t>(s)]);
  return out;
}

template <typename T>
void TapNetwork<T>::backward(const Tensor<T>& grad_logits, const std::vector<Tensor<T>>& grad_taps) {
  if (!grad_taps.empty() && static_cast<int>(grad_taps.size()) != tap_count()) {
    throw InputError("backward: expected " + std::to_string(tap_count()) + " tap gradients, got " +
                     std::to_string(grad_taps.size()));
  }
  Tensor<T> g = head_->backward(grad_logits);
  for (int s = kStageCount - 1; s >= 0; --s) {
    for (std::size_t t = 0; t < tap_stage_.size() && !grad_taps.empty(); ++t) {
      if (tap_stage_[t] != s || grad_taps[t].empty()) continue;
      if (grad_taps[t].shape() != g.shape()) {
        throw InputError("tap gradient " + std::to_string(t) + " has shape " +
                         grad_taps[t].shape_string() + ", expected " + g.shape_string());
      }
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad_taps[t][i];
    }
    g = stages_[static_cast<std::size_t>(s)]->backward(g);
  }
  if (!stem_->empty()) stem_->backward(g);
}

template <typename T>
std::vector<nn::Parameter<T>*> TapNetwork<T>::parameters() {
  return params_;
}

template <typename T>
std::vector<nn::Buffer<T>> TapNetwork<T>::buffers() {
  return buffers_;
}

template <typename T>
void TapNetwork<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
std::size_t TapNetwork<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : params_) n += p->value.size();
  return n;
}

template <typename T>
TapNetwork<T> TapNetwork<T>::clone() const {
  TapNetwork copy(arch_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i]->value = params_[i]->value;
    copy.params_[i]->velocity.clear();
  }
  for (std::size_t i = 0; i < buffers_.size(); ++i) *copy.buffers_[i].values = *buffers_[i].values;
  return copy;
}

template <typename T>
void TapNetwork<T>::copy_state_from(TapNetwork& other) {
  if (other.arch_ != arch_) throw ConfigError("copy_state_from: architecture mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = other.params_[i]->value;
  for (std::size_t i = 0; i < buffers_.size(); ++i) *buffers_[i].values = *other.buffers_[i].values;
}

template class TapNetwork<float>;
template class TapNetwork<double>;

// ---------------------------------------------------------------------------
// Checkpoint archive

nlohmann::json to_json(const CheckpointMeta& m) {
  return {{"arch", to_json(m.arch)},
          {"k", m.arch.tap_count()},
          {"num_classes", m.arch.num_classes},
          {"seed", m.seed},
          {"epochs", m.epochs},
          {"role", m.role},
          {"attack", m.attack},
          {"normalization", {{"mean", m.normalization.mean}, {"std", m.normalization.stddev}}},
          {"extra", m.extra}};
}

CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.arch = arch_from_json(j.at("arch"));
  m.seed = j.at("seed").get<std::uint64_t>();
  m.epochs = j.at("epochs").get<int>();
  m.role = j.value("role", "");
  m.attack = j.value("attack", nlohmann::json());
  m.normalization.mean = j.at("normalization").at("mean").get<std::vector<float>>();
  m.normalization.stddev = j.at("normalization").at("std").get<std::vector<float>>();
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

namespace {

constexpr char kMagic[8] = {'A', 'R', 'G', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename V>
void put(std::string& out, V v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("checkpoint " + path_ + " is truncated");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(TapModel& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  if (meta.arch != model.arch()) throw ConfigError("checkpoint metadata describes a different architecture");
  std::string body;
  const std::string header = to_json(meta).dump();
  put<std::uint64_t>(body, header.size());
  body += header;
  std::vector<std::pair<std::string, const std::vector<float>*>> tensors;
  for (auto* p : model.parameters()) tensors.emplace_back(p->name, &p->value);
  for (const auto& b : model.buffers()) tensors.emplace_back(b.name, b.values);
  put<std::uint64_t>(body, tensors.size());
  for (const auto& [name, values] : tensors) {
    put<std::uint32_t>(body, static_cast<std::uint32_t>(name.size()));
    body += name;
    put<std::uint64_t>(body, values->size());
    body.append(reinterpret_cast<const char*>(values->data()), values->size() * sizeof(float));
  }

  std::string file(kMagic, sizeof(kMagic));
  put<std::uint32_t>(file, kVersion);
  file += body;
  put<std::uint64_t>(file, fnv1a(body));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchSpec* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  constexpr std::size_t kPrefix = sizeof(kMagic) + sizeof(std::uint32_t);
  if (file.size() < kPrefix + 8 || std::memcmp(file.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError("checkpoint " + where + " has no valid header");
  }
  std::uint32_t version;
  std::memcpy(&version, file.data() + sizeof(kMagic), sizeof(version));
  if (version != kVersion) throw IntegrityError("checkpoint " + where + " has unsupported version");
  const std::string body = file.substr(kPrefix, file.size() - kPrefix - 8);
  std::uint64_t stored;
  std::memcpy(&stored, file.data() + file.size() - 8, sizeof(stored));
  if (stored != fnv1a(body)) throw IntegrityError("checkpoint " + where + " failed its checksum");

  Reader r(body, where);
  CheckpointMeta meta;
  try {
    meta = checkpoint_meta_from_json(nlohmann::json::parse(r.take(r.get<std::uint64_t>())));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("checkpoint " + where + " has a malformed metadata header: " + e.what());
  }

  if (expected != nullptr) {
    auto mismatch = [&](const char* field) {
      throw LoadError("checkpoint " + where + " architecture mismatch in field '" + field + "'");
    };
    if (meta.arch.kind != expected->kind) mismatch("kind");
    if (meta.arch.num_classes != expected->num_classes) mismatch("num_classes");
    if (meta.arch.in_channels != expected->in_channels) mismatch("in_channels");
    if (meta.arch.image_size != expected->image_size) mismatch("image_size");
    if (meta.arch.base_width != expected->base_width) mismatch("base_width");
    if (meta.arch.depth != expected->depth) mismatch("depth");
    if (meta.arch.widen != expected->widen) mismatch("widen");
    if (meta.arch.taps != expected->taps) mismatch("taps");
  }

  TapModel model(meta.arch, 0);
  std::map<std::string, std::vector<float>*> slots;
  for (auto* p : model.parameters()) slots[p->name] = &p->value;
  for (const auto& b : model.buffers()) slots[b.name] = b.values;

  const auto count = r.get<std::uint64_t>();
  if (count != slots.size()) {
    throw LoadError("checkpoint " + where + " holds " + std::to_string(count) + " tensors, architecture expects " +
                    std::to_string(slots.size()));
  }
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::string name = r.take(r.get<std::uint32_t>());
    const auto n = r.get<std::uint64_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw LoadError("checkpoint " + where + " has unexpected tensor '" + name + "'");
    if (it->second->size() != n) {
      throw LoadError("checkpoint " + where + " tensor '" + name + "' has " + std::to_string(n) +
                      " values, expected " + std::to_string(it->second->size()));
    }
    const std::string raw = r.take(n * sizeof(float));
    std::memcpy(it->second->data(), raw.data(), raw.size());
  }
  return {std::move(model), std::move(meta)};
}

}  // namespace argd
