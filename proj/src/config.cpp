#include "argd/config.hpp"

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "argd/error.hpp"

namespace argd {

namespace {

using nlohmann::json;

class TomlParser {
 public:
  explicit TomlParser(const std::string& text) : text_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_blank_lines();
      if (at_end()) break;
      if (peek() == '[') {
        ++pos_;
        skip_inline_space();
        const std::vector<std::string> path = parse_key_path();
        skip_inline_space();
        expect(']');
        const std::string dotted = join(path);
        if (!defined_tables_.insert(dotted).second) fail("table [" + dotted + "] defined twice");
        table = &root;
        for (const auto& part : path) table = &descend(*table, part, dotted);
      } else {
        const std::vector<std::string> path = parse_key_path();
        skip_inline_space();
        expect('=');
        skip_inline_space();
        json value = parse_value();
        json* target = table;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) target = &descend(*target, path[i], join(path));
        if (target->contains(path.back())) fail("duplicate key '" + join(path) + "'");
        (*target)[path.back()] = std::move(value);
      }
      finish_line();
    }
    return root;
  }

  json parse_single_value() {
    skip_inline_space();
    json v = parse_value();
    skip_inline_space();
    if (!at_end()) fail("trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& message) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + message);
  }

  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return at_end() ? '\0' : text_[pos_]; }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_space() {
    while (!at_end() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    if (peek() == '#') {
      while (!at_end() && peek() != '\n') ++pos_;
    }
  }

  void skip_blank_lines() {
    while (true) {
      skip_inline_space();
      skip_comment();
      if (peek() == '\r') ++pos_;
      if (peek() != '\n') return;
      ++pos_;
      ++line_;
    }
  }

  // Whitespace, comments and newlines inside arrays.
  void skip_array_space() {
    while (true) {
      skip_inline_space();
      skip_comment();
      if (peek() == '\r') ++pos_;
      if (peek() != '\n') return;
      ++pos_;
      ++line_;
    }
  }

  void finish_line() {
    skip_inline_space();
    skip_comment();
    if (peek() == '\r') ++pos_;
    if (at_end()) return;
    if (peek() != '\n') fail("unexpected character '" + std::string(1, peek()) + "'");
    ++pos_;
    ++line_;
  }

  static std::string join(const std::vector<std::string>& path) {
    std::string out;
    for (const auto& p : path) out += (out.empty() ? "" : ".") + p;
    return out;
  }

  json& descend(json& node, const std::string& key, const std::string& context) {
    if (!node.contains(key)) node[key] = json::object();
    json& child = node[key];
    if (!child.is_object()) fail("'" + context + "' redefines the value '" + key + "' as a table");
    return child;
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> path;
    while (true) {
      skip_inline_space();
      if (peek() == '"') {
        path.push_back(parse_basic_string());
      } else {
        const std::size_t start = pos_;
        while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
        if (pos_ == start) fail("expected a key");
        path.push_back(text_.substr(start, pos_ - start));
      }
      skip_inline_space();
      if (peek() != '.') return path;
      ++pos_;
    }
  }

  std::string parse_basic_string() {
    expect('"');
    std::string out;
    while (true) {
      if (at_end() || peek() == '\n') fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (at_end()) fail("unterminated escape");
      const char e = text_[pos_++];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail(std::string("unsupported escape '\\") + e + "'");
      }
    }
  }

  std::string parse_literal_string() {
    expect('\'');
    const std::size_t start = pos_;
    while (!at_end() && peek() != '\'' && peek() != '\n') ++pos_;
    if (peek() != '\'') fail("unterminated string");
    std::string out = text_.substr(start, pos_ - start);
    ++pos_;
    return out;
  }

  json parse_array() {
    expect('[');
    json arr = json::array();
    while (true) {
      skip_array_space();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_array_space();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      fail("expected ',' or ']' in array");
    }
  }

  json parse_value() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    const std::size_t start = pos_;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-' ||
                         peek() == '+' || peek() == '.')) {
      ++pos_;
    }
    const std::string token = text_.substr(start, pos_ - start);
    if (token.empty()) fail("expected a value");
    if (token == "true") return true;
    if (token == "false") return false;
    std::string digits;
    for (const char d : token) {
      if (d != '_') digits += d;
    }
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    char* end = nullptr;
    if (!is_float) {
      errno = 0;
      const long long v = std::strtoll(digits.c_str(), &end, 10);
      if (end != digits.c_str() + digits.size() || errno == ERANGE) fail("invalid value '" + token + "'");
      return v;
    }
    const double v = std::strtod(digits.c_str(), &end);
    if (end != digits.c_str() + digits.size() || !std::isfinite(v)) fail("invalid value '" + token + "'");
    return v;
  }

  const std::string& text_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::set<std::string> defined_tables_;
};

std::string toml_scalar(const json& v) {
  if (v.is_string()) {
    std::string out = "\"";
    for (const char c : v.get<std::string>()) {
      switch (c) {
        case '"': out += "\\\""; break;
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default: out += c;
      }
    }
    return out + "\"";
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) {
    std::string s = v.dump();
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
  }
  if (v.is_number()) return v.dump();
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + toml_scalar(v[i]);
    return out + "]";
  }
  throw ConfigError("cannot write " + std::string(v.type_name()) + " as a TOML value");
}

void write_table(std::ostringstream& out, const json& table, const std::string& prefix) {
  bool wrote = false;
  for (const auto& [key, value] : table.items()) {
    if (value.is_object()) continue;
    out << key << " = " << toml_scalar(value) << "\n";
    wrote = true;
  }
  for (const auto& [key, value] : table.items()) {
    if (!value.is_object()) continue;
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (wrote || out.tellp() > 0) out << "\n";
    out << "[" << name << "]\n";
    write_table(out, value, name);
    wrote = true;
  }
}

// Reads the keys of one section and rejects anything left unread.
class SectionReader {
 public:
  SectionReader(const json& root, std::string section) : section_(std::move(section)) {
    if (root.contains(section_)) {
      node_ = &root.at(section_);
      if (!node_->is_object()) throw ConfigError("'" + section_ + "' must be a table");
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (node_ == nullptr || !node_->contains(key)) return;
    seen_.insert(key);
    const json& v = node_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("");
        out = v.get<std::uint64_t>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
        out = v.get<std::string>();
      } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
        if (!v.is_string()) throw ConfigError("");
        out = v.get<std::string>();
      } else {
        if (!v.is_array()) throw ConfigError("");
        T parsed;
        for (const auto& e : v) {
          using E = typename T::value_type;
          if constexpr (std::is_same_v<E, std::string>) {
            if (!e.is_string()) throw ConfigError("");
          } else if constexpr (std::is_same_v<E, double>) {
            if (!e.is_number()) throw ConfigError("");
          } else {
            if (!e.is_number_integer() || e.get<long long>() < 0) throw ConfigError("");
          }
          parsed.push_back(e.get<E>());
        }
        out = std::move(parsed);
      }
    } catch (const ConfigError&) {
      throw ConfigError(section_ + "." + key + ": unexpected value " + v.dump());
    }
  }

  void finish() const {
    if (node_ == nullptr) return;
    for (const auto& [key, value] : node_->items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + section_ + "." + key + "'");
    }
  }

 private:
  std::string section_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

void read_train(SectionReader& r, TrainConfig& t) {
  r.read("epochs", t.epochs);
  r.read("batch_size", t.batch_size);
  r.read("lr", t.lr);
  r.read("momentum", t.momentum);
  r.read("weight_decay", t.weight_decay);
  std::string schedule = lr_schedule_name(t.lr_schedule);
  r.read("lr_schedule", schedule);
  t.lr_schedule = parse_lr_schedule(schedule);
  r.read("augment", t.augmentation.enabled);
  r.read("augment_pad", t.augmentation.pad);
  r.read("augment_flip", t.augmentation.flip);
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_schedule", lr_schedule_name(t.lr_schedule)},
          {"augment", t.augmentation.enabled},
          {"augment_pad", t.augmentation.pad},
          {"augment_flip", t.augmentation.flip}};
}

const std::set<std::string> kSections = {"run", "data", "attack", "model", "train", "defense", "ablation"};

}  // namespace

json parse_toml(const std::string& text) { return TomlParser(text).parse(); }

json load_toml_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_toml(buffer.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_toml(const json& j) {
  if (!j.is_object()) throw ConfigError("to_toml expects a table");
  std::ostringstream out;
  write_table(out, j, "");
  return out.str();
}

void RunConfig::apply_seed() {
  poison.seed = seed;
  train.seed = seed;
  defense.train.seed = seed;
}

void RunConfig::validate() const {
  if (name.empty()) throw ConfigError("run.name must not be empty");
  if (device != "cpu") throw ConfigError("device '" + device + "' is not available (only cpu is supported)");
  if (data.name == "synthetic-desk" && (data.synthetic_train_size <= 0 || data.synthetic_test_size <= 0)) {
    throw ConfigError("data.train_size and data.test_size must be positive");
  }
  if (data.limit < 0) throw ConfigError("data.limit must be >= 0");
  if (!(clean_ratio > 0.0 && clean_ratio <= 1.0)) {
    throw ConfigError("data.clean_ratio must lie in (0, 1], got " + std::to_string(clean_ratio));
  }
  if (!(poison.injection_ratio >= 0.0 && poison.injection_ratio <= 1.0)) {
    throw ConfigError("attack.injection_ratio must lie in [0, 1]");
  }
  trigger.validate(arch.in_channels, arch.image_size, arch.image_size);
  if (trigger.target_label < 0 || trigger.target_label >= arch.num_classes) {
    throw ConfigError("attack.target must lie in [0, " + std::to_string(arch.num_classes) + ")");
  }
  arch.validate();
  train.validate();
  defense.validate();
  if (ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  for (const double r : ablation.ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("ablation.ratios entries must lie in (0, 1]");
  }
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a table");
  for (const auto& [key, value] : j.items()) {
    if (!kSections.count(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  RunConfig c;

  SectionReader run(j, "run");
  run.read("name", c.name);
  run.read("seed", c.seed);
  run.read("deterministic", c.deterministic);
  run.read("device", c.device);
  run.read("out", c.out_root);
  run.finish();

  SectionReader data(j, "data");
  data.read("dataset", c.data.name);
  data.read("root", c.data.root);
  data.read("seed", c.data.seed);
  data.read("train_size", c.data.synthetic_train_size);
  data.read("test_size", c.data.synthetic_test_size);
  data.read("limit", c.data.limit);
  data.read("clean_ratio", c.clean_ratio);
  data.finish();
  // Horizontal flips preserve labels only for natural photographs; digits and
  // the position-coded synthetic classes change meaning when mirrored.
  c.train.augmentation.flip = c.defense.train.augmentation.flip = c.data.name == "cifar10";

  SectionReader attack(j, "attack");
  std::string kind = trigger_kind_name(c.trigger.kind);
  attack.read("kind", kind);
  c.trigger.kind = parse_trigger_kind(kind);
  attack.read("target", c.trigger.target_label);
  attack.read("size", c.trigger.size);
  attack.read("high", c.trigger.high);
  attack.read("low", c.trigger.low);
  attack.read("pattern_seed", c.trigger.pattern_seed);
  attack.read("alpha", c.trigger.alpha);
  attack.read("delta", c.trigger.delta);
  attack.read("freq", c.trigger.freq);
  attack.read("injection_ratio", c.poison.injection_ratio);
  attack.read("relabel", c.poison.relabel);
  attack.finish();

  SectionReader model(j, "model");
  model.read("arch", c.arch.kind);
  model.read("base_width", c.arch.base_width);
  model.read("depth", c.arch.depth);
  model.read("widen", c.arch.widen);
  model.read("taps", c.arch.taps);
  model.finish();

  SectionReader train(j, "train");
  read_train(train, c.train);
  train.read("clean_twin", c.train_clean_twin);
  train.finish();

  SectionReader defense(j, "defense");
  std::string method = defense_method_name(c.method);
  defense.read("method", method);
  c.method = parse_defense_method(method);
  read_train(defense, c.defense.train);
  defense.read("teacher_checkpoint", c.defense.teacher_checkpoint);
  std::string metric = edge_metric_name(c.defense.graph_metric);
  defense.read("graph_metric", metric);
  c.defense.graph_metric = parse_edge_metric(metric);
  defense.read("node_weights", c.defense.weights.node_weights);
  defense.read("node_term", c.defense.weights.node_term);
  defense.read("edge_term", c.defense.weights.edge_term);
  defense.read("logits_distillation", c.defense.weights.logits_distillation);
  defense.read("kd_temperature", c.defense.weights.kd_temperature);
  defense.read("kd_weight", c.defense.weights.kd_weight);
  defense.read("pool_size", c.defense.projector.pool_size);
  defense.read("embed_dim", c.defense.projector.embed_dim);
  std::string activation = activation_name(c.defense.projector.activation);
  defense.read("activation", activation);
  c.defense.projector.activation = parse_activation(activation);
  defense.read("projector_weight_decay", c.defense.projector_weight_decay);
  defense.finish();

  SectionReader ablation(j, "ablation");
  ablation.read("seeds", c.ablation.seeds);
  ablation.read("ratios", c.ablation.ratios);
  ablation.read("components", c.ablation.components);
  ablation.read("ratio_sweep", c.ablation.ratio_sweep);
  ablation.finish();

  if (c.data.name == "mnist") {
    c.arch.in_channels = 1;
    c.arch.image_size = 28;
  }
  c.defense.toggles = toggles_for(c.method);
  c.defense.clean_ratio = c.clean_ratio;
  c.apply_seed();
  return c;
}

json to_json(const RunConfig& c) {
  json defense = train_json(c.defense.train);
  defense["method"] = defense_method_name(c.method);
  defense["teacher_checkpoint"] = c.defense.teacher_checkpoint.string();
  defense["graph_metric"] = edge_metric_name(c.defense.graph_metric);
  defense["node_weights"] = c.defense.weights.node_weights;
  defense["node_term"] = c.defense.weights.node_term;
  defense["edge_term"] = c.defense.weights.edge_term;
  defense["logits_distillation"] = c.defense.weights.logits_distillation;
  defense["kd_temperature"] = c.defense.weights.kd_temperature;
  defense["kd_weight"] = c.defense.weights.kd_weight;
  defense["pool_size"] = c.defense.projector.pool_size;
  defense["embed_dim"] = c.defense.projector.embed_dim;
  defense["activation"] = activation_name(c.defense.projector.activation);
  defense["projector_weight_decay"] = c.defense.projector_weight_decay;

  json train = train_json(c.train);
  train["clean_twin"] = c.train_clean_twin;

  return {{"run",
           {{"name", c.name},
            {"seed", c.seed},
            {"deterministic", c.deterministic},
            {"device", c.device},
            {"out", c.out_root.string()}}},
          {"data",
           {{"dataset", c.data.name},
            {"root", c.data.root.string()},
            {"seed", c.data.seed},
            {"train_size", c.data.synthetic_train_size},
            {"test_size", c.data.synthetic_test_size},
            {"limit", c.data.limit},
            {"clean_ratio", c.clean_ratio}}},
          {"attack",
           {{"kind", trigger_kind_name(c.trigger.kind)},
            {"target", c.trigger.target_label},
            {"size", c.trigger.size},
            {"high", c.trigger.high},
            {"low", c.trigger.low},
            {"pattern_seed", c.trigger.pattern_seed},
            {"alpha", c.trigger.alpha},
            {"delta", c.trigger.delta},
            {"freq", c.trigger.freq},
            {"injection_ratio", c.poison.injection_ratio},
            {"relabel", c.poison.relabel}}},
          {"model",
           {{"arch", c.arch.kind},
            {"base_width", c.arch.base_width},
            {"depth", c.arch.depth},
            {"widen", c.arch.widen},
            {"taps", c.arch.taps}}},
          {"train", train},
          {"defense", defense},
          {"ablation",
           {{"seeds", c.ablation.seeds},
            {"ratios", c.ablation.ratios},
            {"components", c.ablation.components},
            {"ratio_sweep", c.ablation.ratio_sweep}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(load_toml_file(path));
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must have the form section.key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size()) {
    throw ConfigError("override key '" + key + "' must have the form section.key");
  }
  json value;
  try {
    value = TomlParser(raw).parse_single_value();
  } catch (const ConfigError&) {
    value = raw;
  }
  j[key.substr(0, dot)][key.substr(dot + 1)] = value;
}

std::filesystem::path resolve_out_root(const std::filesystem::path& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("ARGD_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

}  // namespace argd
