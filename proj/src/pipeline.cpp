#include "argd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace argd {

LrSchedule parse_lr_schedule(const std::string& name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "step") return LrSchedule::kStep;
  throw ConfigError("unknown lr_schedule '" + name + "' (expected constant or step)");
}

const char* lr_schedule_name(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "step"; }

double learning_rate_at(LrSchedule schedule, double base, int epoch, int total_epochs) {
  if (schedule == LrSchedule::kConstant) return base;
  double lr = base;
  if (2 * epoch >= total_epochs) lr *= 0.1;
  if (4 * epoch >= 3 * total_epochs) lr *= 0.1;
  return lr;
}

void TrainConfig::validate(bool allow_zero_epochs) const {
  if (epochs < (allow_zero_epochs ? 0 : 1)) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (augmentation.pad < 0) throw ConfigError("augmentation pad must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"lr_schedule", lr_schedule_name(c.lr_schedule)},
          {"augment", c.augmentation.enabled},
          {"augment_pad", c.augmentation.pad},
          {"augment_flip", c.augmentation.flip}};
}

void DefenseConfig::validate() const {
  train.validate();
  if (!(clean_ratio > 0.0 && clean_ratio <= 1.0)) {
    throw ConfigError("clean_ratio must lie in (0, 1], got " + std::to_string(clean_ratio));
  }
  if (projector.pool_size < 1) throw ConfigError("projector pool size must be >= 1");
  if (projector.embed_dim < 1) throw ConfigError("projector embed_dim must be >= 1");
  if (projector_weight_decay < 0.0) throw ConfigError("projector weight decay must be >= 0");
  if (weights.kd_temperature <= 0.0) throw ConfigError("kd_temperature must be > 0");
}

nlohmann::json to_json(const DefenseConfig& c) {
  return {{"train", to_json(c.train)},
          {"toggles", {{"node", c.toggles.node}, {"edge", c.toggles.edge}, {"embedding", c.toggles.embedding}}},
          {"clean_ratio", c.clean_ratio},
          {"graph_metric", edge_metric_name(c.graph_metric)},
          {"teacher_checkpoint", c.teacher_checkpoint.string()},
          {"projector",
           {{"pool_size", c.projector.pool_size},
            {"embed_dim", c.projector.embed_dim},
            {"activation", activation_name(c.projector.activation)},
            {"weight_decay", c.projector_weight_decay}}},
          {"node_weights", c.weights.node_weights},
          {"node_term", c.weights.node_term},
          {"edge_term", c.weights.edge_term},
          {"logits_distillation", c.weights.logits_distillation},
          {"kd_temperature", c.weights.kd_temperature},
          {"kd_weight", c.weights.kd_weight}};
}

DefenseMethod parse_defense_method(const std::string& name) {
  if (name == "finetune") return DefenseMethod::kFinetune;
  if (name == "nad" || name == "node") return DefenseMethod::kNad;
  if (name == "node+edge" || name == "node-edge") return DefenseMethod::kNodeEdge;
  if (name == "argd" || name == "full") return DefenseMethod::kArgd;
  throw ConfigError("unknown defense method '" + name + "' (expected finetune, nad, node+edge or argd)");
}

const char* defense_method_name(DefenseMethod m) {
  switch (m) {
    case DefenseMethod::kFinetune: return "finetune";
    case DefenseMethod::kNad: return "nad";
    case DefenseMethod::kNodeEdge: return "node+edge";
    case DefenseMethod::kArgd: return "argd";
  }
  return "?";
}

LossToggles toggles_for(DefenseMethod m) {
  switch (m) {
    case DefenseMethod::kFinetune: return LossToggles::finetune();
    case DefenseMethod::kNad: return LossToggles::nad();
    case DefenseMethod::kNodeEdge: return LossToggles::node_edge();
    case DefenseMethod::kArgd: return LossToggles::full();
  }
  return LossToggles::full();
}

bool same_weights(TapModel& a, TapModel& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->value != pb[i]->value) return false;
  }
  const auto ba = a.buffers(), bb = b.buffers();
  if (ba.size() != bb.size()) return false;
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (*ba[i].values != *bb[i].values) return false;
  }
  return true;
}

namespace {

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::mt19937_64& gen) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<int> batch_labels(const LabeledImageSet& set, const std::vector<int>& indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (int i : indices) labels.push_back(set.labels[static_cast<std::size_t>(i)]);
  return labels;
}

std::vector<Tensor<double>> to_double(const std::vector<Tensor<float>>& ts) {
  std::vector<Tensor<double>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(t.cast<double>());
  return out;
}

struct EpochTotals {
  LossBreakdown sum;
  int samples = 0;

  void add(const LossBreakdown& b, int n) {
    sum.ce += b.ce * n;
    sum.node += b.node * n;
    sum.edge += b.edge * n;
    sum.embedding += b.embedding * n;
    sum.logits += b.logits * n;
    sum.total += b.total * n;
    samples += n;
  }
  LossBreakdown mean() const {
    LossBreakdown m = sum;
    const double d = samples > 0 ? samples : 1;
    m.ce /= d;
    m.node /= d;
    m.edge /= d;
    m.embedding /= d;
    m.logits /= d;
    m.total /= d;
    return m;
  }
};

void finish_epoch(const TrainingHooks& hooks, TapModel& model, const std::string& phase, int epoch, double lr,
                  const EpochTotals& totals) {
  if (!hooks.record && !hooks.evaluate) return;
  nlohmann::json row{{"phase", phase}, {"epoch", epoch + 1}, {"lr", lr}, {"loss", to_json(totals.mean())}};
  if (hooks.evaluate) {
    const nlohmann::json extra = hooks.evaluate(model, epoch + 1);
    for (const auto& [key, value] : extra.items()) row[key] = value;
  }
  if (hooks.record) hooks.record(row);
}

void check_finite(double loss, const std::string& phase, int epoch, int step) {
  if (!std::isfinite(loss)) {
    throw TrainingError(phase + " diverged: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                        std::to_string(step));
  }
}

/// Cross-entropy SGD loop shared by backdoored training and teacher finetuning.
void cross_entropy_training(TapModel& model, const LabeledImageSet& data, const ChannelStats& stats,
                            const TrainConfig& cfg, const std::string& phase, const TrainingHooks& hooks) {
  if (data.size() == 0) throw TrainingError(phase + ": empty training set");
  Sgd<float> opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  std::mt19937_64 order_gen(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 aug_gen(cfg.seed * 0x9E3779B97F4A7C15ULL + 2);
  const std::vector<Tensor<float>> no_taps;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate_at(cfg.lr_schedule, cfg.lr, epoch, cfg.epochs);
    EpochTotals totals;
    for (const auto& batch : epoch_batches(data.size(), cfg.batch_size, order_gen)) {
      const auto labels = batch_labels(data, batch);
      const Tensor<float> x =
          preprocess(gather_pixels(data, batch), stats, PreprocessMode::kTrain, cfg.augmentation, aug_gen);
      opt.zero_grad();
      auto out = model.forward(x, true);
      Tensor<double> grad;
      LossBreakdown b;
      b.ce = cross_entropy(out.logits.cast<double>(), labels, &grad);
      b.total = b.ce;
      check_finite(b.total, phase, epoch, step);
      model.backward(grad.cast<float>(), no_taps);
      opt.step(lr);
      totals.add(b, static_cast<int>(batch.size()));
      ++step;
    }
    finish_epoch(hooks, model, phase, epoch, lr, totals);
  }
}

}  // namespace

Checkpoint train_backdoored(TapModel model, const LabeledImageSet& train, const ChannelStats& stats,
                            const TrainConfig& cfg, CheckpointMeta meta, const TrainingHooks& hooks) {
  cfg.validate();
  cross_entropy_training(model, train, stats, cfg, "attack", hooks);
  meta.arch = model.arch();
  meta.epochs = cfg.epochs;
  meta.normalization = stats;
  if (meta.role.empty()) meta.role = "backdoored";
  meta.extra["train"] = to_json(cfg);
  return {std::move(model), std::move(meta)};
}

Checkpoint finetune_teacher(const Checkpoint& backdoored, const LabeledImageSet& clean_subset, const TrainConfig& cfg,
                            const TrainingHooks& hooks) {
  cfg.validate(true);
  Checkpoint teacher = backdoored.clone();
  if (cfg.epochs > 0) {
    cross_entropy_training(teacher.model, clean_subset, teacher.meta.normalization, cfg, "teacher", hooks);
  }
  teacher.meta.role = "teacher";
  teacher.meta.extra["finetune"] = to_json(cfg);
  teacher.meta.extra["clean_samples"] = clean_subset.size();
  return teacher;
}

DistillationResult distill_argd(const Checkpoint& student_in, Checkpoint& teacher,
                                const LabeledImageSet& clean_subset, const DefenseConfig& cfg,
                                const TrainingHooks& hooks) {
  cfg.validate();
  if (student_in.model.tap_count() != teacher.model.tap_count()) {
    throw ConfigError("teacher has " + std::to_string(teacher.model.tap_count()) + " taps, student has " +
                      std::to_string(student_in.model.tap_count()));
  }
  if (clean_subset.size() == 0) throw TrainingError("distillation: empty clean subset");
  const int k = student_in.model.tap_count();
  const TrainConfig& tc = cfg.train;
  const ChannelStats& stats = student_in.meta.normalization;

  DistillationResult result{student_in.clone(), nlohmann::json::object()};
  TapModel& student = result.student.model;
  LossWeights weights = cfg.weights;
  weights.graph_metric = cfg.graph_metric;
  GraphDistillationLoss loss(k, cfg.projector, cfg.toggles, weights, tc.seed ^ 0xA2C0DE5EEDULL);
  Sgd<float> backbone_opt(student.parameters(), tc.momentum, tc.weight_decay);
  Sgd<double> projector_opt(loss.parameters(), tc.momentum, cfg.projector_weight_decay);

  std::mt19937_64 order_gen(tc.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 aug_gen(tc.seed * 0x9E3779B97F4A7C15ULL + 2);
  const bool need_teacher_logits = cfg.weights.logits_distillation;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = learning_rate_at(tc.lr_schedule, tc.lr, epoch, tc.epochs);
    EpochTotals totals;
    for (const auto& batch : epoch_batches(clean_subset.size(), tc.batch_size, order_gen)) {
      const auto labels = batch_labels(clean_subset, batch);
      const Tensor<float> x =
          preprocess(gather_pixels(clean_subset, batch), stats, PreprocessMode::kTrain, tc.augmentation, aug_gen);
      backbone_opt.zero_grad();
      projector_opt.zero_grad();
      auto s_out = student.forward(x, true);
      const auto t_out = teacher.model.forward(x, false);
      const Tensor<double> s_logits = s_out.logits.cast<double>();
      const Tensor<double> t_logits = need_teacher_logits ? t_out.logits.cast<double>() : Tensor<double>();
      GraphDistillationLoss::Result r;
      try {
        r = loss.evaluate(to_double(s_out.taps), to_double(t_out.taps), s_logits,
                          need_teacher_logits ? &t_logits : nullptr, labels, true);
      } catch (const NumericalError& e) {
        throw TrainingError("defense diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step) + ": " + e.what());
      }
      check_finite(r.breakdown.total, "defense", epoch, step);
      std::vector<Tensor<float>> grad_taps;
      for (const auto& g : r.grad_student_features) grad_taps.push_back(g.cast<float>());
      student.backward(r.grad_logits.cast<float>(), grad_taps);
      backbone_opt.step(lr);
      projector_opt.step(lr);
      totals.add(r.breakdown, static_cast<int>(batch.size()));
      ++step;
    }
    finish_epoch(hooks, student, "defense", epoch, lr, totals);
  }

  // Graph snapshot of both models on the first few clean samples.
  {
    std::vector<int> first(static_cast<std::size_t>(std::min(clean_subset.size(), tc.batch_size)));
    std::iota(first.begin(), first.end(), 0);
    std::mt19937_64 unused(0);
    const Tensor<float> x =
        preprocess(gather_pixels(clean_subset, first), stats, PreprocessMode::kEval, tc.augmentation, unused);
    const auto s_taps = student.forward(x, false).taps;
    const auto t_taps = teacher.model.forward(x, false).taps;
    result.arg_snapshot = {{"student", arg_snapshot(build_arg(to_double(s_taps), cfg.graph_metric))},
                           {"teacher", arg_snapshot(build_arg(to_double(t_taps), cfg.graph_metric))}};
  }

  result.student.meta.role = "purified";
  result.student.meta.extra["defense"] = to_json(cfg);
  result.student.meta.extra["clean_samples"] = clean_subset.size();
  return result;
}

DefenseOutcome run_defense(const Checkpoint& backdoored, const LabeledImageSet& clean_subset, DefenseMethod method,
                           const DefenseConfig& cfg_in, const Checkpoint* teacher, const TrainingHooks& hooks) {
  DefenseConfig cfg = cfg_in;
  cfg.toggles = toggles_for(method);
  cfg.validate();
  Checkpoint t = teacher != nullptr ? teacher->clone() : finetune_teacher(backdoored, clean_subset, cfg.train, hooks);
  auto result = distill_argd(backdoored, t, clean_subset, cfg, hooks);
  result.student.meta.extra["method"] = defense_method_name(method);
  return {std::move(t), std::move(result)};
}

DistillationResult run_baseline(const std::string& kind, const Checkpoint& student, Checkpoint& teacher,
                                const LabeledImageSet& clean_subset, DefenseConfig cfg, const TrainingHooks& hooks) {
  if (kind == "finetune") {
    cfg.toggles = LossToggles::finetune();
  } else if (kind == "nad") {
    cfg.toggles = LossToggles::nad();
  } else {
    throw ConfigError("unknown baseline '" + kind + "' (expected finetune or nad)");
  }
  return distill_argd(student, teacher, clean_subset, cfg, hooks);
}

}  // namespace argd
