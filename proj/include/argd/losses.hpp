#pragma once

// Graph distillation objective: node, edge and embedding losses between a
// student and a teacher attention relation graph, plus cross entropy.
// Every loss is averaged over the batch. Teacher operands are constants:
// no gradient is ever produced for the teacher's attention maps.

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/arg.hpp"

namespace argd {

struct LossToggles {
  bool node = true;
  bool edge = true;
  bool embedding = true;

  static LossToggles finetune() { return {false, false, false}; }
  static LossToggles nad() { return {true, false, false}; }
  static LossToggles node_edge() { return {true, true, false}; }
  static LossToggles full() { return {true, true, true}; }
  bool any() const { return node || edge || embedding; }
  bool operator==(const LossToggles&) const = default;
};

/// Optional re-weighting knobs. Defaults reduce to total = CE + node + edge + embedding.
struct LossWeights {
  std::vector<double> node_weights;  ///< per-tap weights inside the node loss; empty = all 1
  double node_term = 1.0;
  double edge_term = 1.0;
  bool logits_distillation = false;
  double kd_temperature = 4.0;
  double kd_weight = 1.0;
  /// Distance used for edges and the embedding loss.
  EdgeMetric graph_metric = EdgeMetric::kRaw;
};

struct LossBreakdown {
  double ce = 0.0;
  double node = 0.0;
  double edge = 0.0;
  double embedding = 0.0;
  double logits = 0.0;  ///< optional logits distillation term, 0 unless enabled
  double total = 0.0;
};

nlohmann::json to_json(const LossBreakdown& b);

/// (1/k) sum_p w_p || n(T_C^p) - n(T_S^p) ||, n = L2 normalization after
/// resizing the pair to a common shape. Accumulates into grad_student when given.
double node_loss(const std::vector<Tensor<double>>& student, const std::vector<Tensor<double>>& teacher,
                 std::vector<Tensor<double>>* grad_student = nullptr,
                 std::span<const double> node_weights = {});

/// (1/C(k,2)) sum_{i<j} (E_C^ij - E_S^ij)^2 over (B, k, k) edge tensors.
/// Writes d loss / d E_S (upper triangle) when grad_student is given.
double edge_loss(const Tensor<double>& student_edges, const Tensor<double>& teacher_edges,
                 Tensor<double>* grad_student = nullptr);

/// sum_i sum_j beta[b, j, i] * || G(T_C^i) - G(T_S^j) ||, where row j of
/// `betas` (B, k, k) is the relation vector of student node j. Rows must sum
/// to 1 within 1e-5 (NumericalError otherwise).
double embedding_loss(const std::vector<Tensor<double>>& teacher, const std::vector<Tensor<double>>& student,
                      const Tensor<double>& betas, std::vector<Tensor<double>>* grad_student = nullptr,
                      Tensor<double>* grad_betas = nullptr, EdgeMetric metric = EdgeMetric::kRaw);

/// Mean softmax cross entropy; writes d loss / d logits when requested.
double cross_entropy(const Tensor<double>& logits, std::span<const int> labels,
                     Tensor<double>* grad_logits = nullptr);

/// T^2 * KL(softmax(teacher / T) || softmax(student / T)), batch mean.
double logits_distillation(const Tensor<double>& student_logits, const Tensor<double>& teacher_logits,
                           double temperature, Tensor<double>* grad_student = nullptr);

/// Value-only composite over precomputed graphs and relation vectors.
LossBreakdown overall_loss(const Tensor<double>& student_logits, std::span<const int> labels,
                           const AttentionRelationGraph& student, const AttentionRelationGraph& teacher,
                           const Tensor<double>& betas, const LossToggles& toggles,
                           const LossWeights& weights = {});

/// Owns the trainable embedding projectors and bilinear relation and
/// evaluates the full objective with gradients.
class GraphDistillationLoss {
 public:
  GraphDistillationLoss(int taps, const ProjectorConfig& projector, const LossToggles& toggles,
                        const LossWeights& weights, std::uint64_t seed);

  struct Result {
    LossBreakdown breakdown;
    AttentionRelationGraph student_graph;
    AttentionRelationGraph teacher_graph;
    Tensor<double> betas;                                ///< (B, k, k), empty if embedding off
    Tensor<double> grad_logits;                          ///< (B, classes)
    std::vector<Tensor<double>> grad_student_features;   ///< per tap, like the inputs
    std::vector<Tensor<double>> grad_teacher_features;   ///< always zero: teacher is detached
  };

  /// Features are the k tap maps (B, C_p, H_p, W_p). teacher_logits is only
  /// read when logits distillation is enabled.
  Result evaluate(const std::vector<Tensor<double>>& student_features,
                  const std::vector<Tensor<double>>& teacher_features,
                  const Tensor<double>& student_logits, const Tensor<double>* teacher_logits,
                  std::span<const int> labels, bool compute_gradients);

  std::vector<nn::Parameter<double>*> parameters();
  EmbeddingProjector& projector() { return projector_; }
  BilinearRelation& relation() { return relation_; }
  const LossToggles& toggles() const { return toggles_; }
  int taps() const { return taps_; }

 private:
  int taps_;
  LossToggles toggles_;
  LossWeights weights_;
  EmbeddingProjector projector_;
  BilinearRelation relation_;
};

}  // namespace argd
