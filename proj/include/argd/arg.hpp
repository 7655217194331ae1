#pragma once

// Attention relation graph: a complete graph over the k attention maps of a
// model, with Euclidean-distance edge weights, plus the learnable embedding
// and bilinear relation used to compare student nodes with teacher nodes.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/attention.hpp"
#include "argd/nn.hpp"

namespace argd {

/// How two attention maps are compared after resizing to the common shape:
/// raw distance, or distance between the L2-normalized maps (bounded by 2).
enum class EdgeMetric { kRaw, kNormalized };

EdgeMetric parse_edge_metric(const std::string& name);
const char* edge_metric_name(EdgeMetric m);

struct AttentionRelationGraph {
  std::vector<Tensor<double>> nodes;  ///< k maps, each (B, H_p, W_p)
  Tensor<double> edges;               ///< (B, k, k), symmetric, zero diagonal
  EdgeMetric metric = EdgeMetric::kRaw;

  int k() const { return static_cast<int>(nodes.size()); }
  int batch() const { return nodes.empty() ? 0 : nodes.front().dim(0); }
  double edge(int b, int i, int j) const {
    return edges[(static_cast<std::size_t>(b) * k() + i) * k() + j];
  }
  static int edge_count(int k) { return k * (k - 1) / 2; }
};

/// Per-sample ||G(a) - G(b)||_2 with G the resize to the common shape
/// (followed by L2 normalization under EdgeMetric::kNormalized).
std::vector<double> edge_weight(const Tensor<double>& a, const Tensor<double>& b,
                                EdgeMetric metric = EdgeMetric::kRaw);

/// Accumulates gradients of sum_b grad_weights[b] * edge_weight(a, b)[b].
/// Zero-distance samples contribute no gradient.
void edge_weight_backward(const Tensor<double>& a, const Tensor<double>& b,
                          std::span<const double> grad_weights, Tensor<double>& grad_a,
                          Tensor<double>& grad_b, EdgeMetric metric = EdgeMetric::kRaw);

/// Builds the graph from k tap feature maps (B, C_p, H_p, W_p).
AttentionRelationGraph build_arg(const std::vector<Tensor<double>>& taps,
                                 EdgeMetric metric = EdgeMetric::kRaw);
AttentionRelationGraph build_arg_from_nodes(std::vector<Tensor<double>> nodes,
                                            EdgeMetric metric = EdgeMetric::kRaw);

/// Backpropagates d loss / d edges (upper triangle, i < j) into the nodes.
void arg_edges_backward(const AttentionRelationGraph& graph, const Tensor<double>& grad_edges,
                        std::vector<Tensor<double>>& grad_nodes);

/// Summary for export: per-node statistics and the mean edge matrix.
nlohmann::json arg_snapshot(const AttentionRelationGraph& graph);

// ---------------------------------------------------------------------------
// Embedding

enum class Activation { kReLU, kTanh, kIdentity };

Activation parse_activation(const std::string& name);
const char* activation_name(Activation a);

struct ProjectorConfig {
  int pool_size = 4;
  int embed_dim = 32;
  Activation activation = Activation::kReLU;
};

/// (B, H, W) -> (B, out * out) adaptive average pooling.
Tensor<double> adaptive_avg_pool(const Tensor<double>& maps, int out);
Tensor<double> adaptive_avg_pool_backward(const Tensor<double>& grad, int in_h, int in_w, int out);

enum class Side { kTeacher, kStudent };

/// Per-tap, per-side R = act(W * pool(T) + b).
class EmbeddingProjector {
 public:
  EmbeddingProjector() = default;
  EmbeddingProjector(int taps, const ProjectorConfig& config, std::uint64_t seed);

  struct Cache {
    Tensor<double> pooled;
    Tensor<double> output;
    int in_h = 0;
    int in_w = 0;
  };

  /// (B, H, W) map of tap `tap` -> (B, d). Throws StateError when the
  /// projector was not initialised for that tap.
  Tensor<double> embed(const Tensor<double>& map, int tap, Side side, Cache* cache = nullptr) const;

  /// d loss / d map; accumulates parameter gradients.
  Tensor<double> embed_backward(const Tensor<double>& grad_output, int tap, Side side,
                                const Cache& cache);

  int taps() const { return taps_; }
  int dim() const { return config_.embed_dim; }
  const ProjectorConfig& config() const { return config_; }
  std::vector<nn::Parameter<double>*> parameters();

  nn::Parameter<double>& weight(int tap, Side side) { return weights_[index(tap, side)]; }
  nn::Parameter<double>& bias(int tap, Side side) { return biases_[index(tap, side)]; }

 private:
  std::size_t index(int tap, Side side) const;

  int taps_ = 0;
  ProjectorConfig config_;
  std::vector<nn::Parameter<double>> weights_;
  std::vector<nn::Parameter<double>> biases_;
};

/// One d x d bilinear form per teacher node, initialised to I / sqrt(d).
class BilinearRelation {
 public:
  BilinearRelation() = default;
  BilinearRelation(int taps, int dim);

  int taps() const { return taps_; }
  int dim() const { return dim_; }
  nn::Parameter<double>& weight() { return weight_; }
  const nn::Parameter<double>& weight() const { return weight_; }
  const double* form(int i) const {
    return weight_.value.data() + static_cast<std::size_t>(i) * dim_ * dim_;
  }

 private:
  int taps_ = 0;
  int dim_ = 0;
  nn::Parameter<double> weight_{"relation.weight", {0}, false};
};

/// Bilinear scores s[b, i] = r_s[b]^T W_i r_t[i][b].
Tensor<double> relation_scores(const Tensor<double>& r_student,
                               const std::vector<Tensor<double>>& r_teacher,
                               const BilinearRelation& relation);

/// Row-wise softmax of (B, k) scores. Throws NumericalError naming the first
/// non-finite score's tap index.
Tensor<double> softmax_rows(const Tensor<double>& scores);

/// Relation vector of one student node over all teacher nodes: (B, k), rows sum to 1.
Tensor<double> relation_vector(const Tensor<double>& r_student,
                               const std::vector<Tensor<double>>& r_teacher,
                               const BilinearRelation& relation);

struct RelationGradients {
  Tensor<double> student;               ///< (B, d)
  std::vector<Tensor<double>> teacher;  ///< k x (B, d)
};

/// Backward of relation_vector given its output `beta` and d loss / d beta.
/// Accumulates into `grads` (allocated on first use) and the relation weights.
void relation_vector_backward(const Tensor<double>& r_student,
                              const std::vector<Tensor<double>>& r_teacher,
                              BilinearRelation& relation, const Tensor<double>& beta,
                              const Tensor<double>& grad_beta, RelationGradients& grads);

}  // namespace argd
