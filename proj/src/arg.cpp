#include "argd/arg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace argd {

EdgeMetric parse_edge_metric(const std::string& name) {
  if (name == "raw") return EdgeMetric::kRaw;
  if (name == "normalized") return EdgeMetric::kNormalized;
  throw ConfigError("unknown graph metric '" + name + "' (expected raw or normalized)");
}

const char* edge_metric_name(EdgeMetric m) { return m == EdgeMetric::kRaw ? "raw" : "normalized"; }

namespace {

/// Per-sample operands of the distance after resizing (and normalizing).
struct EdgeOperands {
  Tensor<double> ra;
  Tensor<double> rb;
  std::vector<NormalizedMap> ua;
  std::vector<NormalizedMap> ub;
  std::size_t plane = 0;

  const double* a(int s, EdgeMetric m) const {
    return m == EdgeMetric::kRaw ? ra.data() + s * plane : ua[static_cast<std::size_t>(s)].unit.data();
  }
  const double* b(int s, EdgeMetric m) const {
    return m == EdgeMetric::kRaw ? rb.data() + s * plane : ub[static_cast<std::size_t>(s)].unit.data();
  }
};

EdgeOperands edge_operands(const Tensor<double>& a, const Tensor<double>& b, EdgeMetric metric) {
  require_rank(a, 3, "attention map");
  require_rank(b, 3, "attention map");
  if (a.dim(0) != b.dim(0)) throw InputError("attention maps have different batch sizes");
  EdgeOperands op;
  const auto [h, w] = common_shape(a, b);
  op.ra = resize_to(a, h, w);
  op.rb = resize_to(b, h, w);
  op.plane = static_cast<std::size_t>(h) * w;
  if (metric == EdgeMetric::kNormalized) {
    for (int s = 0; s < a.dim(0); ++s) {
      op.ua.push_back(normalize_attention({op.ra.data() + s * op.plane, op.plane}));
      op.ub.push_back(normalize_attention({op.rb.data() + s * op.plane, op.plane}));
    }
  }
  return op;
}

double distance(const double* x, const double* y, std::size_t n) {
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

}  // namespace

std::vector<double> edge_weight(const Tensor<double>& a, const Tensor<double>& b, EdgeMetric metric) {
  const EdgeOperands op = edge_operands(a, b, metric);
  const int n = a.dim(0);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) out[static_cast<std::size_t>(s)] = distance(op.a(s, metric), op.b(s, metric), op.plane);
  return out;
}

void edge_weight_backward(const Tensor<double>& a, const Tensor<double>& b, std::span<const double> grad_weights,
                          Tensor<double>& grad_a, Tensor<double>& grad_b, EdgeMetric metric) {
  const EdgeOperands op = edge_operands(a, b, metric);
  const int n = a.dim(0);
  const std::size_t plane = op.plane;
  const int h = op.ra.dim(1), w = op.ra.dim(2);
  Tensor<double> ga_r({n, h, w}), gb_r({n, h, w});
  std::vector<double> g(plane);
  for (int s = 0; s < n; ++s) {
    const double* x = op.a(s, metric);
    const double* y = op.b(s, metric);
    const double dist = distance(x, y, plane);
    if (dist == 0.0) continue;
    const double scale = grad_weights[static_cast<std::size_t>(s)] / dist;
    for (std::size_t i = 0; i < plane; ++i) g[i] = scale * (x[i] - y[i]);
    if (metric == EdgeMetric::kRaw) {
      for (std::size_t i = 0; i < plane; ++i) {
        ga_r[s * plane + i] = g[i];
        gb_r[s * plane + i] = -g[i];
      }
      continue;
    }
    const auto gx = normalize_attention_backward({op.ra.data() + s * plane, plane}, op.ua[static_cast<std::size_t>(s)], g);
    for (auto& v : g) v = -v;
    const auto gy = normalize_attention_backward({op.rb.data() + s * plane, plane}, op.ub[static_cast<std::size_t>(s)], g);
    std::copy(gx.begin(), gx.end(), ga_r.data() + s * plane);
    std::copy(gy.begin(), gy.end(), gb_r.data() + s * plane);
  }
  const Tensor<double> ga = resize_to_backward(ga_r, a.dim(1), a.dim(2));
  const Tensor<double> gb = resize_to_backward(gb_r, b.dim(1), b.dim(2));
  for (std::size_t i = 0; i < ga.size(); ++i) grad_a[i] += ga[i];
  for (std::size_t i = 0; i < gb.size(); ++i) grad_b[i] += gb[i];
}

AttentionRelationGraph build_arg_from_nodes(std::vector<Tensor<double>> nodes, EdgeMetric metric) {
  const int k = static_cast<int>(nodes.size());
  if (k < 2) throw ConfigError("attention relation graph needs at least 2 nodes, got " + std::to_string(k));
  const int n = nodes.front().dim(0);
  for (const auto& node : nodes) {
    require_rank(node, 3, "graph node");
    if (node.dim(0) != n) throw InputError("graph nodes have different batch sizes");
  }
  AttentionRelationGraph g;
  g.nodes = std::move(nodes);
  g.metric = metric;
  g.edges = Tensor<double>({n, k, k});
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) {
      const auto w = edge_weight(g.nodes[static_cast<std::size_t>(i)], g.nodes[static_cast<std::size_t>(j)], metric);
      for (int s = 0; s < n; ++s) {
        g.edges[(static_cast<std::size_t>(s) * k + i) * k + j] = w[static_cast<std::size_t>(s)];
        g.edges[(static_cast<std::size_t>(s) * k + j) * k + i] = w[static_cast<std::size_t>(s)];
      }
    }
  }
  return g;
}

AttentionRelationGraph build_arg(const std::vector<Tensor<double>>& taps, EdgeMetric metric) {
  if (taps.size() < 2) {
    throw ConfigError("attention relation graph needs at least 2 taps, got " + std::to_string(taps.size()));
  }
  std::vector<Tensor<double>> nodes;
  nodes.reserve(taps.size());
  for (const auto& t : taps) nodes.push_back(extract_attention(t));
  return build_arg_from_nodes(std::move(nodes), metric);
}

void arg_edges_backward(const AttentionRelationGraph& graph, const Tensor<double>& grad_edges,
                        std::vector<Tensor<double>>& grad_nodes) {
  const int k = graph.k();
  const int n = graph.batch();
  require_shape(grad_edges, {n, k, k}, "edge gradient");
  if (grad_nodes.size() != static_cast<std::size_t>(k)) {
    grad_nodes.clear();
    for (const auto& node : graph.nodes) grad_nodes.emplace_back(node.shape());
  }
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) {
      for (int s = 0; s < n; ++s) g[static_cast<std::size_t>(s)] = grad_edges[(static_cast<std::size_t>(s) * k + i) * k + j];
      edge_weight_backward(graph.nodes[static_cast<std::size_t>(i)], graph.nodes[static_cast<std::size_t>(j)], g,
                           grad_nodes[static_cast<std::size_t>(i)], grad_nodes[static_cast<std::size_t>(j)], graph.metric);
    }
  }
}

nlohmann::json arg_snapshot(const AttentionRelationGraph& graph) {
  const int k = graph.k();
  const int n = graph.batch();
  nlohmann::json nodes = nlohmann::json::array();
  for (int p = 0; p < k; ++p) {
    const auto& t = graph.nodes[static_cast<std::size_t>(p)];
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
    for (double v : t.vec()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    nodes.push_back({{"tap", p},
                     {"height", t.dim(1)},
                     {"width", t.dim(2)},
                     {"min", lo},
                     {"max", hi},
                     {"mean", sum / static_cast<double>(t.size())}});
  }
  std::vector<std::vector<double>> matrix(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k), 0.0));
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += graph.edge(s, i, j) / n;
    }
  }
  return {{"k", k}, {"batch", n}, {"metric", edge_metric_name(graph.metric)}, {"nodes", nodes}, {"edges", matrix}};
}

// ---------------------------------------------------------------------------

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kReLU;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw ConfigError("unknown activation '" + name + "' (expected relu, tanh or identity)");
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kReLU: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

Tensor<double> adaptive_avg_pool(const Tensor<double>& maps, int out) {
  require_rank(maps, 3, "adaptive_avg_pool input");
  const int n = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  Tensor<double> pooled({n, out * out});
  for (int s = 0; s < n; ++s) {
    const double* src = maps.data() + static_cast<std::size_t>(s) * h * w;
    for (int oy = 0; oy < out; ++oy) {
      const int y0 = oy * h / out, y1 = ((oy + 1) * h + out - 1) / out;
      for (int ox = 0; ox < out; ++ox) {
        const int x0 = ox * w / out, x1 = ((ox + 1) * w + out - 1) / out;
        double sum = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) sum += src[y * w + x];
        pooled[static_cast<std::size_t>(s) * out * out + oy * out + ox] = sum / ((y1 - y0) * (x1 - x0));
      }
    }
  }
  return pooled;
}

Tensor<double> adaptive_avg_pool_backward(const Tensor<double>& grad, int in_h, int in_w, int out) {
  const int n = grad.dim(0);
  Tensor<double> g({n, in_h, in_w});
  for (int s = 0; s < n; ++s) {
    double* dst = g.data() + static_cast<std::size_t>(s) * in_h * in_w;
    for (int oy = 0; oy < out; ++oy) {
      const int y0 = oy * in_h / out, y1 = ((oy + 1) * in_h + out - 1) / out;
      for (int ox = 0; ox < out; ++ox) {
        const int x0 = ox * in_w / out, x1 = ((ox + 1) * in_w + out - 1) / out;
        const double v = grad[static_cast<std::size_t>(s) * out * out + oy * out + ox] / ((y1 - y0) * (x1 - x0));
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) dst[y * in_w + x] += v;
      }
    }
  }
  return g;
}

EmbeddingProjector::EmbeddingProjector(int taps, const ProjectorConfig& config, std::uint64_t seed)
    : taps_(taps), config_(config) {
  if (taps < 1) throw ConfigError("embedding projector needs at least one tap");
  if (config.pool_size < 1 || config.embed_dim < 1) {
    throw ConfigError("projector pool_size and embed_dim must be >= 1");
  }
  std::mt19937_64 gen(seed ^ 0xe3bedULL);
  const int fan_in = config.pool_size * config.pool_size;
  for (int side = 0; side < 2; ++side) {
    for (int p = 0; p < taps; ++p) {
      const std::string prefix = std::string(side == 0 ? "teacher" : "student") + ".proj" + std::to_string(p + 1) + ".";
      nn::Parameter<double> weight(prefix + "weight", {config.embed_dim, fan_in}, false);
      nn::uniform_init(weight, 1.0 / std::sqrt(static_cast<double>(fan_in)), gen);
      weights_.push_back(std::move(weight));
      biases_.emplace_back(prefix + "bias", std::vector<int>{config.embed_dim}, false);
    }
  }
}

std::size_t EmbeddingProjector::index(int tap, Side side) const {
  if (tap < 0 || tap >= taps_) {
    throw StateError("embedding projector is not initialised for tap " + std::to_string(tap));
  }
  return static_cast<std::size_t>((side == Side::kTeacher ? 0 : taps_) + tap);
}

Tensor<double> EmbeddingProjector::embed(const Tensor<double>& map, int tap, Side side, Cache* cache) const {
  const std::size_t idx = index(tap, side);
  require_rank(map, 3, "embed input");
  const int n = map.dim(0);
  const int d = config_.embed_dim;
  const int fan_in = config_.pool_size * config_.pool_size;
  Tensor<double> pooled = adaptive_avg_pool(map, config_.pool_size);
  const auto& w = weights_[idx].value;
  const auto& b = biases_[idx].value;
  Tensor<double> out({n, d});
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < d; ++o) {
      double z = b[static_cast<std::size_t>(o)];
      for (int i = 0; i < fan_in; ++i) z += w[static_cast<std::size_t>(o) * fan_in + i] * pooled[static_cast<std::size_t>(s) * fan_in + i];
      switch (config_.activation) {
        case Activation::kReLU: z = z > 0.0 ? z : 0.0; break;
        case Activation::kTanh: z = std::tanh(z); break;
        case Activation::kIdentity: break;
      }
      out[static_cast<std::size_t>(s) * d + o] = z;
    }
  }
  if (cache != nullptr) {
    cache->pooled = std::move(pooled);
    cache->output = out;
    cache->in_h = map.dim(1);
    cache->in_w = map.dim(2);
  }
  return out;
}

Tensor<double> EmbeddingProjector::embed_backward(const Tensor<double>& grad_output, int tap, Side side,
                                                  const Cache& cache) {
  const std::size_t idx = index(tap, side);
  const int n = grad_output.dim(0);
  const int d = config_.embed_dim;
  const int fan_in = config_.pool_size * config_.pool_size;
  auto& w = weights_[idx];
  auto& b = biases_[idx];
  Tensor<double> grad_pooled({n, fan_in});
  for (int s = 0; s < n; ++s) {
    for (int o = 0; o < d; ++o) {
      const double y = cache.output[static_cast<std::size_t>(s) * d + o];
      double g = grad_output[static_cast<std::size_t>(s) * d + o];
      switch (config_.activation) {
        case Activation::kReLU: g = y > 0.0 ? g : 0.0; break;
        case Activation::kTanh: g *= 1.0 - y * y; break;
        case Activation::kIdentity: break;
      }
      if (g == 0.0) continue;
      b.grad[static_cast<std::size_t>(o)] += g;
      for (int i = 0; i < fan_in; ++i) {
        w.grad[static_cast<std::size_t>(o) * fan_in + i] += g * cache.pooled[static_cast<std::size_t>(s) * fan_in + i];
        grad_pooled[static_cast<std::size_t>(s) * fan_in + i] += g * w.value[static_cast<std::size_t>(o) * fan_in + i];
      }
    }
  }
  return adaptive_avg_pool_backward(grad_pooled, cache.in_h, cache.in_w, config_.pool_size);
}

std::vector<nn::Parameter<double>*> EmbeddingProjector::parameters() {
  std::vector<nn::Parameter<double>*> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

BilinearRelation::BilinearRelation(int taps, int dim)
    : taps_(taps), dim_(dim), weight_("relation.weight", {taps, dim, dim}, false) {
  if (taps < 1 || dim < 1) throw ConfigError("bilinear relation needs taps >= 1 and dim >= 1");
  const double diag = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int i = 0; i < taps; ++i) {
    for (int r = 0; r < dim; ++r) weight_.value[(static_cast<std::size_t>(i) * dim + r) * dim + r] = diag;
  }
}

Tensor<double> relation_scores(const Tensor<double>& r_student, const std::vector<Tensor<double>>& r_teacher,
                               const BilinearRelation& relation) {
  const int k = relation.taps();
  const int d = relation.dim();
  if (static_cast<int>(r_teacher.size()) != k) {
    throw InputError("relation: " + std::to_string(r_teacher.size()) + " teacher embeddings for " +
                     std::to_string(k) + " bilinear forms");
  }
  require_rank(r_student, 2, "student embedding");
  const int n = r_student.dim(0);
  if (r_student.dim(1) != d) throw InputError("relation: student embedding dimension mismatch");
  for (const auto& t : r_teacher) require_shape(t, {n, d}, "teacher embedding");
  Tensor<double> scores({n, k});
  std::vector<double> tmp(static_cast<std::size_t>(d));
  for (int s = 0; s < n; ++s) {
    const double* rs = r_student.data() + static_cast<std::size_t>(s) * d;
    for (int i = 0; i < k; ++i) {
      const double* rt = r_teacher[static_cast<std::size_t>(i)].data() + static_cast<std::size_t>(s) * d;
      const double* m = relation.form(i);
      double score = 0.0;
      for (int r = 0; r < d; ++r) {
        double row = 0.0;
        for (int c = 0; c < d; ++c) row += m[r * d + c] * rt[c];
        score += rs[r] * row;
      }
      scores[static_cast<std::size_t>(s) * k + i] = score;
    }
  }
  return scores;
}

Tensor<double> softmax_rows(const Tensor<double>& scores) {
  require_rank(scores, 2, "softmax input");
  const int n = scores.dim(0), k = scores.dim(1);
  Tensor<double> out(scores.shape());
  for (int s = 0; s < n; ++s) {
    const double* row = scores.data() + static_cast<std::size_t>(s) * k;
    for (int i = 0; i < k; ++i) {
      if (!std::isfinite(row[i])) {
        throw NumericalError("non-finite relation score at teacher tap " + std::to_string(i) +
                             " (sample " + std::to_string(s) + ")");
      }
    }
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      const double e = std::exp(row[i] - mx);
      out[static_cast<std::size_t>(s) * k + i] = e;
      sum += e;
    }
    for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(s) * k + i] /= sum;
  }
  return out;
}

Tensor<double> relation_vector(const Tensor<double>& r_student, const std::vector<Tensor<double>>& r_teacher,
                               const BilinearRelation& relation) {
  return softmax_rows(relation_scores(r_student, r_teacher, relation));
}

void relation_vector_backward(const Tensor<double>& r_student, const std::vector<Tensor<double>>& r_teacher,
                              BilinearRelation& relation, const Tensor<double>& beta,
                              const Tensor<double>& grad_beta, RelationGradients& grads) {
  const int k = relation.taps();
  const int d = relation.dim();
  const int n = r_student.dim(0);
  if (grads.student.empty()) grads.student = Tensor<double>({n, d});
  if (grads.teacher.size() != static_cast<std::size_t>(k)) {
    grads.teacher.assign(static_cast<std::size_t>(k), Tensor<double>({n, d}));
  }
  auto& gw = relation.weight().grad;
  std::vector<double> mt(static_cast<std::size_t>(d)), mts(static_cast<std::size_t>(d));
  for (int s = 0; s < n; ++s) {
    const double* b = beta.data() + static_cast<std::size_t>(s) * k;
    const double* gb = grad_beta.data() + static_cast<std::size_t>(s) * k;
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += b[i] * gb[i];
    const double* rs = r_student.data() + static_cast<std::size_t>(s) * d;
    double* grs = grads.student.data() + static_cast<std::size_t>(s) * d;
    for (int i = 0; i < k; ++i) {
      const double gscore = b[i] * (gb[i] - dot);
      if (gscore == 0.0) continue;
      const double* rt = r_teacher[static_cast<std::size_t>(i)].data() + static_cast<std::size_t>(s) * d;
      double* grt = grads.teacher[static_cast<std::size_t>(i)].data() + static_cast<std::size_t>(s) * d;
      const double* m = relation.form(i);
      double* gm = gw.data() + static_cast<std::size_t>(i) * d * d;
      std::fill(mt.begin(), mt.end(), 0.0);
      std::fill(mts.begin(), mts.end(), 0.0);
      for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) {
          mt[static_cast<std::size_t>(r)] += m[r * d + c] * rt[c];
          mts[static_cast<std::size_t>(c)] += m[r * d + c] * rs[r];
          gm[r * d + c] += gscore * rs[r] * rt[c];
        }
      }
      for (int r = 0; r < d; ++r) {
        grs[r] += gscore * mt[static_cast<std::size_t>(r)];
        grt[r] += gscore * mts[static_cast<std::size_t>(r)];
      }
    }
  }
}

}  // namespace argd
