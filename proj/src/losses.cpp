#include "argd/losses.hpp"

#include <algorithm>
#include <cmath>

namespace argd {

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"ce", b.ce},           {"node", b.node},     {"edge", b.edge},
          {"embedding", b.embedding}, {"logits", b.logits}, {"total", b.total}};
}

namespace {

void require_same_taps(std::size_t student, std::size_t teacher, const char* what) {
  if (student != teacher) {
    throw ConfigError(std::string(what) + ": student has " + std::to_string(student) +
                      " nodes, teacher has " + std::to_string(teacher));
  }
}

std::vector<Tensor<double>> zeros_like(const std::vector<Tensor<double>>& ts) {
  std::vector<Tensor<double>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.emplace_back(t.shape());
  return out;
}

}  // namespace

double node_loss(const std::vector<Tensor<double>>& student, const std::vector<Tensor<double>>& teacher,
                 std::vector<Tensor<double>>* grad_student, std::span<const double> node_weights) {
  require_same_taps(student.size(), teacher.size(), "node loss");
  const int k = static_cast<int>(student.size());
  if (k == 0) throw ConfigError("node loss over an empty node set");
  if (!node_weights.empty() && static_cast<int>(node_weights.size()) != k) {
    throw ConfigError("node loss: " + std::to_string(node_weights.size()) + " node weights for " +
                      std::to_string(k) + " taps");
  }
  if (grad_student != nullptr && grad_student->size() != student.size()) *grad_student = zeros_like(student);
  const int n = student.front().dim(0);
  const double scale = 1.0 / (static_cast<double>(k) * n);
  double total = 0.0;
  for (int p = 0; p < k; ++p) {
    const auto& s_map = student[static_cast<std::size_t>(p)];
    const auto& c_map = teacher[static_cast<std::size_t>(p)];
    if (s_map.dim(0) != n || c_map.dim(0) != n) throw InputError("node loss: batch size mismatch");
    const double wp = node_weights.empty() ? 1.0 : node_weights[static_cast<std::size_t>(p)];
    const auto [h, w] = common_shape(s_map, c_map);
    const Tensor<double> rs = resize_to(s_map, h, w);
    const Tensor<double> rc = resize_to(c_map, h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor<double> grad_rs({n, h, w});
    for (int b = 0; b < n; ++b) {
      const std::span<const double> sv(rs.data() + b * plane, plane);
      const std::span<const double> cv(rc.data() + b * plane, plane);
      const NormalizedMap us = normalize_attention(sv);
      const NormalizedMap uc = normalize_attention(cv);
      double sq = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = uc.unit[i] - us.unit[i];
        sq += d * d;
      }
      const double dist = std::sqrt(sq);
      total += wp * scale * dist;
      if (grad_student == nullptr || dist == 0.0) continue;
      std::vector<double> g_unit(plane);
      for (std::size_t i = 0; i < plane; ++i) g_unit[i] = wp * scale * (us.unit[i] - uc.unit[i]) / dist;
      const auto g = normalize_attention_backward(sv, us, g_unit);
      std::copy(g.begin(), g.end(), grad_rs.data() + b * plane);
    }
    if (grad_student != nullptr) {
      const Tensor<double> g = resize_to_backward(grad_rs, s_map.dim(1), s_map.dim(2));
      auto& dst = (*grad_student)[static_cast<std::size_t>(p)];
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }
  return total;
}

double edge_loss(const Tensor<double>& student_edges, const Tensor<double>& teacher_edges,
                 Tensor<double>* grad_student) {
  require_rank(student_edges, 3, "student edges");
  require_rank(teacher_edges, 3, "teacher edges");
  const int n = student_edges.dim(0), k = student_edges.dim(1);
  if (teacher_edges.dim(1) != k) {
    throw ConfigError("edge loss: student graph has " + std::to_string(k) + " nodes, teacher has " +
                      std::to_string(teacher_edges.dim(1)));
  }
  if (teacher_edges.dim(0) != n) throw InputError("edge loss: batch size mismatch");
  const int pairs = AttentionRelationGraph::edge_count(k);
  if (pairs == 0) throw ConfigError("edge loss needs at least 2 nodes");
  if (grad_student != nullptr) *grad_student = Tensor<double>(student_edges.shape());
  const double scale = 1.0 / (static_cast<double>(pairs) * n);
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < k; ++i) {
      for (int j = i + 1; j < k; ++j) {
        const std::size_t at = (static_cast<std::size_t>(b) * k + i) * k + j;
        const double diff = teacher_edges[at] - student_edges[at];
        total += scale * diff * diff;
        if (grad_student != nullptr) (*grad_student)[at] = -2.0 * scale * diff;
      }
    }
  }
  return total;
}

double embedding_loss(const std::vector<Tensor<double>>& teacher, const std::vector<Tensor<double>>& student,
                      const Tensor<double>& betas, std::vector<Tensor<double>>* grad_student,
                      Tensor<double>* grad_betas, EdgeMetric metric) {
  require_same_taps(student.size(), teacher.size(), "embedding loss");
  const int k = static_cast<int>(student.size());
  if (k == 0) throw ConfigError("embedding loss over an empty node set");
  const int n = student.front().dim(0);
  require_shape(betas, {n, k, k}, "relation vectors");
  for (int b = 0; b < n; ++b) {
    for (int j = 0; j < k; ++j) {
      double sum = 0.0;
      for (int i = 0; i < k; ++i) sum += betas[(static_cast<std::size_t>(b) * k + j) * k + i];
      if (!(std::abs(sum - 1.0) <= 1e-5)) {
        throw NumericalError("relation vector of student node " + std::to_string(j) + " sums to " +
                             std::to_string(sum) + " (sample " + std::to_string(b) + ")");
      }
    }
  }
  if (grad_student != nullptr && grad_student->size() != student.size()) *grad_student = zeros_like(student);
  if (grad_betas != nullptr) *grad_betas = Tensor<double>(betas.shape());
  double total = 0.0;
  std::vector<double> weights(static_cast<std::size_t>(n));
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const auto& ci = teacher[static_cast<std::size_t>(i)];
      const auto& sj = student[static_cast<std::size_t>(j)];
      const auto dist = edge_weight(ci, sj, metric);
      for (int b = 0; b < n; ++b) {
        const std::size_t at = (static_cast<std::size_t>(b) * k + j) * k + i;
        total += betas[at] * dist[static_cast<std::size_t>(b)] / n;
        weights[static_cast<std::size_t>(b)] = betas[at] / n;
        if (grad_betas != nullptr) (*grad_betas)[at] = dist[static_cast<std::size_t>(b)] / n;
      }
      if (grad_student != nullptr) {
        Tensor<double> discard(ci.shape());
        edge_weight_backward(ci, sj, weights, discard, (*grad_student)[static_cast<std::size_t>(j)], metric);
      }
    }
  }
  return total;
}

double cross_entropy(const Tensor<double>& logits, std::span<const int> labels, Tensor<double>* grad_logits) {
  require_rank(logits, 2, "logits");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw InputError("cross entropy: label count mismatch");
  if (grad_logits != nullptr) *grad_logits = Tensor<double>(logits.shape());
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    const double* row = logits.data() + static_cast<std::size_t>(b) * c;
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= c) throw InputError("cross entropy: label out of range");
    const double mx = *std::max_element(row, row + c);
    double sum = 0.0;
    for (int i = 0; i < c; ++i) sum += std::exp(row[i] - mx);
    const double lse = mx + std::log(sum);
    total += (lse - row[y]) / n;
    if (grad_logits != nullptr) {
      for (int i = 0; i < c; ++i) {
        (*grad_logits)[static_cast<std::size_t>(b) * c + i] = (std::exp(row[i] - lse) - (i == y ? 1.0 : 0.0)) / n;
      }
    }
  }
  return total;
}

double logits_distillation(const Tensor<double>& student_logits, const Tensor<double>& teacher_logits,
                           double temperature, Tensor<double>* grad_student) {
  require_shape(teacher_logits, student_logits.shape(), "teacher logits");
  const int n = student_logits.dim(0), c = student_logits.dim(1);
  if (grad_student != nullptr) *grad_student = Tensor<double>(student_logits.shape());
  auto log_softmax = [&](const double* row, std::vector<double>& out) {
    double mx = -INFINITY;
    for (int i = 0; i < c; ++i) mx = std::max(mx, row[i] / temperature);
    double sum = 0.0;
    for (int i = 0; i < c; ++i) sum += std::exp(row[i] / temperature - mx);
    const double lse = mx + std::log(sum);
    for (int i = 0; i < c; ++i) out[static_cast<std::size_t>(i)] = row[i] / temperature - lse;
  };
  std::vector<double> ls(static_cast<std::size_t>(c)), lt(static_cast<std::size_t>(c));
  double total = 0.0;
  const double t2 = temperature * temperature;
  for (int b = 0; b < n; ++b) {
    log_softmax(student_logits.data() + static_cast<std::size_t>(b) * c, ls);
    log_softmax(teacher_logits.data() + static_cast<std::size_t>(b) * c, lt);
    for (int i = 0; i < c; ++i) {
      const double pt = std::exp(lt[static_cast<std::size_t>(i)]);
      total += t2 * pt * (lt[static_cast<std::size_t>(i)] - ls[static_cast<std::size_t>(i)]) / n;
      if (grad_student != nullptr) {
        const double ps = std::exp(ls[static_cast<std::size_t>(i)]);
        (*grad_student)[static_cast<std::size_t>(b) * c + i] = temperature * (ps - pt) / n;
      }
    }
  }
  return total;
}

LossBreakdown overall_loss(const Tensor<double>& student_logits, std::span<const int> labels,
                           const AttentionRelationGraph& student, const AttentionRelationGraph& teacher,
                           const Tensor<double>& betas, const LossToggles& toggles, const LossWeights& weights) {
  require_same_taps(static_cast<std::size_t>(student.k()), static_cast<std::size_t>(teacher.k()), "overall loss");
  LossBreakdown out;
  out.ce = cross_entropy(student_logits, labels);
  if (toggles.node) out.node = weights.node_term * node_loss(student.nodes, teacher.nodes, nullptr, weights.node_weights);
  if (toggles.edge) out.edge = weights.edge_term * edge_loss(student.edges, teacher.edges);
  if (toggles.embedding) {
    out.embedding = embedding_loss(teacher.nodes, student.nodes, betas, nullptr, nullptr, student.metric);
  }
  out.total = out.ce + out.node + out.edge + out.embedding + out.logits;
  return out;
}

// ---------------------------------------------------------------------------

GraphDistillationLoss::GraphDistillationLoss(int taps, const ProjectorConfig& projector, const LossToggles& toggles,
                                             const LossWeights& weights, std::uint64_t seed)
    : taps_(taps),
      toggles_(toggles),
      weights_(weights),
      projector_(taps, projector, seed),
      relation_(taps, projector.embed_dim) {
  if (taps < 2) throw ConfigError("graph distillation needs at least 2 taps");
  if (!weights_.node_weights.empty() && static_cast<int>(weights_.node_weights.size()) != taps) {
    throw ConfigError("node_weights must have one entry per tap");
  }
}

std::vector<nn::Parameter<double>*> GraphDistillationLoss::parameters() {
  auto params = projector_.parameters();
  params.push_back(&relation_.weight());
  return params;
}

GraphDistillationLoss::Result GraphDistillationLoss::evaluate(
    const std::vector<Tensor<double>>& student_features, const std::vector<Tensor<double>>& teacher_features,
    const Tensor<double>& student_logits, const Tensor<double>* teacher_logits, std::span<const int> labels,
    bool compute_gradients) {
  require_same_taps(student_features.size(), teacher_features.size(), "graph distillation");
  if (static_cast<int>(student_features.size()) != taps_) {
    throw ConfigError("graph distillation configured for " + std::to_string(taps_) + " taps, got " +
                      std::to_string(student_features.size()));
  }
  Result r;
  r.student_graph = build_arg(student_features, weights_.graph_metric);
  r.teacher_graph = build_arg(teacher_features, weights_.graph_metric);
  const auto& s_nodes = r.student_graph.nodes;
  const auto& c_nodes = r.teacher_graph.nodes;
  const int k = taps_;
  const int n = r.student_graph.batch();
  if (r.teacher_graph.batch() != n) throw InputError("teacher and student batches differ");

  std::vector<Tensor<double>> grad_nodes = zeros_like(s_nodes);
  auto* gn = compute_gradients ? &grad_nodes : nullptr;

  auto& b = r.breakdown;
  b.ce = cross_entropy(student_logits, labels, compute_gradients ? &r.grad_logits : nullptr);

  if (weights_.logits_distillation) {
    if (teacher_logits == nullptr) throw ConfigError("logits distillation enabled without teacher logits");
    Tensor<double> g;
    b.logits = weights_.kd_weight * logits_distillation(student_logits, *teacher_logits, weights_.kd_temperature,
                                                        compute_gradients ? &g : nullptr);
    if (compute_gradients) {
      for (std::size_t i = 0; i < g.size(); ++i) r.grad_logits[i] += weights_.kd_weight * g[i];
    }
  }

  if (toggles_.node) {
    std::vector<Tensor<double>> g;
    b.node = weights_.node_term * node_loss(s_nodes, c_nodes, gn ? &g : nullptr, weights_.node_weights);
    if (gn) {
      for (int p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < g[static_cast<std::size_t>(p)].size(); ++i) {
          grad_nodes[static_cast<std::size_t>(p)][i] += weights_.node_term * g[static_cast<std::size_t>(p)][i];
        }
      }
    }
  }

  if (toggles_.edge) {
    Tensor<double> g_edges;
    b.edge = weights_.edge_term * edge_loss(r.student_graph.edges, r.teacher_graph.edges, gn ? &g_edges : nullptr);
    if (gn) {
      for (auto& v : g_edges.vec()) v *= weights_.edge_term;
      arg_edges_backward(r.student_graph, g_edges, grad_nodes);
    }
  }

  if (toggles_.embedding) {
    std::vector<EmbeddingProjector::Cache> c_cache(static_cast<std::size_t>(k)), s_cache(static_cast<std::size_t>(k));
    std::vector<Tensor<double>> r_teacher, r_student;
    for (int p = 0; p < k; ++p) {
      r_teacher.push_back(projector_.embed(c_nodes[static_cast<std::size_t>(p)], p, Side::kTeacher, &c_cache[static_cast<std::size_t>(p)]));
      r_student.push_back(projector_.embed(s_nodes[static_cast<std::size_t>(p)], p, Side::kStudent, &s_cache[static_cast<std::size_t>(p)]));
    }
    r.betas = Tensor<double>({n, k, k});
    std::vector<Tensor<double>> beta_rows;
    for (int j = 0; j < k; ++j) {
      beta_rows.push_back(relation_vector(r_student[static_cast<std::size_t>(j)], r_teacher, relation_));
      for (int s = 0; s < n; ++s) {
        for (int i = 0; i < k; ++i) {
          r.betas[(static_cast<std::size_t>(s) * k + j) * k + i] = beta_rows.back()[static_cast<std::size_t>(s) * k + i];
        }
      }
    }
    Tensor<double> grad_betas;
    b.embedding = embedding_loss(c_nodes, s_nodes, r.betas, gn, gn ? &grad_betas : nullptr, weights_.graph_metric);
    if (gn) {
      RelationGradients rg_teacher_total;
      rg_teacher_total.teacher.assign(static_cast<std::size_t>(k), Tensor<double>({n, projector_.dim()}));
      for (int j = 0; j < k; ++j) {
        Tensor<double> gb({n, k});
        for (int s = 0; s < n; ++s) {
          for (int i = 0; i < k; ++i) gb[static_cast<std::size_t>(s) * k + i] = grad_betas[(static_cast<std::size_t>(s) * k + j) * k + i];
        }
        RelationGradients rg;
        relation_vector_backward(r_student[static_cast<std::size_t>(j)], r_teacher, relation_,
                                 beta_rows[static_cast<std::size_t>(j)], gb, rg);
        const Tensor<double> g_map = projector_.embed_backward(rg.student, j, Side::kStudent, s_cache[static_cast<std::size_t>(j)]);
        for (std::size_t i = 0; i < g_map.size(); ++i) grad_nodes[static_cast<std::size_t>(j)][i] += g_map[i];
        for (int i = 0; i < k; ++i) {
          auto& dst = rg_teacher_total.teacher[static_cast<std::size_t>(i)];
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += rg.teacher[static_cast<std::size_t>(i)][e];
        }
      }
      // Teacher projectors train through the relation scores; the map
      // gradient they return is dropped because teacher attention is constant.
      for (int i = 0; i < k; ++i) {
        projector_.embed_backward(rg_teacher_total.teacher[static_cast<std::size_t>(i)], i, Side::kTeacher,
                                  c_cache[static_cast<std::size_t>(i)]);
      }
    }
  }

  b.total = b.ce + b.node + b.edge + b.embedding + b.logits;
  if (!std::isfinite(b.total)) throw NumericalError("non-finite distillation loss");

  if (compute_gradients) {
    for (int p = 0; p < k; ++p) {
      r.grad_student_features.push_back(
          extract_attention_backward(student_features[static_cast<std::size_t>(p)], grad_nodes[static_cast<std::size_t>(p)]));
      r.grad_teacher_features.emplace_back(teacher_features[static_cast<std::size_t>(p)].shape());
    }
  }
  return r;
}

}  // namespace argd
