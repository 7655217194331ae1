#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "argd/losses.hpp"
#include "fixtures.hpp"
#include "test_support.hpp"

using namespace argd;
using argd::testing::numeric_gradient;
using argd::testing::random_tensor;
using argd::testing::relative_error;

namespace {

std::vector<Tensor<double>> random_maps(std::mt19937_64& gen, int batch, int k) {
  std::uniform_int_distribution<int> side(1, 4);
  std::vector<Tensor<double>> maps;
  for (int p = 0; p < k; ++p) maps.push_back(random_tensor({batch, side(gen), side(gen)}, gen, 0.05, 1.0));
  return maps;
}

Tensor<double> random_betas(std::mt19937_64& gen, int batch, int k) {
  const auto scores = random_tensor({batch * k, k}, gen, -2.0, 2.0);
  auto beta = softmax_rows(scores);
  beta.reshape({batch, k, k});
  return beta;
}

Tensor<double> fixture_betas() {
  const auto beta = fixtures::oracles().at("beta").get<std::vector<std::vector<double>>>();
  Tensor<double> t({1, 3, 3});
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) t[j * 3 + i] = beta[j][i];
  return t;
}

}  // namespace

TEST_CASE("losses: hand-evaluated values" * doctest::test_suite("oracle")) {
  SUBCASE("node: orthogonal one-hot maps give sqrt(2)") {
    Tensor<double> s({1, 1, 2}), c({1, 1, 2});
    s[0] = 1.0;
    c[1] = 1.0;
    CHECK(std::abs(node_loss({s}, {c}) - std::sqrt(2.0)) <= 1e-10);
  }
  SUBCASE("node: zero student map against a unit-norm map gives 1 with zero gradient") {
    Tensor<double> s({1, 2, 2}), c({1, 2, 2}, 1.0);
    std::vector<Tensor<double>> g;
    const double v = node_loss({s}, {c}, &g);
    CHECK(std::abs(v - 1.0) <= 1e-10);
    for (double x : g[0].vec()) CHECK(x == 0.0);
  }
  SUBCASE("node: matches the frozen fixture") {
    const double expected = fixtures::oracles().at("node_loss").get<double>();
    CHECK(std::abs(node_loss(fixtures::student_maps(), fixtures::teacher_maps()) - expected) <= 1e-10);
  }
  SUBCASE("edge: k = 2 with edges 3 and 1 gives 4") {
    Tensor<double> s({1, 2, 2}), c({1, 2, 2});
    s[1] = s[2] = 3.0;
    c[1] = c[2] = 1.0;
    CHECK(std::abs(edge_loss(s, c) - 4.0) <= 1e-10);
  }
  SUBCASE("edge: k = 3 with one pair off by sqrt(3) gives 1") {
    Tensor<double> s({1, 3, 3}), c({1, 3, 3});
    s[1] = s[3] = std::sqrt(3.0);
    CHECK(std::abs(edge_loss(s, c) - 1.0) <= 1e-10);
  }
  SUBCASE("edge: matches the frozen fixture") {
    const double expected = fixtures::oracles().at("edge_loss").get<double>();
    const auto s = build_arg_from_nodes(fixtures::student_maps());
    const auto c = build_arg_from_nodes(fixtures::teacher_maps());
    CHECK(std::abs(edge_loss(s.edges, c.edges) - expected) <= 1e-10);
  }
  SUBCASE("embedding: matches the frozen fixture") {
    const double expected = fixtures::oracles().at("embedding_loss").get<double>();
    const double v = embedding_loss(fixtures::teacher_maps(), fixtures::student_maps(), fixture_betas());
    CHECK(std::abs(v - expected) <= 1e-10);
  }
  SUBCASE("embedding: matches the brute-force oracle on random graphs") {
    std::mt19937_64 gen(5);
    namespace oracle = argd::testing::oracle;
    for (int trial = 0; trial < 20; ++trial) {
      const int batch = 2, k = 3;
      const auto t = random_maps(gen, batch, k), s = random_maps(gen, batch, k);
      const auto betas = random_betas(gen, batch, k);
      double expected = 0.0;
      for (int b = 0; b < batch; ++b) {
        std::vector<oracle::Map> tm, sm;
        std::vector<std::vector<double>> beta(k, std::vector<double>(k));
        for (int p = 0; p < k; ++p) {
          tm.push_back(oracle::take(t[p], b));
          sm.push_back(oracle::take(s[p], b));
        }
        for (int j = 0; j < k; ++j)
          for (int i = 0; i < k; ++i) beta[j][i] = betas[(b * k + j) * k + i];
        expected += oracle::embedding_loss(tm, sm, beta) / batch;
      }
      CHECK(std::abs(embedding_loss(t, s, betas) - expected) <= 1e-10);
    }
  }
  SUBCASE("embedding: uniform beta over identical graphs is the mean edge row sum") {
    std::mt19937_64 gen(6);
    const auto maps = random_maps(gen, 1, 3);
    Tensor<double> beta({1, 3, 3}, 1.0 / 3.0);
    const auto g = build_arg_from_nodes(maps);
    double expected = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) expected += g.edge(0, i, j) / 3.0;
    CHECK(std::abs(embedding_loss(maps, maps, beta) - expected) <= 1e-10);
  }
  SUBCASE("embedding: normalized metric weighs distances between unit maps") {
    std::mt19937_64 gen(15);
    const auto t = random_maps(gen, 1, 3), s = random_maps(gen, 1, 3);
    const auto betas = random_betas(gen, 1, 3);
    double expected = 0.0;
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 3; ++i) {
        expected += betas[j * 3 + i] * edge_weight(t[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(j)],
                                                   EdgeMetric::kNormalized)[0];
      }
    const double v = embedding_loss(t, s, betas, nullptr, nullptr, EdgeMetric::kNormalized);
    CHECK(std::abs(v - expected) <= 1e-10);
  }
}

TEST_CASE("losses: invariants" * doctest::test_suite("invariant")) {
  std::mt19937_64 gen(2);
  SUBCASE("all losses are non-negative") {
    for (int trial = 0; trial < 50; ++trial) {
      const auto s = random_maps(gen, 3, 3), c = random_maps(gen, 3, 3);
      const auto betas = random_betas(gen, 3, 3);
      CHECK(node_loss(s, c) >= 0.0);
      CHECK(edge_loss(build_arg_from_nodes(s).edges, build_arg_from_nodes(c).edges) >= 0.0);
      CHECK(embedding_loss(c, s, betas) >= 0.0);
      CHECK(embedding_loss(c, s, betas, nullptr, nullptr, EdgeMetric::kNormalized) >= 0.0);
    }
  }
  SUBCASE("node loss is bounded by 2") {
    for (int trial = 0; trial < 50; ++trial) CHECK(node_loss(random_maps(gen, 3, 3), random_maps(gen, 3, 3)) <= 2.0 + 1e-12);
  }
  SUBCASE("node and edge losses are zero for identical graphs") {
    for (const EdgeMetric metric : {EdgeMetric::kRaw, EdgeMetric::kNormalized}) {
      const auto maps = random_maps(gen, 2, 4);
      CHECK(node_loss(maps, maps) <= 1e-12);
      const auto g = build_arg_from_nodes(maps, metric);
      CHECK(edge_loss(g.edges, g.edges) == 0.0);
    }
  }
  SUBCASE("node loss ignores positive rescaling of either operand") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = random_maps(gen, 2, 3), c = random_maps(gen, 2, 3);
      const double base = node_loss(s, c);
      const double factor = std::uniform_real_distribution<double>(0.01, 100.0)(gen);
      auto scaled_s = s, scaled_c = c;
      for (auto& m : scaled_s)
        for (auto& v : m.vec()) v *= factor;
      for (auto& m : scaled_c)
        for (auto& v : m.vec()) v /= factor;
      CHECK(std::abs(node_loss(scaled_s, c) - base) <= 1e-10);
      CHECK(std::abs(node_loss(s, scaled_c) - base) <= 1e-10);
    }
  }
}

TEST_CASE("losses: contract" * doctest::test_suite("contract")) {
  std::mt19937_64 gen(3);
  CHECK_THROWS_AS(node_loss(random_maps(gen, 1, 3), random_maps(gen, 1, 2)), ConfigError);
  CHECK_THROWS_AS(edge_loss(Tensor<double>({1, 3, 3}), Tensor<double>({1, 2, 2})), ConfigError);
  const auto maps = random_maps(gen, 1, 3);
  auto beta = fixture_betas();
  beta[4] += 1e-3;
  CHECK_THROWS_AS(embedding_loss(maps, maps, beta), NumericalError);
}

TEST_CASE("loss gradients match finite differences" * doctest::test_suite("gradcheck")) {
  std::mt19937_64 gen(8);
  const int batch = 2, k = 3;
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    auto s = random_maps(gen, batch, k);
    const auto t = random_maps(gen, batch, k);
    const auto betas = random_betas(gen, batch, k);

    std::vector<Tensor<double>> g_node;
    node_loss(s, t, &g_node);
    for (int p = 0; p < k; ++p) {
      const auto n = numeric_gradient(s[p].vec(), [&] { return node_loss(s, t); });
      CHECK(relative_error(g_node[p].vec(), n) <= 1e-4);
    }

    for (const EdgeMetric metric : {EdgeMetric::kRaw, EdgeMetric::kNormalized}) {
      CAPTURE(edge_metric_name(metric));
      auto edge_objective = [&] {
        return edge_loss(build_arg_from_nodes(s, metric).edges, build_arg_from_nodes(t, metric).edges);
      };
      const auto sg = build_arg_from_nodes(s, metric), tg = build_arg_from_nodes(t, metric);
      Tensor<double> g_edges;
      edge_loss(sg.edges, tg.edges, &g_edges);
      std::vector<Tensor<double>> g_edge;
      for (const auto& m : s) g_edge.emplace_back(m.shape());
      arg_edges_backward(sg, g_edges, g_edge);
      for (int p = 0; p < k; ++p) {
        CHECK(relative_error(g_edge[p].vec(), numeric_gradient(s[p].vec(), edge_objective)) <= 1e-4);
      }

      std::vector<Tensor<double>> g_emb;
      Tensor<double> g_beta;
      const double direct = embedding_loss(t, s, betas, &g_emb, &g_beta, metric);
      for (int p = 0; p < k; ++p) {
        const auto n = numeric_gradient(s[p].vec(), [&] { return embedding_loss(t, s, betas, nullptr, nullptr, metric); });
        CHECK(relative_error(g_emb[p].vec(), n) <= 1e-4);
      }
      // The loss is linear in beta, so <d loss / d beta, beta> reproduces it.
      double linear = 0.0;
      for (std::size_t i = 0; i < betas.size(); ++i) linear += g_beta[i] * betas[i];
      CHECK(std::abs(linear - direct) <= 1e-10);
    }
  }
}

TEST_CASE("cross entropy and logits distillation" * doctest::test_suite("gradcheck")) {
  SUBCASE("uniform logits give log C") {
    const Tensor<double> logits({2, 10}, 0.0);
    const std::vector<int> labels{3, 7};
    CHECK(std::abs(cross_entropy(logits, labels) - std::log(10.0)) <= 1e-12);
  }
  SUBCASE("gradients") {
    std::mt19937_64 gen(9);
    for (int trial = 0; trial < 10; ++trial) {
      auto logits = random_tensor({3, 5}, gen, -3.0, 3.0);
      const auto teacher = random_tensor({3, 5}, gen, -3.0, 3.0);
      const std::vector<int> labels{0, 4, 2};
      Tensor<double> g;
      cross_entropy(logits, labels, &g);
      CHECK(relative_error(g.vec(), numeric_gradient(logits.vec(), [&] { return cross_entropy(logits, labels); })) <= 1e-4);
      logits_distillation(logits, teacher, 4.0, &g);
      CHECK(relative_error(g.vec(), numeric_gradient(logits.vec(), [&] {
                             return logits_distillation(logits, teacher, 4.0);
                           })) <= 1e-4);
    }
  }
  SUBCASE("distillation against itself is zero") {
    std::mt19937_64 gen(10);
    const auto logits = random_tensor({4, 6}, gen);
    CHECK(std::abs(logits_distillation(logits, logits, 2.0)) <= 1e-12);
  }
}

TEST_CASE("overall_loss" * doctest::test_suite("oracle")) {
  std::mt19937_64 gen(11);
  const auto s = build_arg_from_nodes(fixtures::student_maps());
  const auto c = build_arg_from_nodes(fixtures::teacher_maps());
  const auto betas = fixture_betas();
  const auto logits = random_tensor({1, 10}, gen);
  const std::vector<int> labels{2};
  const auto& fx = fixtures::oracles();

  SUBCASE("sums the enabled terms") {
    const auto b = overall_loss(logits, labels, s, c, betas, LossToggles::full());
    const double expected = cross_entropy(logits, labels) + fx.at("node_loss").get<double>() +
                            fx.at("edge_loss").get<double>() + fx.at("embedding_loss").get<double>();
    CHECK(std::abs(b.total - expected) <= 1e-10);
    CHECK(b.logits == 0.0);
  }
  SUBCASE("all toggles off reduces to cross entropy") {
    const auto b = overall_loss(logits, labels, s, c, betas, LossToggles::finetune());
    CHECK(b.total == cross_entropy(logits, labels));
    CHECK(b.node == 0.0);
    CHECK(b.edge == 0.0);
    CHECK(b.embedding == 0.0);
  }
  SUBCASE("nad enables only the node term") {
    const auto b = overall_loss(logits, labels, s, c, betas, LossToggles::nad());
    CHECK(b.node > 0.0);
    CHECK(b.edge == 0.0);
    CHECK(b.embedding == 0.0);
  }
}

TEST_CASE("GraphDistillationLoss" * doctest::test_suite("gradcheck")) {
  ProjectorConfig cfg;
  cfg.embed_dim = 6;
  cfg.activation = Activation::kTanh;
  std::mt19937_64 gen(12);

  auto make_features = [&](int batch) {
    std::vector<Tensor<double>> f;
    f.push_back(random_tensor({batch, 2, 4, 4}, gen));
    f.push_back(random_tensor({batch, 3, 3, 3}, gen));
    f.push_back(random_tensor({batch, 2, 2, 2}, gen));
    return f;
  };

  SUBCASE("teacher gradient is always zero and breakdown adds up") {
    GraphDistillationLoss loss(3, cfg, LossToggles::full(), {}, 1);
    const auto s = make_features(2), t = make_features(2);
    const auto logits = random_tensor({2, 4}, gen);
    const std::vector<int> labels{1, 3};
    const auto r = loss.evaluate(s, t, logits, nullptr, labels, true);
    for (const auto& g : r.grad_teacher_features)
      for (double v : g.vec()) CHECK(v == 0.0);
    const auto& b = r.breakdown;
    CHECK(std::abs(b.total - (b.ce + b.node + b.edge + b.embedding)) <= 1e-12);
    CHECK(r.betas.shape() == std::vector<int>{2, 3, 3});
  }

  SUBCASE("full objective gradient w.r.t. student features and learnable parameters") {
    for (const auto toggles : {LossToggles::nad(), LossToggles::node_edge(), LossToggles::full()})
    for (const EdgeMetric metric : {EdgeMetric::kRaw, EdgeMetric::kNormalized}) {
      CAPTURE(edge_metric_name(metric));
      LossWeights weights;
      weights.graph_metric = metric;
      GraphDistillationLoss loss(3, cfg, toggles, weights, 2);
      for (int trial = 0; trial < 3; ++trial) {
        auto s = make_features(2);
        const auto t = make_features(2);
        auto logits = random_tensor({2, 4}, gen);
        const std::vector<int> labels{0, 2};
        auto objective = [&] { return loss.evaluate(s, t, logits, nullptr, labels, false).breakdown.total; };
        for (auto* p : loss.parameters()) p->zero_grad();
        const auto r = loss.evaluate(s, t, logits, nullptr, labels, true);
        CHECK(relative_error(r.grad_logits.vec(), numeric_gradient(logits.vec(), objective)) <= 1e-4);
        for (int p = 0; p < 3; ++p) {
          CHECK(relative_error(r.grad_student_features[p].vec(), numeric_gradient(s[p].vec(), objective)) <= 1e-4);
        }
        if (toggles.embedding) {
          for (auto* p : loss.parameters()) {
            CAPTURE(p->name);
            CHECK(relative_error(p->grad, numeric_gradient(p->value, objective)) <= 1e-4);
          }
        }
      }
    }
  }

  SUBCASE("logits distillation is off by default and adds a term when enabled") {
    const auto s = make_features(1), t = make_features(1);
    const auto logits = random_tensor({1, 4}, gen), teacher_logits = random_tensor({1, 4}, gen);
    const std::vector<int> labels{0};
    GraphDistillationLoss plain(3, cfg, LossToggles::full(), {}, 3);
    CHECK(plain.evaluate(s, t, logits, &teacher_logits, labels, false).breakdown.logits == 0.0);
    LossWeights w;
    w.logits_distillation = true;
    GraphDistillationLoss kd(3, cfg, LossToggles::full(), w, 3);
    CHECK(kd.evaluate(s, t, logits, &teacher_logits, labels, false).breakdown.logits > 0.0);
  }

  SUBCASE("tap count must match") {
    GraphDistillationLoss loss(3, cfg, LossToggles::full(), {}, 4);
    auto s = make_features(1);
    s.pop_back();
    const auto logits = random_tensor({1, 4}, gen);
    const std::vector<int> labels{0};
    CHECK_THROWS_AS(loss.evaluate(s, s, logits, nullptr, labels, false), ConfigError);
    CHECK_THROWS_AS(GraphDistillationLoss(1, cfg, LossToggles::full(), {}, 4), ConfigError);
  }
}
