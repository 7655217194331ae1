#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "argd/attention.hpp"
#include "fixtures.hpp"
#include "test_support.hpp"

using namespace argd;
using argd::testing::random_tensor;

TEST_CASE("extract_attention: hand-evaluated values" * doctest::test_suite("oracle")) {
  SUBCASE("all-zero features give an all-zero map") {
    const Tensor<double> f({2, 4, 3, 3});
    const auto t = extract_attention(f);
    CHECK(t.shape() == std::vector<int>{2, 3, 3});
    CHECK(std::all_of(t.vec().begin(), t.vec().end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("single channel of 3s squares to 9") {
    const Tensor<double> f({1, 1, 2, 2}, 3.0);
    const auto t = extract_attention(f);
    for (double v : t.vec()) CHECK(std::abs(v - 9.0) <= 1e-12);
  }
  SUBCASE("two channels (2, -1) average to 2.5") {
    Tensor<double> f({1, 2, 1, 1});
    f[0] = 2.0;
    f[1] = -1.0;
    CHECK(std::abs(extract_attention(f)[0] - 2.5) <= 1e-10);
  }
  SUBCASE("matches the frozen fixture") {
    const auto& fx = fixtures::oracles();
    Tensor<double> f({2, 3, 2, 2});
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = (static_cast<double>((i * 5 + 1) % 7) - 3.0) / 2.0;
    const auto expected = fx.at("attention_2x3x2x2").get<std::vector<double>>();
    const auto t = extract_attention(f);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(t[i] - expected[i]) <= 1e-10);
  }
}

TEST_CASE("extract_attention: invariants" * doctest::test_suite("invariant")) {
  std::mt19937_64 gen(7);
  const auto f = random_tensor({3, 5, 4, 4}, gen);
  const auto t = extract_attention(f);
  CHECK(std::all_of(t.vec().begin(), t.vec().end(), [](double v) { return v >= 0.0; }));

  SUBCASE("channel permutation invariance") {
    std::vector<int> perm{3, 0, 4, 1, 2};
    Tensor<double> permuted(f.shape());
    const std::size_t hw = 16;
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 5; ++c)
        std::copy_n(f.data() + (b * 5 + perm[c]) * hw, hw, permuted.data() + (b * 5 + c) * hw);
    const auto tp = extract_attention(permuted);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(tp[i] - t[i]) <= 1e-12);
  }
  SUBCASE("zero exactly where every channel is zero") {
    Tensor<double> g = f;
    for (int c = 0; c < 5; ++c) g[(0 * 5 + c) * 16 + 6] = 0.0;
    const auto tg = extract_attention(g);
    CHECK(tg[6] == 0.0);
    CHECK(tg[7] > 0.0);
  }
  SUBCASE("rejects non-4D input") { CHECK_THROWS_AS(extract_attention(Tensor<double>({2, 3, 4})), InputError); }
}

TEST_CASE("extract_attention: gradient matches finite differences" * doctest::test_suite("gradcheck")) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_tensor({2, 3, 4, 4}, gen);
    const auto w = random_tensor({2, 4, 4}, gen);
    auto objective = [&] {
      const auto t = extract_attention(f);
      return std::inner_product(t.vec().begin(), t.vec().end(), w.vec().begin(), 0.0);
    };
    const auto analytic = extract_attention_backward(f, w);
    const auto numeric = argd::testing::numeric_gradient(f.vec(), objective);
    CHECK(argd::testing::relative_error(analytic.vec(), numeric) <= 1e-4);
  }
}

TEST_CASE("resize_to_match" * doctest::test_suite("oracle")) {
  std::mt19937_64 gen(3);
  SUBCASE("same shape passes through unchanged") {
    const auto a = random_tensor({2, 4, 4}, gen);
    const auto b = random_tensor({2, 4, 4}, gen);
    const auto [ra, rb] = resize_to_match(a, b);
    CHECK(ra == a);
    CHECK(rb == b);
  }
  SUBCASE("constant 1x1 map upsamples to a constant 2x2 map") {
    const Tensor<double> a({1, 1, 1}, 0.37);
    const Tensor<double> b({1, 2, 2}, 0.0);
    const auto [ra, rb] = resize_to_match(a, b);
    CHECK(ra.shape() == std::vector<int>{1, 2, 2});
    for (double v : ra.vec()) CHECK(std::abs(v - 0.37) <= 1e-15);
  }
  SUBCASE("16x16 vs 8x8 gives two 16x16 maps") {
    const auto [ra, rb] = resize_to_match(random_tensor({1, 16, 16}, gen), random_tensor({1, 8, 8}, gen));
    CHECK(ra.shape() == std::vector<int>{1, 16, 16});
    CHECK(rb.shape() == std::vector<int>{1, 16, 16});
  }
  SUBCASE("mixed aspect takes the elementwise maximum") {
    const auto [ra, rb] = resize_to_match(random_tensor({1, 8, 2}, gen), random_tensor({1, 3, 5}, gen));
    CHECK(ra.shape() == std::vector<int>{1, 8, 5});
    CHECK(rb.shape() == std::vector<int>{1, 8, 5});
  }
  SUBCASE("shape idempotence") {
    const auto [ra, rb] = resize_to_match(random_tensor({2, 4, 4}, gen), random_tensor({2, 2, 2}, gen));
    const auto [ra2, rb2] = resize_to_match(ra, rb);
    CHECK(ra2 == ra);
    CHECK(rb2 == rb);
  }
  SUBCASE("bilinear values match the frozen fixture") {
    const auto& fx = fixtures::oracles();
    const auto s = fixtures::student_maps()[1];
    const auto t = fixtures::teacher_maps()[1];
    const auto up3 = resize_bilinear(s, 4, 4);
    const auto up2 = resize_bilinear(t, 4, 4);
    const auto e3 = fx.at("resize_3_to_4").get<std::vector<double>>();
    const auto e2 = fx.at("resize_2_to_4").get<std::vector<double>>();
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(std::abs(up3[i] - e3[i]) <= 1e-10);
      CHECK(std::abs(up2[i] - e2[i]) <= 1e-10);
    }
  }
}

TEST_CASE("resize_bilinear_backward is the adjoint of resize_bilinear" * doctest::test_suite("gradcheck")) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor({2, 3, 2}, gen);
    const auto y = random_tensor({2, 5, 4}, gen);
    const auto rx = resize_bilinear(x, 5, 4);
    const auto ry = resize_bilinear_backward(y, 3, 2);
    const double lhs = std::inner_product(rx.vec().begin(), rx.vec().end(), y.vec().begin(), 0.0);
    const double rhs = std::inner_product(x.vec().begin(), x.vec().end(), ry.vec().begin(), 0.0);
    CHECK(std::abs(lhs - rhs) <= 1e-12);
  }
}

TEST_CASE("normalize_attention" * doctest::test_suite("oracle")) {
  SUBCASE("[3, 4] -> [0.6, 0.8]") {
    const std::vector<double> v{3.0, 4.0};
    const auto n = normalize_attention(v);
    CHECK(std::abs(n.unit[0] - 0.6) <= 1e-10);
    CHECK(std::abs(n.unit[1] - 0.8) <= 1e-10);
    CHECK_FALSE(n.degenerate);
  }
  SUBCASE("scale invariance") {
    std::mt19937_64 gen(9);
    const auto t = random_tensor({1, 4, 4}, gen, 0.0, 1.0);
    std::vector<double> scaled(t.vec());
    for (auto& v : scaled) v *= 17.5;
    const auto a = normalize_attention(t.vec());
    const auto b = normalize_attention(scaled);
    for (std::size_t i = 0; i < a.unit.size(); ++i) CHECK(std::abs(a.unit[i] - b.unit[i]) <= 1e-12);
  }
  SUBCASE("unit-norm input is unchanged") {
    const std::vector<double> v{0.6, 0.0, 0.8};
    const auto n = normalize_attention(v);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(n.unit[i] - v[i]) <= 1e-11);
  }
  SUBCASE("zero map is flagged and maps to zero with zero gradient") {
    const std::vector<double> v(5, 0.0);
    const auto n = normalize_attention(v);
    CHECK(n.degenerate);
    CHECK(std::all_of(n.unit.begin(), n.unit.end(), [](double x) { return x == 0.0; }));
    const std::vector<double> g(5, 1.0);
    const auto gb = normalize_attention_backward(v, n, g);
    CHECK(std::all_of(gb.begin(), gb.end(), [](double x) { return x == 0.0; }));
  }
}
