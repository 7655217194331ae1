// Parallel kernels vs. their serial reference loops on desk-scale shapes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "argd/kernels.hpp"

namespace {

using argd::kernels::ConvGeometry;

std::vector<float> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// args: batch, in_channels, spatial, out_channels, stride
ConvGeometry geometry(const benchmark::State& state) {
  ConvGeometry g;
  g.batch = static_cast<int>(state.range(0));
  g.in_channels = static_cast<int>(state.range(1));
  g.in_height = g.in_width = static_cast<int>(state.range(2));
  g.out_channels = static_cast<int>(state.range(3));
  g.stride = static_cast<int>(state.range(4));
  return g;
}

double conv_flops(const ConvGeometry& g) {
  return 2.0 * g.batch * g.out_channels * g.out_height() * g.out_width() * g.patch_size();
}

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  auto x = random_vector(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_height * g.in_width, 1);
  auto w = random_vector(static_cast<std::size_t>(g.out_channels) * g.patch_size(), 2);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (Reference) {
      argd::kernels::reference::conv2d_forward<float>(g, x, w, {}, y);
    } else {
      argd::kernels::conv2d_forward<float>(g, x, w, {}, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOPS"] =
      benchmark::Counter(conv_flops(g) * state.iterations() / 1e9, benchmark::Counter::kIsRate);
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  const std::size_t xs = static_cast<std::size_t>(g.batch) * g.in_channels * g.in_height * g.in_width;
  const std::size_t ys = static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width();
  auto x = random_vector(xs, 1);
  auto w = random_vector(static_cast<std::size_t>(g.out_channels) * g.patch_size(), 2);
  auto gy = random_vector(ys, 3);
  std::vector<float> gx(xs), gw(w.size()), gb(static_cast<std::size_t>(g.out_channels));
  for (auto _ : state) {
    if constexpr (Reference) {
      argd::kernels::reference::conv2d_backward<float>(g, x, w, gy, gx, gw, gb);
    } else {
      argd::kernels::conv2d_backward<float>(g, x, w, gy, gx, gw, gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * conv_flops(g) * state.iterations() / 1e9,
                                                benchmark::Counter::kIsRate);
}

template <bool Reference>
void BM_Gemm(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const int k = static_cast<int>(state.range(2));
  auto a = random_vector(static_cast<std::size_t>(m) * k, 1);
  auto b = random_vector(static_cast<std::size_t>(k) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    if constexpr (Reference) {
      argd::kernels::reference::gemm(m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      argd::kernels::gemm(m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] =
      benchmark::Counter(2.0 * m * n * k * state.iterations() / 1e9, benchmark::Counter::kIsRate);
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->Args({16, 16, 32, 16, 1})->Args({16, 32, 16, 32, 1})->Args({16, 64, 8, 64, 1})->Args({16, 16, 32, 32, 2});
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Args({64, 1024, 144})->Args({64, 64, 576});
BENCHMARK(BM_Gemm<true>)->Args({64, 1024, 144})->Args({64, 64, 576});
BENCHMARK(BM_ConvForward<false>)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<true>)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<false>)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<true>)->Apply(conv_shapes)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
