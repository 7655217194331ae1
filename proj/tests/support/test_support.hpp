#pragma once

// Test-only helpers: random inputs, central finite differences, and naive
// oracle implementations of the graph math written independently of src/.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "argd/tensor.hpp"

namespace argd::testing {

inline Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& gen, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.vec()) v = dist(gen);
  return t;
}

/// Central differences of f with respect to every entry of x.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - n|| / max(||a||, ||n||, 1e-6). The floor keeps the epsilon term on a
/// gradient that is otherwise zero from reading as a 100% error.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-6);
}

namespace oracle {

/// Bilinear sample of a (h, w) map at half-pixel-centred output coordinates.
inline double sample(const std::vector<double>& map, int h, int w, int out_h, int out_w, int y, int x) {
  auto coord = [](int o, int in, int out) {
    const double c = (o + 0.5) * in / out - 0.5;
    return c < 0 ? 0.0 : c;
  };
  const double sy = coord(y, h, out_h), sx = coord(x, w, out_w);
  auto at = [&](int yy, int xx) {
    yy = std::min(yy, h - 1);
    xx = std::min(xx, w - 1);
    return map[static_cast<std::size_t>(yy * w + xx)];
  };
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * (1 - fx) * at(y0, x0) + (1 - fy) * fx * at(y0, x0 + 1) + fy * (1 - fx) * at(y0 + 1, x0) +
         fy * fx * at(y0 + 1, x0 + 1);
}

inline std::vector<double> resize(const std::vector<double>& map, int h, int w, int out_h, int out_w) {
  std::vector<double> out(static_cast<std::size_t>(out_h * out_w));
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) out[static_cast<std::size_t>(y * out_w + x)] = sample(map, h, w, out_h, out_w, y, x);
  return out;
}

struct Map {
  std::vector<double> v;
  int h;
  int w;
};

inline double distance(const Map& a, const Map& b) {
  const int h = std::max(a.h, b.h), w = std::max(a.w, b.w);
  const auto ra = resize(a.v, a.h, a.w, h, w);
  const auto rb = resize(b.v, b.h, b.w, h, w);
  double s = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) s += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return std::sqrt(s);
}

/// One sample's map p from a batch tensor (B, H, W).
inline Map take(const Tensor<double>& t, int b) {
  const int h = t.dim(1), w = t.dim(2);
  std::vector<double> v(t.data() + static_cast<std::size_t>(b) * h * w, t.data() + static_cast<std::size_t>(b + 1) * h * w);
  return {v, h, w};
}

/// Brute-force sum_i sum_j beta[j][i] * dist(teacher_i, student_j) for one sample.
inline double embedding_loss(const std::vector<Map>& teacher, const std::vector<Map>& student,
                             const std::vector<std::vector<double>>& beta) {
  double total = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i)
    for (std::size_t j = 0; j < student.size(); ++j) total += beta[j][i] * distance(teacher[i], student[j]);
  return total;
}

}  // namespace oracle

}  // namespace argd::testing
