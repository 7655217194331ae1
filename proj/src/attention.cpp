#include "argd/attention.hpp"

#include <algorithm>
#include <cmath>

namespace argd {

Tensor<double> extract_attention(const Tensor<double>& features) {
  require_rank(features, 4, "extract_attention input");
  const int n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  if (c < 1) throw InputError("extract_attention: feature map has no channels");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<double> out({n, h, w});
  const double inv_c = 1.0 / c;
  for (int b = 0; b < n; ++b) {
    double* dst = out.data() + static_cast<std::size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const double* src = features.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i] * src[i];
    }
    for (std::size_t i = 0; i < hw; ++i) dst[i] *= inv_c;
  }
  return out;
}

Tensor<double> extract_attention_backward(const Tensor<double>& features,
                                          const Tensor<double>& grad_attention) {
  const int n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  require_shape(grad_attention, {n, h, w}, "extract_attention_backward gradient");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<double> grad(features.shape());
  const double scale = 2.0 / c;
  for (int b = 0; b < n; ++b) {
    const double* g = grad_attention.data() + static_cast<std::size_t>(b) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) grad[off + i] = scale * features[off + i] * g[i];
    }
  }
  return grad;
}

namespace {

// Source taps for one output coordinate under half-pixel bilinear sampling.
struct Taps1d {
  int lo;
  int hi;
  double frac;
};

std::vector<Taps1d> bilinear_taps(int in, int out) {
  std::vector<Taps1d> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    const int lo = std::min(static_cast<int>(src), in - 1);
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

Tensor<double> resize_bilinear(const Tensor<double>& maps, int out_h, int out_w) {
  require_rank(maps, 3, "resize input");
  const int n = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1) throw InputError("resize of an empty map");
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor<double> out({n, out_h, out_w});
  for (int b = 0; b < n; ++b) {
    const double* src = maps.data() + static_cast<std::size_t>(b) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(b) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& [y0, y1, fy] = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& [x0, x1, fx] = tx[static_cast<std::size_t>(x)];
        const double top = (1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
        const double bottom = (1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
        dst[y * out_w + x] = (1 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

Tensor<double> resize_bilinear_backward(const Tensor<double>& grad_out, int in_h, int in_w) {
  require_rank(grad_out, 3, "resize gradient");
  const int n = grad_out.dim(0), out_h = grad_out.dim(1), out_w = grad_out.dim(2);
  const auto ty = bilinear_taps(in_h, out_h);
  const auto tx = bilinear_taps(in_w, out_w);
  Tensor<double> grad({n, in_h, in_w});
  for (int b = 0; b < n; ++b) {
    const double* g = grad_out.data() + static_cast<std::size_t>(b) * out_h * out_w;
    double* dst = grad.data() + static_cast<std::size_t>(b) * in_h * in_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& [y0, y1, fy] = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& [x0, x1, fx] = tx[static_cast<std::size_t>(x)];
        const double v = g[y * out_w + x];
        dst[y0 * in_w + x0] += (1 - fy) * (1 - fx) * v;
        dst[y0 * in_w + x1] += (1 - fy) * fx * v;
        dst[y1 * in_w + x0] += fy * (1 - fx) * v;
        dst[y1 * in_w + x1] += fy * fx * v;
      }
    }
  }
  return grad;
}

std::pair<int, int> common_shape(const Tensor<double>& a, const Tensor<double>& b) {
  require_rank(a, 3, "attention map");
  require_rank(b, 3, "attention map");
  return {std::max(a.dim(1), b.dim(1)), std::max(a.dim(2), b.dim(2))};
}

Tensor<double> resize_to(const Tensor<double>& maps, int h, int w) {
  if (maps.dim(1) == h && maps.dim(2) == w) return maps;
  return resize_bilinear(maps, h, w);
}

Tensor<double> resize_to_backward(const Tensor<double>& grad, int in_h, int in_w) {
  if (grad.dim(1) == in_h && grad.dim(2) == in_w) return grad;
  return resize_bilinear_backward(grad, in_h, in_w);
}

std::pair<Tensor<double>, Tensor<double>> resize_to_match(const Tensor<double>& a,
                                                          const Tensor<double>& b) {
  if (a.empty() || b.empty()) throw InputError("resize_to_match: empty attention map");
  if (a.dim(0) != b.dim(0)) throw InputError("resize_to_match: batch sizes differ");
  const auto [h, w] = common_shape(a, b);
  return {resize_to(a, h, w), resize_to(b, h, w)};
}

NormalizedMap normalize_attention(std::span<const double> map) {
  NormalizedMap out;
  double sq = 0.0;
  for (double v : map) sq += v * v;
  out.norm = std::sqrt(sq);
  out.degenerate = out.norm == 0.0;
  out.unit.resize(map.size());
  const double inv = 1.0 / (out.norm + kNormEpsilon);
  for (std::size_t i = 0; i < map.size(); ++i) out.unit[i] = map[i] * inv;
  return out;
}

std::vector<double> normalize_attention_backward(std::span<const double> map,
                                                 const NormalizedMap& normalized,
                                                 std::span<const double> grad_unit) {
  std::vector<double> grad(map.size(), 0.0);
  if (normalized.degenerate) return grad;
  const double n = normalized.norm;
  const double denom = n + kNormEpsilon;
  double dot = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i) dot += map[i] * grad_unit[i];
  const double coeff = dot / (n * denom * denom);
  for (std::size_t i = 0; i < map.size(); ++i) grad[i] = grad_unit[i] / denom - map[i] * coeff;
  return grad;
}

}  // namespace argd
