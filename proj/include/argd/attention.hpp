#pragma once

// Node-level math of the attention relation graph: attention extraction,
// the bilinear resize that brings two maps to a common shape, and L2
// normalization. Attention batches are (B, H, W) tensors in double.

#include <span>
#include <utility>
#include <vector>

#include "argd/tensor.hpp"

namespace argd {

/// Added to every normalization denominator.
inline constexpr double kNormEpsilon = 1e-12;

/// out[b, h, w] = (1 / C) * sum_c F[b, c, h, w]^2
Tensor<double> extract_attention(const Tensor<double>& features);

/// d loss / d F given d loss / d attention.
Tensor<double> extract_attention_backward(const Tensor<double>& features,
                                          const Tensor<double>& grad_attention);

/// Bilinear resize of (B, h, w) maps to (B, out_h, out_w) with half-pixel
/// centres (corners not aligned). Constant maps stay constant.
Tensor<double> resize_bilinear(const Tensor<double>& maps, int out_h, int out_w);

/// Adjoint of resize_bilinear.
Tensor<double> resize_bilinear_backward(const Tensor<double>& grad_out, int in_h, int in_w);

/// Elementwise maximum of the two spatial shapes.
std::pair<int, int> common_shape(const Tensor<double>& a, const Tensor<double>& b);

/// Resizes both maps to their common shape; a map already there is returned as is.
std::pair<Tensor<double>, Tensor<double>> resize_to_match(const Tensor<double>& a,
                                                          const Tensor<double>& b);

/// Resize to (h, w), skipping the copy when the shape already matches.
Tensor<double> resize_to(const Tensor<double>& maps, int h, int w);
Tensor<double> resize_to_backward(const Tensor<double>& grad, int in_h, int in_w);

struct NormalizedMap {
  std::vector<double> unit;  ///< map / (||map|| + eps)
  double norm = 0.0;
  bool degenerate = false;   ///< all-zero input; unit is the zero vector
};

NormalizedMap normalize_attention(std::span<const double> map);

/// d loss / d map given d loss / d unit. Zero for degenerate maps.
std::vector<double> normalize_attention_backward(std::span<const double> map,
                                                 const NormalizedMap& normalized,
                                                 std::span<const double> grad_unit);

}  // namespace argd
