#pragma once

// Dense compute kernels behind the convolutional layers.
//
// argd::kernels holds the OpenMP-parallel implementations used for training.
// argd::kernels::reference holds straightforward serial loops with the same
// signatures; tests compare the two and the benchmark target times both.

#include <span>

namespace argd::kernels {

struct ConvGeometry {
  int batch = 0;
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  int patch_size() const { return in_channels * kernel * kernel; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major.
template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

/// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose(int rows, int cols, const T* in, T* out);

/// Unfolds one (C, H, W) image into a (C*kh*kw, OH*OW) column matrix.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col);

/// Adjoint of im2col: accumulates columns back into a zeroed (C, H, W) image.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image);

/// y = conv(x, w) + bias. x: (N, C, H, W); w: (O, C, k, k); bias: O entries or empty.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y);

/// Gradients of conv2d_forward. grad_x may be empty to skip the input gradient.
/// grad_w and grad_bias are overwritten (not accumulated). The batch is
/// reduced in fixed-size chunks summed in order, so results do not depend on
/// the thread count.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> grad_y, std::span<T> grad_x, std::span<T> grad_w,
                     std::span<T> grad_bias);

namespace reference {

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> grad_y, std::span<T> grad_x, std::span<T> grad_w,
                     std::span<T> grad_bias);

}  // namespace reference

/// Number of OpenMP worker threads kernels will use (1 without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace argd::kernels
