#include "argd/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace argd::kernels {

namespace {

// Register tile: kRows rows of C times a column strip of 256 bytes.
constexpr int kRows = 4;
template <typename T>
constexpr int kStrip = 256 / static_cast<int>(sizeof(T));

template <typename T, int Rows>
inline void gemm_tile(int n_cols, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                      bool accumulate) {
  constexpr int S = kStrip<T>;
  T acc[Rows][S];
  for (int r = 0; r < Rows; ++r) {
    if (accumulate) {
      for (int j = 0; j < n_cols; ++j) acc[r][j] = c[r * ldc + j];
      for (int j = n_cols; j < S; ++j) acc[r][j] = T{};
    } else {
      for (int j = 0; j < S; ++j) acc[r][j] = T{};
    }
  }
  if (n_cols == S) {
    for (int p = 0; p < k; ++p) {
      const T* brow = b + static_cast<std::size_t>(p) * ldb;
      for (int r = 0; r < Rows; ++r) {
        const T av = a[r * lda + p];
#pragma omp simd
        for (int j = 0; j < S; ++j) acc[r][j] += av * brow[j];
      }
    }
  } else {
    for (int p = 0; p < k; ++p) {
      const T* brow = b + static_cast<std::size_t>(p) * ldb;
      for (int r = 0; r < Rows; ++r) {
        const T av = a[r * lda + p];
        for (int j = 0; j < n_cols; ++j) acc[r][j] += av * brow[j];
      }
    }
  }
  for (int r = 0; r < Rows; ++r) {
    std::memcpy(c + static_cast<std::size_t>(r) * ldc, acc[r], sizeof(T) * n_cols);
  }
}

}  // namespace

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  constexpr int S = kStrip<T>;
  for (int j0 = 0; j0 < n; j0 += S) {
    const int nc = std::min(S, n - j0);
    int i = 0;
    for (; i + kRows <= m; i += kRows) {
      gemm_tile<T, kRows>(nc, k, a + static_cast<std::size_t>(i) * k, k, b + j0, n,
                          c + static_cast<std::size_t>(i) * n + j0, n, accumulate);
    }
    for (; i < m; ++i) {
      gemm_tile<T, 1>(nc, k, a + static_cast<std::size_t>(i) * k, k, b + j0, n,
                      c + static_cast<std::size_t>(i) * n + j0, n, accumulate);
    }
  }
}

template <typename T>
void transpose(int rows, int cols, const T* in, T* out) {
  constexpr int kBlock = 32;
  for (int r0 = 0; r0 < rows; r0 += kBlock) {
    for (int c0 = 0; c0 < cols; c0 += kBlock) {
      const int r1 = std::min(rows, r0 + kBlock);
      const int c1 = std::min(cols, c0 + kBlock);
      for (int r = r0; r < r1; ++r) {
        for (int cc = c0; cc < c1; ++cc) {
          out[static_cast<std::size_t>(cc) * rows + r] = in[static_cast<std::size_t>(r) * cols + cc];
        }
      }
    }
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int hw = oh * ow;
  for (int ch = 0; ch < g.in_channels; ++ch) {
    const T* plane = image + static_cast<std::size_t>(ch) * g.in_height * g.in_width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* row = col + static_cast<std::size_t>((ch * g.kernel + ky) * g.kernel + kx) * hw;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride - g.pad + ky;
          T* out = row + y * ow;
          if (iy < 0 || iy >= g.in_height) {
            std::fill(out, out + ow, T{});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_width;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride - g.pad + kx;
            out[x] = (ix >= 0 && ix < g.in_width) ? src[ix] : T{};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int hw = oh * ow;
  for (int ch = 0; ch < g.in_channels; ++ch) {
    T* plane = image + static_cast<std::size_t>(ch) * g.in_height * g.in_width;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + static_cast<std::size_t>((ch * g.kernel + ky) * g.kernel + kx) * hw;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_width;
          const T* src = row + y * ow;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_width) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y) {
  const int hw = g.out_height() * g.out_width();
  const int patch = g.patch_size();
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_height * g.in_width;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * hw;
  const bool pointwise = g.is_pointwise();

#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch) * hw);
#pragma omp for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
      const T* src = x.data() + n * in_stride;
      if (!pointwise) {
        im2col(g, src, col.data());
        src = col.data();
      }
      T* dst = y.data() + n * out_stride;
      gemm(g.out_channels, hw, patch, w.data(), src, dst, false);
      if (!bias.empty()) {
        for (int o = 0; o < g.out_channels; ++o) {
          T* plane = dst + static_cast<std::size_t>(o) * hw;
          const T b = bias[o];
          for (int i = 0; i < hw; ++i) plane[i] += b;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> grad_y, std::span<T> grad_x, std::span<T> grad_w,
                     std::span<T> grad_bias) {
  constexpr int kChunk = 4;
  const int hw = g.out_height() * g.out_width();
  const int patch = g.patch_size();
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_height * g.in_width;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * hw;
  const std::size_t wsize = static_cast<std::size_t>(g.out_channels) * patch;
  const bool pointwise = g.is_pointwise();
  const int chunks = (g.batch + kChunk - 1) / kChunk;

  std::vector<T> w_t(wsize);
  transpose(g.out_channels, patch, w.data(), w_t.data());
  std::vector<T> partial_w(static_cast<std::size_t>(chunks) * wsize, T{});

#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(patch) * hw);
    std::vector<T> col_t(static_cast<std::size_t>(patch) * hw);
#pragma omp for schedule(static)
    for (int c = 0; c < chunks; ++c) {
      T* gw = partial_w.data() + static_cast<std::size_t>(c) * wsize;
      const int n_end = std::min(g.batch, (c + 1) * kChunk);
      for (int n = c * kChunk; n < n_end; ++n) {
        const T* src = x.data() + n * in_stride;
        const T* gy = grad_y.data() + n * out_stride;
        if (pointwise) {
          transpose(g.in_channels, hw, src, col_t.data());
        } else {
          im2col(g, src, col.data());
          transpose(patch, hw, col.data(), col_t.data());
        }
        gemm(g.out_channels, patch, hw, gy, col_t.data(), gw, true);
        if (!grad_x.empty()) {
          T* gx = grad_x.data() + n * in_stride;
          if (pointwise) {
            gemm(patch, hw, g.out_channels, w_t.data(), gy, gx, false);
          } else {
            gemm(patch, hw, g.out_channels, w_t.data(), gy, col.data(), false);
            std::fill(gx, gx + in_stride, T{});
            col2im(g, col.data(), gx);
          }
        }
      }
    }
  }

  std::fill(grad_w.begin(), grad_w.end(), T{});
  for (int c = 0; c < chunks; ++c) {
    const T* part = partial_w.data() + static_cast<std::size_t>(c) * wsize;
    for (std::size_t i = 0; i < wsize; ++i) grad_w[i] += part[i];
  }
  if (!grad_bias.empty()) {
    for (int o = 0; o < g.out_channels; ++o) {
      T sum{};
      for (int n = 0; n < g.batch; ++n) {
        const T* plane = grad_y.data() + n * out_stride + static_cast<std::size_t>(o) * hw;
        for (int i = 0; i < hw; ++i) sum += plane[i];
      }
      grad_bias[o] = sum;
    }
  }
}

namespace reference {

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = accumulate ? c[static_cast<std::size_t>(i) * n + j] : T{};
      for (int p = 0; p < k; ++p) {
        sum += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      }
      c[static_cast<std::size_t>(i) * n + j] = sum;
    }
  }
}

namespace {

template <typename T>
std::size_t at4(int c, int h, int w, int i, int j, int k, int l) {
  return ((static_cast<std::size_t>(i) * c + j) * h + k) * w + l;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int n = 0; n < g.batch; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T sum = bias.empty() ? T{} : bias[o];
          for (int ch = 0; ch < g.in_channels; ++ch) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
                sum += x[at4<T>(g.in_channels, g.in_height, g.in_width, n, ch, iy, ix)] *
                       w[at4<T>(g.in_channels, g.kernel, g.kernel, o, ch, ky, kx)];
              }
            }
          }
          y[at4<T>(g.out_channels, oh, ow, n, o, oy, ox)] = sum;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> grad_y, std::span<T> grad_x, std::span<T> grad_w,
                     std::span<T> grad_bias) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  std::fill(grad_w.begin(), grad_w.end(), T{});
  std::fill(grad_x.begin(), grad_x.end(), T{});
  std::fill(grad_bias.begin(), grad_bias.end(), T{});
  for (int n = 0; n < g.batch; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T gy = grad_y[at4<T>(g.out_channels, oh, ow, n, o, oy, ox)];
          if (!grad_bias.empty()) grad_bias[o] += gy;
          for (int ch = 0; ch < g.in_channels; ++ch) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
                const std::size_t xi = at4<T>(g.in_channels, g.in_height, g.in_width, n, ch, iy, ix);
                const std::size_t wi = at4<T>(g.in_channels, g.kernel, g.kernel, o, ch, ky, kx);
                grad_w[wi] += gy * x[xi];
                if (!grad_x.empty()) grad_x[xi] += gy * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

#define ARGD_INSTANTIATE(T)                                                                      \
  template void gemm<T>(int, int, int, const T*, const T*, T*, bool);                            \
  template void transpose<T>(int, int, const T*, T*);                                            \
  template void im2col<T>(const ConvGeometry&, const T*, T*);                                    \
  template void col2im<T>(const ConvGeometry&, const T*, T*);                                    \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>);                             \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>); \
  template void reference::gemm<T>(int, int, int, const T*, const T*, T*, bool);                 \
  template void reference::conv2d_forward<T>(const ConvGeometry&, std::span<const T>,            \
                                             std::span<const T>, std::span<const T>,             \
                                             std::span<T>);                                      \
  template void reference::conv2d_backward<T>(const ConvGeometry&, std::span<const T>,           \
                                              std::span<const T>, std::span<const T>,            \
                                              std::span<T>, std::span<T>, std::span<T>);

ARGD_INSTANTIATE(float)
ARGD_INSTANTIATE(double)

#undef ARGD_INSTANTIATE

}  // namespace argd::kernels
