#include <vector>

#include "tiednet/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tiednet::kernels {

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {

// Rows [row_begin, row_end) of c (+)= a * b, i-k-j order so the inner loop
// streams over contiguous rows of b and c.
template <class T>
void gemm_rows(std::int64_t row_begin, std::int64_t row_end, std::int64_t k,
               std::int64_t n, const T* a, const T* b, T* c, bool accumulate) {
  for (std::int64_t i = row_begin; i < row_end; ++i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] = 0;
    }
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose_into(std::int64_t rows, std::int64_t cols, const T* src,
                    T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace

template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* a,
          const T* b, T* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::int64_t i = 0; i < m; ++i) {
    gemm_rows(i, i + 1, k, n, a, b, c, accumulate);
  }
}

template <class T>
void gemm_batched(std::int64_t batch, std::int64_t m, std::int64_t k,
                  std::int64_t n, const T* a, const T* b, T* c) {
#pragma omp parallel for collapse(2) schedule(static) if (batch * m * k * n > 32768)
  for (std::int64_t g = 0; g < batch; ++g) {
    for (std::int64_t i = 0; i < m; ++i) {
      gemm_rows(i, i + 1, k, n, a + g * m * k, b + g * k * n, c + g * m * n,
                false);
    }
  }
}

template <class T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::int64_t pixels = g.out_pixels();
#pragma omp parallel for schedule(static) if (g.patch_size() * pixels > 32768)
  for (std::int64_t row = 0; row < g.patch_size(); ++row) {
    const std::int64_t ci = row / (g.kh * g.kw);
    const std::int64_t i = (row / g.kw) % g.kh;
    const std::int64_t j = row % g.kw;
    T* out = col + row * pixels;
    for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
      const std::int64_t ih = oh * g.stride - g.pad + i;
      for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
        const std::int64_t iw = ow * g.stride - g.pad + j;
        const bool inside = ih >= 0 && ih < g.height && iw >= 0 && iw < g.width;
        out[oh * g.out_w + ow] =
            inside ? image[(ci * g.height + ih) * g.width + iw] : T(0);
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const std::int64_t pixels = g.out_pixels();
  const std::int64_t taps = g.kh * g.kw;
#pragma omp parallel for schedule(static) if (g.patch_size() * pixels > 32768)
  for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
    T* plane = image + ci * g.height * g.width;
    for (std::int64_t p = 0; p < g.height * g.width; ++p) plane[p] = 0;
    for (std::int64_t t = 0; t < taps; ++t) {
      const std::int64_t i = t / g.kw;
      const std::int64_t j = t % g.kw;
      const T* in = col + (ci * taps + t) * pixels;
      for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
        const std::int64_t ih = oh * g.stride - g.pad + i;
        if (ih < 0 || ih >= g.height) continue;
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          const std::int64_t iw = ow * g.stride - g.pad + j;
          if (iw < 0 || iw >= g.width) continue;
          plane[ih * g.width + iw] += in[oh * g.out_w + ow];
        }
      }
    }
  }
}

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  const std::int64_t in_plane = g.c_in * g.height * g.width;
  const std::int64_t out_plane = g.c_out * g.out_pixels();
  std::vector<T> col(static_cast<std::size_t>(g.patch_size() * g.out_pixels()));
  for (std::int64_t n = 0; n < g.batch; ++n) {
    im2col(g, x + n * in_plane, col.data());
    gemm(g.c_out, g.patch_size(), g.out_pixels(), w, col.data(),
         y + n * out_plane, false);
  }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w,
                           T* gx) {
  const std::int64_t in_plane = g.c_in * g.height * g.width;
  const std::int64_t out_plane = g.c_out * g.out_pixels();
  std::vector<T> wt(static_cast<std::size_t>(g.c_out * g.patch_size()));
  transpose_into(g.c_out, g.patch_size(), w, wt.data());
  std::vector<T> col(static_cast<std::size_t>(g.patch_size() * g.out_pixels()));
  for (std::int64_t n = 0; n < g.batch; ++n) {
    gemm(g.patch_size(), g.c_out, g.out_pixels(), wt.data(), gy + n * out_plane,
         col.data(), false);
    col2im(g, col.data(), gx + n * in_plane);
  }
}

template <class T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* gy,
                            T* gw) {
  const std::int64_t in_plane = g.c_in * g.height * g.width;
  const std::int64_t out_plane = g.c_out * g.out_pixels();
  const std::int64_t pixels = g.out_pixels();
  std::vector<T> col(static_cast<std::size_t>(g.patch_size() * pixels));
  std::vector<T> colt(col.size());
  for (std::int64_t n = 0; n < g.batch; ++n) {
    im2col(g, x + n * in_plane, col.data());
    transpose_into(g.patch_size(), pixels, col.data(), colt.data());
    gemm(g.c_out, pixels, g.patch_size(), gy + n * out_plane, colt.data(), gw,
         true);
  }
}

#define TIEDNET_INSTANTIATE(T)                                                \
  template void gemm<T>(std::int64_t, std::int64_t, std::int64_t, const T*,   \
                        const T*, T*, bool);                                  \
  template void gemm_batched<T>(std::int64_t, std::int64_t, std::int64_t,     \
                                std::int64_t, const T*, const T*, T*);        \
  template void im2col<T>(const ConvGeometry&, const T*, T*);                 \
  template void col2im<T>(const ConvGeometry&, const T*, T*);                 \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*,    \
                                  T*);                                        \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*,       \
                                         const T*, T*);                       \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*,      \
                                          const T*, T*);

TIEDNET_INSTANTIATE(float)
TIEDNET_INSTANTIATE(double)
#undef TIEDNET_INSTANTIATE

}  // namespace parallel
}  // namespace tiednet::kernels
