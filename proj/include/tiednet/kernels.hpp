#pragma once

#include <cstdint>

// Dense compute kernels on contiguous row-major buffers.
//
// Two implementations are kept side by side: `serial` holds plain loop
// nests used as the reference in tests, `parallel` holds the OpenMP versions
// (im2col for convolution). Both accumulate every output element in the same
// order, so they agree bit for bit for gemm, conv forward, and conv weight
// gradients at any thread count.

namespace tiednet::kernels {

struct ConvGeometry {
  std::int64_t batch, c_in, height, width;
  std::int64_t c_out, kh, kw;
  std::int64_t stride, pad;
  std::int64_t out_h, out_w;

  std::int64_t patch_size() const { return c_in * kh * kw; }
  std::int64_t out_pixels() const { return out_h * out_w; }
};

namespace serial {

// c = a[m x k] * b[k x n]; with accumulate, c += a * b.
template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* a,
          const T* b, T* c, bool accumulate = false);

template <class T>
void gemm_batched(std::int64_t batch, std::int64_t m, std::int64_t k,
                  std::int64_t n, const T* a, const T* b, T* c);

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y);

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w,
                           T* gx);

// gw += dL/dw
template <class T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* gy,
                            T* gw);

}  // namespace serial

namespace parallel {

template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* a,
          const T* b, T* c, bool accumulate = false);

template <class T>
void gemm_batched(std::int64_t batch, std::int64_t m, std::int64_t k,
                  std::int64_t n, const T* a, const T* b, T* c);

template <class T>
void im2col(const ConvGeometry& g, const T* image, T* col);

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* image);

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y);

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w,
                           T* gx);

template <class T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* gy,
                            T* gw);

}  // namespace parallel

bool openmp_enabled();
int max_threads();

// Entry points used by the ops layer.
template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* a,
          const T* b, T* c, bool accumulate = false) {
  parallel::gemm(m, k, n, a, b, c, accumulate);
}

template <class T>
void gemm_batched(std::int64_t batch, std::int64_t m, std::int64_t k,
                  std::int64_t n, const T* a, const T* b, T* c) {
  parallel::gemm_batched(batch, m, k, n, a, b, c);
}

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  parallel::conv2d_forward(g, x, w, y);
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w,
                           T* gx) {
  parallel::conv2d_backward_input(g, gy, w, gx);
}

template <class T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* gy,
                            T* gw) {
  parallel::conv2d_backward_weight(g, x, gy, gw);
}

}  // namespace tiednet::kernels
