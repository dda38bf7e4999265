#include "tiednet/kernels.hpp"

namespace tiednet::kernels::serial {

template <class T>
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const T* a,
          const T* b, T* c, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <class T>
void gemm_batched(std::int64_t batch, std::int64_t m, std::int64_t k,
                  std::int64_t n, const T* a, const T* b, T* c) {
  for (std::int64_t g = 0; g < batch; ++g) {
    gemm(m, k, n, a + g * m * k, b + g * k * n, c + g * m * n, false);
  }
}

template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          T acc = 0;
          for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
            for (std::int64_t i = 0; i < g.kh; ++i) {
              const std::int64_t ih = oh * g.stride - g.pad + i;
              if (ih < 0 || ih >= g.height) continue;
              for (std::int64_t j = 0; j < g.kw; ++j) {
                const std::int64_t iw = ow * g.stride - g.pad + j;
                if (iw < 0 || iw >= g.width) continue;
                acc += w[((co * g.c_in + ci) * g.kh + i) * g.kw + j] *
                       x[((n * g.c_in + ci) * g.height + ih) * g.width + iw];
              }
            }
          }
          y[((n * g.c_out + co) * g.out_h + oh) * g.out_w + ow] = acc;
        }
      }
    }
  }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w,
                           T* gx) {
  const std::int64_t in_size = g.batch * g.c_in * g.height * g.width;
  for (std::int64_t i = 0; i < in_size; ++i) gx[i] = 0;
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
      for (std::int64_t i = 0; i < g.kh; ++i) {
        for (std::int64_t j = 0; j < g.kw; ++j) {
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + i;
            if (ih < 0 || ih >= g.height) continue;
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + j;
              if (iw < 0 || iw >= g.width) continue;
              T s = 0;
              for (std::int64_t co = 0; co < g.c_out; ++co) {
                s += w[((co * g.c_in + ci) * g.kh + i) * g.kw + j] *
                     gy[((n * g.c_out + co) * g.out_h + oh) * g.out_w + ow];
              }
              gx[((n * g.c_in + ci) * g.height + ih) * g.width + iw] += s;
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* gy,
                            T* gw) {
  for (std::int64_t co = 0; co < g.c_out; ++co) {
    for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
      for (std::int64_t i = 0; i < g.kh; ++i) {
        for (std::int64_t j = 0; j < g.kw; ++j) {
          T acc = gw[((co * g.c_in + ci) * g.kh + i) * g.kw + j];
          for (std::int64_t n = 0; n < g.batch; ++n) {
            for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
              const std::int64_t ih = oh * g.stride - g.pad + i;
              if (ih < 0 || ih >= g.height) continue;
              for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
                const std::int64_t iw = ow * g.stride - g.pad + j;
                if (iw < 0 || iw >= g.width) continue;
                acc += gy[((n * g.c_out + co) * g.out_h + oh) * g.out_w + ow] *
                       x[((n * g.c_in + ci) * g.height + ih) * g.width + iw];
              }
            }
          }
          gw[((co * g.c_in + ci) * g.kh + i) * g.kw + j] = acc;
        }
      }
    }
  }
}

#define TIEDNET_INSTANTIATE(T)                                                \
  template void gemm<T>(std::int64_t, std::int64_t, std::int64_t, const T*,   \
                        const T*, T*, bool);                                  \
  template void gemm_batched<T>(std::int64_t, std::int64_t, std::int64_t,     \
                                std::int64_t, const T*, const T*, T*);        \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*,    \
                                  T*);                                        \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*,       \
                                         const T*, T*);                       \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*,      \
                                          const T*, T*);

TIEDNET_INSTANTIATE(float)
TIEDNET_INSTANTIATE(double)
#undef TIEDNET_INSTANTIATE

}  // namespace tiednet::kernels::serial
