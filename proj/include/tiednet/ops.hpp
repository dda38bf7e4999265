#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "tiednet/autograd.hpp"
#include "tiednet/tensor.hpp"

// Differentiable operations. Each op computes its result eagerly and, when
// any input is tracked on the active tape, records a backward rule.

namespace tiednet {

enum class Activation { relu, gelu };

Activation parse_activation(std::string_view name);
const char* activation_name(Activation kind);

// Counts forward multiply-accumulates issued by matmul / bmm / conv ops on
// the calling thread while alive. Backward passes are not counted.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::int64_t total() const { return total_; }

 private:
  friend void count_macs(std::int64_t macs);
  MacCounter* previous_;
  std::int64_t total_ = 0;
};

void count_macs(std::int64_t macs);

// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [g x m x k] * [g x k x n], optionally transposing the last two axes
// of either operand first.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
           bool trans_b = false);
// Rank-2 transpose; the result is a view sharing the source storage.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape dims);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds b broadcast over the leading axes of x; b.dims() must be a suffix of
// x.dims().
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor sum(const Tensor& x);

Tensor activation(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

enum class NormMode { train, eval };

// x: [N x C x H x W]. In train mode normalizes with batch statistics and
// updates running_mean / running_var in place (unbiased variance, EMA with
// `momentum`); eval mode reads the running statistics only.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, NormMode mode,
                    double eps = 1e-5, double momentum = 0.1);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits,
                     std::span<const std::int64_t> labels);

struct Conv2dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  // Round output extents down instead of requiring exact division.
  bool floor_mode = false;
};

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel,
                             const Conv2dOptions& opts);

// Direct cross-correlation; x [N x Cin x H x W], w [Cout x Cin x kh x kw].
Tensor conv2d(const Tensor& x, const Tensor& w, std::int64_t stride,
              std::int64_t padding);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const Conv2dOptions& opts);
// 1x1 convolution with a rank-2 weight [Cout x Cin] (which may be a
// transpose view). Output extents use floor rounding.
Tensor conv1x1(const Tensor& x, const Tensor& w, std::int64_t stride = 1);

Tensor max_pool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                  std::int64_t padding);
Tensor global_avg_pool(const Tensor& x);

// [B x T x d] -> [B*h x T x d/h], head-major split of the feature axis.
Tensor split_heads(const Tensor& x, std::int64_t heads);
Tensor merge_heads(const Tensor& x, std::int64_t heads);
// [N x C x H x W] -> [N x H*W x C]
Tensor tokens_from_map(const Tensor& x);
// [N x T x d], token [d] -> [N x T+1 x d]
Tensor prepend_token(const Tensor& x, const Tensor& token);
// [N x T x d] -> [N x d]
Tensor select_token(const Tensor& x, std::int64_t index);

}  // namespace tiednet
