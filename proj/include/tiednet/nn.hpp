#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tiednet/autograd.hpp"
#include "tiednet/ops.hpp"

// Conventional (untied) layers: the baselines the tied layers are compared
// against, plus the ViT / ResNet scaffolding.

namespace tiednet {

class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor forward(const Tensor& x) = 0;
  // Every Parameter the module reads, each listed once (includes frozen
  // buffers such as batch-norm running statistics).
  virtual std::vector<ParamPtr> parameters() const = 0;
  // Forward multiply-accumulates for an input of the given shape.
  virtual std::int64_t macs(const Shape& input) const = 0;
  virtual Shape output_shape(const Shape& input) const { return input; }
  virtual void set_mode(NormMode) {}
};

// y = x * weight^T + bias over the last axis of x. `weight` is [out x in] and
// may be a transpose view; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Appends the parameters of `from` to `into`, skipping ones already present.
void append_unique(std::vector<ParamPtr>& into,
                   const std::vector<ParamPtr>& from);

class LinearLayer : public Module {
 public:
  LinearLayer(const std::string& name, std::int64_t in, std::int64_t out,
              bool bias, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;
  Shape output_shape(const Shape& input) const override;

  std::int64_t in, out;
  ParamPtr W;  // [out x in]
  ParamPtr b;  // [out] or null
};

class LayerNormLayer : public Module {
 public:
  LayerNormLayer(const std::string& name, std::int64_t dim, DType dtype,
                 double eps = 1e-6);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape&) const override { return 0; }

  ParamPtr gamma, beta;
  double eps;
};

class BatchNorm2dLayer : public Module {
 public:
  BatchNorm2dLayer(const std::string& name, std::int64_t channels, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape&) const override { return 0; }
  void set_mode(NormMode m) override { mode = m; }

  ParamPtr gamma, beta;
  ParamPtr running_mean, running_var;  // frozen
  NormMode mode = NormMode::train;
  double eps = 1e-5;
  double momentum = 0.1;
};

// Weights for one multi-head attention evaluation, in the y = W x convention.
// w_q and w_k are [qk x d] (qk == d unless configured otherwise), w_v and
// w_proj are [d x d]. Matrices may be transpose views; biases may be
// undefined.
struct AttentionWeights {
  Tensor w_q, w_k, w_v, w_proj;
  Tensor b_q, b_k, b_v, b_proj;
};

// Per head: softmax(Q K^T / sqrt(qk/h)) V, heads concatenated and projected.
// When `probs` is given it receives the [B*h x T x T] attention matrices.
Tensor multi_head_attention(const Tensor& x, const AttentionWeights& weights,
                            std::int64_t heads, Tensor* probs = nullptr);

std::int64_t attention_macs(const Shape& input, std::int64_t heads,
                            std::int64_t qk_dim);

class MhaLayer : public Module {
 public:
  // qk_dim <= 0 selects qk_dim == dim.
  MhaLayer(const std::string& name, std::int64_t dim, std::int64_t heads,
           bool qkv_bias, bool proj_bias, DType dtype,
           std::int64_t qk_dim = 0);

  Tensor forward(const Tensor& x) override;
  Tensor forward(const Tensor& x, Tensor* probs);
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;

  std::int64_t dim, heads, qk_dim;
  ParamPtr W_q, W_k;  // [qk_dim x dim]
  ParamPtr W_v, W_proj;
  ParamPtr b_q, b_k, b_v, b_proj;  // null when disabled
};

class FfnLayer : public Module {
 public:
  FfnLayer(const std::string& name, std::int64_t dim, std::int64_t hidden,
           Activation act, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;

  std::int64_t dim, hidden;
  Activation act;
  ParamPtr W_1;  // [hidden x dim]
  ParamPtr W_2;  // [dim x hidden]
  ParamPtr b_1, b_2;
};

// reduce 1x1 -> BN -> relu -> 3x3 (stride) -> BN -> relu -> expand 1x1 -> BN.
// Residual addition and the final relu are left to the caller. Weights of the
// 1x1 convolutions are rank-2 and may be transpose views.
Tensor bottleneck_body(const Tensor& x, const Tensor& reduce_w,
                       BatchNorm2dLayer& bn1, const Tensor& conv3_w,
                       std::int64_t stride, BatchNorm2dLayer& bn2,
                       const Tensor& expand_w, BatchNorm2dLayer& bn3);

std::int64_t bottleneck_body_macs(const Shape& input, std::int64_t c_mid,
                                 std::int64_t c_out, std::int64_t stride);

class BottleneckBlock : public Module {
 public:
  // A downsample path (strided 1x1 conv + BN) is created when `downsample`.
  BottleneckBlock(const std::string& name, std::int64_t c_in,
                  std::int64_t c_mid, std::int64_t c_out, std::int64_t stride,
                  bool downsample, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;
  Shape output_shape(const Shape& input) const override;
  void set_mode(NormMode m) override;

  std::int64_t c_in, c_mid, c_out, stride;
  ParamPtr W_reduce;  // [c_mid x c_in]
  ParamPtr W_conv3;   // [c_mid x c_mid x 3 x 3]
  ParamPtr W_expand;  // [c_out x c_mid]
  BatchNorm2dLayer bn1, bn2, bn3;
  ParamPtr W_down;  // [c_out x c_in] or null
  std::unique_ptr<BatchNorm2dLayer> bn_down;
};

// Patch convolution (kernel = stride = patch), flatten to tokens, prepend the
// class token, add the learned positional embedding.
class PatchEmbed : public Module {
 public:
  PatchEmbed(const std::string& name, std::int64_t image, std::int64_t patch,
             std::int64_t channels, std::int64_t dim, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;
  Shape output_shape(const Shape& input) const override;

  std::int64_t image, patch, channels, dim;
  std::int64_t tokens() const { return (image / patch) * (image / patch); }
  ParamPtr weight;     // [dim x channels x patch x patch]
  ParamPtr bias;       // [dim]
  ParamPtr cls_token;  // [dim]
  ParamPtr pos_embed;  // [tokens + 1 x dim]
};

}  // namespace tiednet
