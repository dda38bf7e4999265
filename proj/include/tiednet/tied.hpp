#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tiednet/nn.hpp"

// Transpose-tied layers. Each holds one weight matrix W and applies it in
// two roles: W maps into its column space, the transpose view W^T (same
// storage, never a copy) maps back through its row space. Gradients of both
// roles accumulate into the single grad buffer of W.

namespace tiednet {

/// Attention with Q = W_q x, K = W_kv x, V = W_kv^T x and output projection
/// W_q^T x_hat. Two d x d matrices instead of four; biases stay untied.
class TiedMhaLayer : public Module {
 public:
  TiedMhaLayer(const std::string& name, std::int64_t dim, std::int64_t heads,
               bool qkv_bias, bool proj_bias, DType dtype);

  Tensor forward(const Tensor& x) override;
  Tensor forward(const Tensor& x, Tensor* probs);
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;

  // Raw views of the matrices used in the V and projection roles.
  Tensor value_weight() const { return W_kv->value.view_transposed(); }
  Tensor projection_weight() const { return W_q->value.view_transposed(); }

  std::int64_t dim, heads;
  ParamPtr W_q, W_kv;
  ParamPtr b_q, b_k, b_v, b_proj;
};

/// FFN(x) = W^T act(W x + b_1) + b_2 with W [hidden x dim].
class TiedFfnLayer : public Module {
 public:
  TiedFfnLayer(const std::string& name, std::int64_t dim, std::int64_t hidden,
               Activation act, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;

  Tensor second_weight() const { return W->value.view_transposed(); }

  std::int64_t dim, hidden;
  Activation act;
  ParamPtr W;  // [hidden x dim]
  ParamPtr b_1, b_2;
};

/// Identity bottleneck relu(W^T G(W x) + x). The 3x3 convolution and all
/// norms are private; W may be shared with other blocks of a stage.
class TiedBottleneckBlock : public Module {
 public:
  // Creates a private W when `shared_w` is null. Throws BuildError unless
  // c_in == c_out and stride == 1.
  TiedBottleneckBlock(const std::string& name, std::int64_t c_in,
                      std::int64_t c_mid, std::int64_t c_out,
                      std::int64_t stride, ParamPtr shared_w, DType dtype);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;
  void set_mode(NormMode m) override;

  // Output of the reduce role, W x, for the given input (no tape).
  Tensor reduce_output(const Tensor& x) const;

  std::int64_t channels, c_mid;
  ParamPtr W;        // [c_mid x channels]
  ParamPtr W_conv3;  // [c_mid x c_mid x 3 x 3]
  BatchNorm2dLayer bn1, bn2, bn3;
};

/// Consecutive tied identity blocks that all reference one W.
class SharedStage : public Module {
 public:
  // Blocks are named `<name>.<first_index + i>`; W is `<name>.shared.W`.
  SharedStage(const std::string& name, std::int64_t blocks,
              std::int64_t channels, std::int64_t c_mid, DType dtype,
              std::int64_t first_index = 0);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;
  void set_mode(NormMode m) override;

  std::int64_t channels, c_mid;
  ParamPtr W;
  std::vector<std::unique_ptr<TiedBottleneckBlock>> blocks;
};

}  // namespace tiednet
