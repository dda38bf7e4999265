#include "tiednet/tied.hpp"

namespace tiednet {

namespace {

ParamPtr zeros_param(const std::string& name, Shape dims, DType dtype) {
  return make_param(name, Tensor::zeros(std::move(dims), dtype));
}

Tensor var_or_empty(const ParamPtr& p) { return p ? p->var() : Tensor(); }

}  // namespace

TiedMhaLayer::TiedMhaLayer(const std::string& name, std::int64_t dim_,
                           std::int64_t heads_, bool qkv_bias, bool proj_bias,
                           DType dtype)
    : dim(dim_), heads(heads_) {
  if (heads < 1 || dim % heads != 0) {
    throw ShapeError("attention width " + std::to_string(dim) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  W_q = zeros_param(name + ".W_q", {dim, dim}, dtype);
  W_kv = zeros_param(name + ".W_kv", {dim, dim}, dtype);
  if (qkv_bias) {
    b_q = zeros_param(name + ".b_q", {dim}, dtype);
    b_k = zeros_param(name + ".b_k", {dim}, dtype);
    b_v = zeros_param(name + ".b_v", {dim}, dtype);
  }
  if (proj_bias) b_proj = zeros_param(name + ".b_proj", {dim}, dtype);
}

Tensor TiedMhaLayer::forward(const Tensor& x) { return forward(x, nullptr); }

Tensor TiedMhaLayer::forward(const Tensor& x, Tensor* probs) {
  if (x.rank() != 3 || x.dim(2) != dim) {
    throw ShapeError("tied attention: expected [B x T x " +
                     std::to_string(dim) + "], got " + shape_str(x.dims()));
  }
  const Tensor wq = W_q->var();
  const Tensor wkv = W_kv->var();
  AttentionWeights w{wq,
                     wkv,
                     transpose(wkv),
                     transpose(wq),
                     var_or_empty(b_q),
                     var_or_empty(b_k),
                     var_or_empty(b_v),
                     var_or_empty(b_proj)};
  return multi_head_attention(x, w, heads, probs);
}

std::vector<ParamPtr> TiedMhaLayer::parameters() const {
  std::vector<ParamPtr> out{W_q, W_kv};
  for (const auto& b : {b_q, b_k, b_v, b_proj}) {
    if (b) out.push_back(b);
  }
  return out;
}

std::int64_t TiedMhaLayer::macs(const Shape& input) const {
  return attention_macs(input, heads, dim);
}

TiedFfnLayer::TiedFfnLayer(const std::string& name, std::int64_t dim_,
                           std::int64_t hidden_, Activation act_, DType dtype)
    : dim(dim_),
      hidden(hidden_),
      act(act_),
      W(zeros_param(name + ".W", {hidden_, dim_}, dtype)),
      b_1(zeros_param(name + ".b_1", {hidden_}, dtype)),
      b_2(zeros_param(name + ".b_2", {dim_}, dtype)) {}

Tensor TiedFfnLayer::forward(const Tensor& x) {
  if (x.rank() < 1 || x.dims().back() != dim) {
    throw ShapeError("tied ffn: expected last extent " + std::to_string(dim) +
                     ", got " + shape_str(x.dims()));
  }
  const Tensor w = W->var();
  const Tensor h = activation(linear(x, w, b_1->var()), act);
  return linear(h, transpose(w), b_2->var());
}

std::vector<ParamPtr> TiedFfnLayer::parameters() const { return {W, b_1, b_2}; }

std::int64_t TiedFfnLayer::macs(const Shape& input) const {
  return 2 * (shape_numel(input) / dim) * dim * hidden;
}

TiedBottleneckBlock::TiedBottleneckBlock(const std::string& name,
                                         std::int64_t c_in, std::int64_t c_mid_,
                                         std::int64_t c_out,
                                         std::int64_t stride,
                                         ParamPtr shared_w, DType dtype)
    : channels(c_in),
      c_mid(c_mid_),
      W(std::move(shared_w)),
      W_conv3(zeros_param(name + ".conv3x3.W", {c_mid_, c_mid_, 3, 3}, dtype)),
      bn1(name + ".bn1", c_mid_, dtype),
      bn2(name + ".bn2", c_mid_, dtype),
      bn3(name + ".bn3", c_in, dtype) {
  if (c_in != c_out) {
    throw BuildError("tied bottleneck '" + name + "' needs c_in == c_out, got " +
                     std::to_string(c_in) + " -> " + std::to_string(c_out));
  }
  if (stride != 1) {
    throw BuildError("tied bottleneck '" + name +
                     "' needs stride 1 for its identity shortcut");
  }
  if (!W) {
    W = zeros_param(name + ".W", {c_mid, channels}, dtype);
  } else if (W->value.dims() != Shape{c_mid, channels}) {
    throw BuildError("tied bottleneck '" + name + "': shared W is " +
                     shape_str(W->value.dims()) + ", need " +
                     shape_str({c_mid, channels}));
  }
}

Tensor TiedBottleneckBlock::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError("tied bottleneck: expected " + std::to_string(channels) +
                     " input channels, got " + shape_str(x.dims()));
  }
  const Tensor w = W->var();
  const Tensor body = bottleneck_body(x, w, bn1, W_conv3->var(), 1, bn2,
                                      transpose(w), bn3);
  return relu(add(body, x));
}

Tensor TiedBottleneckBlock::reduce_output(const Tensor& x) const {
  NoGradGuard guard;
  return conv1x1(x, W->value);
}

std::vector<ParamPtr> TiedBottleneckBlock::parameters() const {
  std::vector<ParamPtr> out{W};
  append_unique(out, bn1.parameters());
  out.push_back(W_conv3);
  append_unique(out, bn2.parameters());
  append_unique(out, bn3.parameters());
  return out;
}

std::int64_t TiedBottleneckBlock::macs(const Shape& input) const {
  return bottleneck_body_macs(input, c_mid, channels, 1);
}

void TiedBottleneckBlock::set_mode(NormMode m) {
  bn1.set_mode(m);
  bn2.set_mode(m);
  bn3.set_mode(m);
}

SharedStage::SharedStage(const std::string& name, std::int64_t n,
                         std::int64_t channels_, std::int64_t c_mid_,
                         DType dtype, std::int64_t first_index)
    : channels(channels_), c_mid(c_mid_) {
  if (n < 1) throw BuildError("shared stage '" + name + "' needs >= 1 block");
  W = zeros_param(name + ".shared.W", {c_mid, channels}, dtype);
  for (std::int64_t i = 0; i < n; ++i) {
    blocks.push_back(std::make_unique<TiedBottleneckBlock>(
        name + "." + std::to_string(first_index + i), channels, c_mid, channels, 1, W,
        dtype));
  }
}

Tensor SharedStage::forward(const Tensor& x) {
  Tensor h = x;
  for (auto& block : blocks) h = block->forward(h);
  return h;
}

std::vector<ParamPtr> SharedStage::parameters() const {
  std::vector<ParamPtr> out;
  for (const auto& block : blocks) append_unique(out, block->parameters());
  return out;
}

std::int64_t SharedStage::macs(const Shape& input) const {
  std::int64_t total = 0;
  for (const auto& block : blocks) total += block->macs(input);
  return total;
}

void SharedStage::set_mode(NormMode m) {
  for (auto& block : blocks) block->set_mode(m);
}

}  // namespace tiednet
