#include "tiednet/nn.hpp"

#include <algorithm>
#include <cmath>

namespace tiednet {

namespace {

ParamPtr zeros_param(const std::string& name, Shape dims, DType dtype,
                     bool trainable = true) {
  return make_param(name, Tensor::zeros(std::move(dims), dtype), trainable);
}

ParamPtr ones_param(const std::string& name, Shape dims, DType dtype,
                    bool trainable = true) {
  return make_param(name, Tensor::full(std::move(dims), 1.0, dtype), trainable);
}

Tensor var_or_empty(const ParamPtr& p) { return p ? p->var() : Tensor(); }

void require_last_dim(const Shape& in, std::int64_t want, const char* layer) {
  if (in.empty() || in.back() != want) {
    throw ShapeError(std::string(layer) + ": expected last extent " +
                     std::to_string(want) + ", got input " + shape_str(in));
  }
}

std::int64_t rows_of(const Shape& in) {
  return shape_numel(in) / (in.empty() ? 1 : in.back());
}

}  // namespace

void append_unique(std::vector<ParamPtr>& into,
                   const std::vector<ParamPtr>& from) {
  for (const auto& p : from) {
    if (p && std::find(into.begin(), into.end(), p) == into.end()) {
      into.push_back(p);
    }
  }
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) {
    throw RankError("linear: weight must be rank 2, got " +
                    shape_str(weight.dims()));
  }
  const auto in = weight.dim(1), out = weight.dim(0);
  require_last_dim(x.dims(), in, "linear");
  Shape out_dims = x.dims();
  out_dims.back() = out;
  const Tensor flat = reshape(x, {x.numel() / in, in});
  Tensor y = matmul(flat, transpose(weight));
  if (bias.defined()) y = add_bias(y, bias);
  return reshape(y, std::move(out_dims));
}

LinearLayer::LinearLayer(const std::string& name, std::int64_t in_features,
                         std::int64_t out_features, bool with_bias, DType dtype)
    : in(in_features),
      out(out_features),
      W(zeros_param(name + ".W", {out_features, in_features}, dtype)),
      b(with_bias ? zeros_param(name + ".b", {out_features}, dtype) : nullptr) {}

Tensor LinearLayer::forward(const Tensor& x) {
  return linear(x, W->var(), var_or_empty(b));
}

std::vector<ParamPtr> LinearLayer::parameters() const {
  std::vector<ParamPtr> out_params{W};
  if (b) out_params.push_back(b);
  return out_params;
}

std::int64_t LinearLayer::macs(const Shape& input) const {
  require_last_dim(input, in, "linear");
  return rows_of(input) * in * out;
}

Shape LinearLayer::output_shape(const Shape& input) const {
  Shape o = input;
  o.back() = out;
  return o;
}

LayerNormLayer::LayerNormLayer(const std::string& name, std::int64_t dim,
                               DType dtype, double eps_)
    : gamma(ones_param(name + ".gamma", {dim}, dtype)),
      beta(zeros_param(name + ".beta", {dim}, dtype)),
      eps(eps_) {}

Tensor LayerNormLayer::forward(const Tensor& x) {
  return layer_norm(x, gamma->var(), beta->var(), eps);
}

std::vector<ParamPtr> LayerNormLayer::parameters() const {
  return {gamma, beta};
}

BatchNorm2dLayer::BatchNorm2dLayer(const std::string& name,
                                   std::int64_t channels, DType dtype)
    : gamma(ones_param(name + ".gamma", {channels}, dtype)),
      beta(zeros_param(name + ".beta", {channels}, dtype)),
      running_mean(zeros_param(name + ".running_mean", {channels}, dtype, false)),
      running_var(ones_param(name + ".running_var", {channels}, dtype, false)) {}

Tensor BatchNorm2dLayer::forward(const Tensor& x) {
  return batch_norm2d(x, gamma->var(), beta->var(), running_mean->value,
                      running_var->value, mode, eps, momentum);
}

std::vector<ParamPtr> BatchNorm2dLayer::parameters() const {
  return {gamma, beta, running_mean, running_var};
}

Tensor multi_head_attention(const Tensor& x, const AttentionWeights& w,
                            std::int64_t heads, Tensor* probs) {
  if (x.rank() != 3) {
    throw RankError("attention: expected [B x T x d], got " +
                    shape_str(x.dims()));
  }
  const auto d = x.dim(2);
  const auto qk = w.w_q.dim(0);
  if (heads < 1 || d % heads != 0 || qk % heads != 0) {
    throw ShapeError("attention: widths " + std::to_string(d) + "/" +
                     std::to_string(qk) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const Tensor q = split_heads(linear(x, w.w_q, w.b_q), heads);
  const Tensor k = split_heads(linear(x, w.w_k, w.b_k), heads);
  const Tensor v = split_heads(linear(x, w.w_v, w.b_v), heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(qk / heads));
  const Tensor scores = scale(bmm(q, k, false, true), inv_scale);
  const Tensor attn = softmax_lastdim(scores);
  if (probs != nullptr) *probs = attn.detach();
  const Tensor mixed = merge_heads(bmm(attn, v), heads);
  return linear(mixed, w.w_proj, w.b_proj);
}

std::int64_t attention_macs(const Shape& input, std::int64_t heads,
                            std::int64_t qk_dim) {
  // input: [B x T x d]; Q/K/V/output projections plus QK^T and AV.
  const auto B = input.at(0), T = input.at(1), d = input.at(2);
  const auto projections = 2 * B * T * d * qk_dim + 2 * B * T * d * d;
  return projections + B * heads * T * T * (qk_dim / heads) +
         B * heads * T * T * (d / heads);
}

MhaLayer::MhaLayer(const std::string& name, std::int64_t dim_,
                   std::int64_t heads_, bool qkv_bias, bool proj_bias,
                   DType dtype, std::int64_t qk_dim_)
    : dim(dim_), heads(heads_), qk_dim(qk_dim_ > 0 ? qk_dim_ : dim_) {
  if (heads < 1 || dim % heads != 0 || qk_dim % heads != 0) {
    throw ShapeError("attention widths " + std::to_string(dim) + "/" +
                     std::to_string(qk_dim) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  W_q = zeros_param(name + ".W_q", {qk_dim, dim}, dtype);
  W_k = zeros_param(name + ".W_k", {qk_dim, dim}, dtype);
  W_v = zeros_param(name + ".W_v", {dim, dim}, dtype);
  W_proj = zeros_param(name + ".W_proj", {dim, dim}, dtype);
  if (qkv_bias) {
    b_q = zeros_param(name + ".b_q", {qk_dim}, dtype);
    b_k = zeros_param(name + ".b_k", {qk_dim}, dtype);
    b_v = zeros_param(name + ".b_v", {dim}, dtype);
  }
  if (proj_bias) b_proj = zeros_param(name + ".b_proj", {dim}, dtype);
}

Tensor MhaLayer::forward(const Tensor& x) { return forward(x, nullptr); }

Tensor MhaLayer::forward(const Tensor& x, Tensor* probs) {
  require_last_dim(x.dims(), dim, "attention");
  AttentionWeights w{W_q->var(),         W_k->var(),         W_v->var(),
                     W_proj->var(),      var_or_empty(b_q),  var_or_empty(b_k),
                     var_or_empty(b_v),  var_or_empty(b_proj)};
  return multi_head_attention(x, w, heads, probs);
}

std::vector<ParamPtr> MhaLayer::parameters() const {
  std::vector<ParamPtr> out{W_q, W_k, W_v, W_proj};
  for (const auto& b : {b_q, b_k, b_v, b_proj}) {
    if (b) out.push_back(b);
  }
  return out;
}

std::int64_t MhaLayer::macs(const Shape& input) const {
  require_last_dim(input, dim, "attention");
  return attention_macs(input, heads, qk_dim);
}

FfnLayer::FfnLayer(const std::string& name, std::int64_t dim_,
                   std::int64_t hidden_, Activation act_, DType dtype)
    : dim(dim_),
      hidden(hidden_),
      act(act_),
      W_1(zeros_param(name + ".W_1", {hidden_, dim_}, dtype)),
      W_2(zeros_param(name + ".W_2", {dim_, hidden_}, dtype)),
      b_1(zeros_param(name + ".b_1", {hidden_}, dtype)),
      b_2(zeros_param(name + ".b_2", {dim_}, dtype)) {}

Tensor FfnLayer::forward(const Tensor& x) {
  require_last_dim(x.dims(), dim, "ffn");
  const Tensor h = activation(linear(x, W_1->var(), b_1->var()), act);
  return linear(h, W_2->var(), b_2->var());
}

std::vector<ParamPtr> FfnLayer::parameters() const {
  return {W_1, W_2, b_1, b_2};
}

std::int64_t FfnLayer::macs(const Shape& input) const {
  require_last_dim(input, dim, "ffn");
  return 2 * rows_of(input) * dim * hidden;
}

Tensor bottleneck_body(const Tensor& x, const Tensor& reduce_w,
                       BatchNorm2dLayer& bn1, const Tensor& conv3_w,
                       std::int64_t stride, BatchNorm2dLayer& bn2,
                       const Tensor& expand_w, BatchNorm2dLayer& bn3) {
  Tensor h = relu(bn1.forward(conv1x1(x, reduce_w)));
  h = relu(bn2.forward(conv2d(h, conv3_w, Tensor(), {stride, 1, true})));
  return bn3.forward(conv1x1(h, expand_w));
}

std::int64_t bottleneck_body_macs(const Shape& in, std::int64_t c_mid,
                                 std::int64_t c_out, std::int64_t stride) {
  const auto N = in.at(0), c_in = in.at(1), H = in.at(2), W = in.at(3);
  const Conv2dOptions opts{stride, 1, true};
  const auto OH = conv_out_extent(H, 3, opts), OW = conv_out_extent(W, 3, opts);
  return N * H * W * c_in * c_mid + N * OH * OW * c_mid * c_mid * 9 +
         N * OH * OW * c_mid * c_out;
}

BottleneckBlock::BottleneckBlock(const std::string& name, std::int64_t c_in_,
                                 std::int64_t c_mid_, std::int64_t c_out_,
                                 std::int64_t stride_, bool downsample,
                                 DType dtype)
    : c_in(c_in_),
      c_mid(c_mid_),
      c_out(c_out_),
      stride(stride_),
      W_reduce(zeros_param(name + ".reduce.W", {c_mid_, c_in_}, dtype)),
      W_conv3(zeros_param(name + ".conv3x3.W", {c_mid_, c_mid_, 3, 3}, dtype)),
      W_expand(zeros_param(name + ".expand.W", {c_out_, c_mid_}, dtype)),
      bn1(name + ".bn1", c_mid_, dtype),
      bn2(name + ".bn2", c_mid_, dtype),
      bn3(name + ".bn3", c_out_, dtype) {
  if (downsample) {
    W_down = zeros_param(name + ".downsample.W", {c_out_, c_in_}, dtype);
    bn_down = std::make_unique<BatchNorm2dLayer>(name + ".downsample_bn",
                                                 c_out_, dtype);
  }
}

Tensor BottleneckBlock::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != c_in) {
    throw ShapeError("bottleneck: expected " + std::to_string(c_in) +
                     " input channels, got " + shape_str(x.dims()));
  }
  const Tensor body = bottleneck_body(x, W_reduce->var(), bn1, W_conv3->var(),
                                      stride, bn2, W_expand->var(), bn3);
  Tensor shortcut = x;
  if (W_down) {
    shortcut = bn_down->forward(conv1x1(x, W_down->var(), stride));
  } else if (body.dims() != x.dims()) {
    throw ShapeError("bottleneck: output " + shape_str(body.dims()) +
                     " does not match shortcut " + shape_str(x.dims()) +
                     " and no downsample path is configured");
  }
  return relu(add(body, shortcut));
}

std::vector<ParamPtr> BottleneckBlock::parameters() const {
  std::vector<ParamPtr> out{W_reduce};
  append_unique(out, bn1.parameters());
  out.push_back(W_conv3);
  append_unique(out, bn2.parameters());
  out.push_back(W_expand);
  append_unique(out, bn3.parameters());
  if (W_down) {
    out.push_back(W_down);
    append_unique(out, bn_down->parameters());
  }
  return out;
}

std::int64_t BottleneckBlock::macs(const Shape& input) const {
  auto total = bottleneck_body_macs(input, c_mid, c_out, stride);
  if (W_down) {
    const auto out = output_shape(input);
    total += out[0] * out[2] * out[3] * c_in * c_out;
  }
  return total;
}

Shape BottleneckBlock::output_shape(const Shape& input) const {
  const Conv2dOptions opts{stride, 1, true};
  return {input.at(0), c_out, conv_out_extent(input.at(2), 3, opts),
          conv_out_extent(input.at(3), 3, opts)};
}

void BottleneckBlock::set_mode(NormMode m) {
  bn1.set_mode(m);
  bn2.set_mode(m);
  bn3.set_mode(m);
  if (bn_down) bn_down->set_mode(m);
}

PatchEmbed::PatchEmbed(const std::string& name, std::int64_t image_,
                       std::int64_t patch_, std::int64_t channels_,
                       std::int64_t dim_, DType dtype)
    : image(image_), patch(patch_), channels(channels_), dim(dim_) {
  if (patch < 1 || image % patch != 0) {
    throw ShapeError("patch_embed: image size " + std::to_string(image) +
                     " not divisible by patch " + std::to_string(patch));
  }
  weight = zeros_param(name + ".W", {dim, channels, patch, patch}, dtype);
  bias = zeros_param(name + ".b", {dim}, dtype);
  cls_token = zeros_param(name + ".cls_token", {dim}, dtype);
  pos_embed = zeros_param(name + ".pos_embed", {tokens() + 1, dim}, dtype);
}

Tensor PatchEmbed::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError("patch_embed: expected [N x " + std::to_string(channels) +
                     " x H x W], got " + shape_str(x.dims()));
  }
  if (x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
    throw ShapeError("patch_embed: input " + shape_str(x.dims()) +
                     " not divisible by patch " + std::to_string(patch));
  }
  if (x.dim(2) != image || x.dim(3) != image) {
    throw ShapeError("patch_embed: positional embedding is sized for " +
                     std::to_string(image) + "x" + std::to_string(image) +
                     " inputs, got " + shape_str(x.dims()));
  }
  const Tensor maps =
      conv2d(x, weight->var(), bias->var(), {patch, 0, false});
  const Tensor tokens_ = prepend_token(tokens_from_map(maps), cls_token->var());
  return add_bias(tokens_, pos_embed->var());
}

std::vector<ParamPtr> PatchEmbed::parameters() const {
  return {weight, bias, cls_token, pos_embed};
}

std::int64_t PatchEmbed::macs(const Shape& input) const {
  const auto N = input.at(0);
  const auto T = (input.at(2) / patch) * (input.at(3) / patch);
  return N * T * dim * channels * patch * patch;
}

Shape PatchEmbed::output_shape(const Shape& input) const {
  return {input.at(0), (input.at(2) / patch) * (input.at(3) / patch) + 1, dim};
}

}  // namespace tiednet
