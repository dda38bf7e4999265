#include "tiednet/model.hpp"

#include <algorithm>
#include <map>

#include "tiednet/error.hpp"

namespace tiednet {

std::vector<ParamPtr> Model::trainable_parameters() const {
  std::vector<ParamPtr> out;
  for (const auto& p : params_) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

ParamPtr Model::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p;
  }
  return nullptr;
}

void Model::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void Model::register_params(const std::vector<ParamPtr>& params) {
  for (const auto& p : params) {
    if (std::find(params_.begin(), params_.end(), p) != params_.end()) continue;
    if (find(p->name)) {
      throw BuildError("duplicate parameter name '" + p->name + "'");
    }
    params_.push_back(p);
  }
}

// ---------------------------------------------------------------- vit

EncoderLayer::EncoderLayer(const std::string& name, const ModelConfig& cfg)
    : norm1(name + ".norm1", cfg.dim, cfg.dtype),
      norm2(name + ".norm2", cfg.dim, cfg.dtype) {
  const bool proj_bias = true;
  if (cfg.is_pe()) {
    attn = std::make_unique<TiedMhaLayer>(name + ".attn", cfg.dim, cfg.heads,
                                          cfg.qkv_bias, proj_bias, cfg.dtype);
    ffn = std::make_unique<TiedFfnLayer>(name + ".ffn", cfg.dim, cfg.hidden(),
                                         Activation::gelu, cfg.dtype);
  } else {
    attn = std::make_unique<MhaLayer>(name + ".attn", cfg.dim, cfg.heads,
                                      cfg.qkv_bias, proj_bias, cfg.dtype,
                                      cfg.attention_qk_dim());
    ffn = std::make_unique<FfnLayer>(name + ".ffn", cfg.dim, cfg.hidden(),
                                     Activation::gelu, cfg.dtype);
  }
}

Tensor EncoderLayer::forward(const Tensor& x) {
  const Tensor h = add(x, attn->forward(norm1.forward(x)));
  return add(h, ffn->forward(norm2.forward(h)));
}

std::vector<ParamPtr> EncoderLayer::parameters() const {
  std::vector<ParamPtr> out = norm1.parameters();
  append_unique(out, attn->parameters());
  append_unique(out, norm2.parameters());
  append_unique(out, ffn->parameters());
  return out;
}

std::int64_t EncoderLayer::macs(const Shape& input) const {
  return attn->macs(input) + ffn->macs(input);
}

VitModel::VitModel(const ModelConfig& cfg)
    : Model(cfg),
      patch_embed("patch_embed", cfg.image_size, cfg.patch, 3, cfg.dim,
                  cfg.dtype),
      norm("norm", cfg.dim, cfg.dtype),
      head("head", cfg.dim, cfg.num_classes, true, cfg.dtype) {
  if (cfg.is_pe() && cfg.attention_qk_dim() != cfg.dim) {
    throw BuildError("tied attention needs square query/key weights: qk_dim " +
                     std::to_string(cfg.attention_qk_dim()) + " != dim " +
                     std::to_string(cfg.dim));
  }
  register_params(patch_embed.parameters());
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    encoder.push_back(
        std::make_unique<EncoderLayer>("encoder." + std::to_string(i), cfg));
    register_params(encoder.back()->parameters());
  }
  register_params(norm.parameters());
  register_params(head.parameters());
}

Tensor VitModel::forward(const Tensor& images) {
  Tensor x = patch_embed.forward(images);
  for (auto& layer : encoder) x = layer->forward(x);
  return head.forward(select_token(norm.forward(x), 0));
}

std::vector<LayerUsage> VitModel::layer_usage(std::int64_t resolution) const {
  const Shape image{1, 3, resolution, resolution};
  if (resolution % cfg_.patch != 0) {
    throw ShapeError("resolution " + std::to_string(resolution) +
                     " is not divisible by patch " + std::to_string(cfg_.patch));
  }
  std::vector<LayerUsage> rows;
  rows.push_back({"patch_embed", patch_embed.parameters(),
                  patch_embed.macs(image)});
  const Shape tokens = patch_embed.output_shape(image);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const auto& layer = *encoder[i];
    const std::string prefix = "encoder." + std::to_string(i);
    rows.push_back({prefix + ".norm1", layer.norm1.parameters(), 0});
    rows.push_back({prefix + ".attn", layer.attn->parameters(),
                    layer.attn->macs(tokens)});
    rows.push_back({prefix + ".norm2", layer.norm2.parameters(), 0});
    rows.push_back({prefix + ".ffn", layer.ffn->parameters(),
                    layer.ffn->macs(tokens)});
  }
  rows.push_back({"norm", norm.parameters(), 0});
  rows.push_back({"head", head.parameters(), head.macs({1, cfg_.dim})});
  return rows;
}

// ---------------------------------------------------------------- resnet

namespace {

const Conv2dOptions kStemConv{2, 3, true};

}  // namespace

std::int64_t resnet_stem_extent(std::int64_t resolution) {
  const auto conv = conv_out_extent(resolution, 7, kStemConv);
  // max-pool 3 / stride 2 / padding 1, floor rounding
  return (conv + 2 - 3) / 2 + 1;
}

ResNetModel::ResNetModel(const ModelConfig& cfg)
    : Model(cfg),
      stem_w(make_param("stem.conv.W",
                        Tensor::zeros({cfg.base_width, 3, 7, 7}, cfg.dtype))),
      stem_bn("stem.bn", cfg.base_width, cfg.dtype),
      fc("fc", cfg.base_width * 8 * 4, cfg.num_classes, true, cfg.dtype) {
  register_params({stem_w});
  register_params(stem_bn.parameters());
  std::int64_t c_in = cfg.base_width;
  for (int s = 1; s <= 4; ++s) {
    const std::int64_t c_mid = cfg.base_width << (s - 1);
    const std::int64_t c_out = 4 * c_mid;
    const std::int64_t stride = s == 1 ? 1 : 2;
    const std::int64_t n = cfg.resnet_layers[s - 1];
    const bool tied = std::find(cfg.pe_stages.begin(), cfg.pe_stages.end(), s) !=
                      cfg.pe_stages.end();
    Stage stage;
    stage.name = "stage" + std::to_string(s);
    stage.blocks.push_back(std::make_unique<BottleneckBlock>(
        stage.name + ".0", c_in, c_mid, c_out, stride,
        c_in != c_out || stride != 1, cfg.dtype));
    if (tied && cfg.stage_sharing && n > 1) {
      auto shared = std::make_unique<SharedStage>(stage.name, n - 1, c_out,
                                                  c_mid, cfg.dtype, 1);
      stage.shared = shared.get();
      stage.blocks.push_back(std::move(shared));
    } else {
      for (std::int64_t i = 1; i < n; ++i) {
        const std::string name = stage.name + "." + std::to_string(i);
        if (tied) {
          stage.blocks.push_back(std::make_unique<TiedBottleneckBlock>(
              name, c_out, c_mid, c_out, 1, nullptr, cfg.dtype));
        } else {
          stage.blocks.push_back(std::make_unique<BottleneckBlock>(
              name, c_out, c_mid, c_out, 1, false, cfg.dtype));
        }
      }
    }
    for (const auto& b : stage.blocks) register_params(b->parameters());
    stages.push_back(std::move(stage));
    c_in = c_out;
  }
  register_params(fc.parameters());
}

Tensor ResNetModel::forward(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("resnet: expected [N x 3 x H x W], got " +
                     shape_str(images.dims()));
  }
  Tensor x = conv2d(images, stem_w->var(), Tensor(), kStemConv);
  x = max_pool2d(relu(stem_bn.forward(x)), 3, 2, 1);
  for (auto& stage : stages) {
    for (auto& block : stage.blocks) x = block->forward(x);
  }
  return fc.forward(global_avg_pool(x));
}

void ResNetModel::set_mode(NormMode mode) {
  stem_bn.set_mode(mode);
  for (auto& stage : stages) {
    for (auto& block : stage.blocks) block->set_mode(mode);
  }
}

std::vector<const Module*> ResNetModel::stage_modules(const Stage& s) const {
  std::vector<const Module*> out;
  for (const auto& b : s.blocks) {
    if (b.get() == s.shared) {
      for (const auto& tb : s.shared->blocks) out.push_back(tb.get());
    } else {
      out.push_back(b.get());
    }
  }
  return out;
}

std::vector<LayerUsage> ResNetModel::layer_usage(std::int64_t resolution) const {
  std::vector<LayerUsage> rows;
  const auto conv_extent = conv_out_extent(resolution, 7, kStemConv);
  rows.push_back({"stem.conv", {stem_w},
                  conv_extent * conv_extent * cfg_.base_width * 3 * 49});
  rows.push_back({"stem.bn", stem_bn.parameters(), 0});
  const auto extent = resnet_stem_extent(resolution);
  Shape shape{1, cfg_.base_width, extent, extent};
  for (const auto& stage : stages) {
    const auto modules = stage_modules(stage);
    for (std::size_t i = 0; i < modules.size(); ++i) {
      rows.push_back({stage.name + "." + std::to_string(i),
                      modules[i]->parameters(), modules[i]->macs(shape)});
      shape = modules[i]->output_shape(shape);
    }
  }
  rows.push_back({"fc", fc.parameters(), fc.macs({1, shape.at(1)})});
  return rows;
}

// ---------------------------------------------------------------- factory

std::unique_ptr<Model> build_layout(const ModelConfig& cfg) {
  validate_config(cfg);
  if (cfg.is_vit()) return std::make_unique<VitModel>(cfg);
  return std::make_unique<ResNetModel>(cfg);
}

std::unique_ptr<Model> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  auto model = build_layout(cfg);
  init_weights(*model, seed);
  return model;
}

std::unique_ptr<Model> clone_model(const Model& model) {
  auto copy = build_layout(model.config());
  for (const auto& p : model.parameters()) {
    auto q = copy->find(p->name);
    if (!q || q->value.dims() != p->value.dims()) {
      throw BuildError("clone: parameter '" + p->name + "' has no counterpart");
    }
    q->value.copy_from(p->value);
    q->grad.copy_from(p->grad);
  }
  return copy;
}

}  // namespace tiednet
