#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tiednet/config.hpp"
#include "tiednet/nn.hpp"
#include "tiednet/tied.hpp"

namespace tiednet {

// One row of a model's layer inventory: the parameters a layer reads and
// its forward MACs for a given input.
struct LayerUsage {
  std::string name;
  std::vector<ParamPtr> params;
  std::int64_t macs = 0;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  // images [N x 3 x H x W] -> logits [N x num_classes]
  virtual Tensor forward(const Tensor& images) = 0;
  virtual void set_mode(NormMode mode) = 0;
  // Rows in execution order for a batch-1 input at `resolution`.
  virtual std::vector<LayerUsage> layer_usage(std::int64_t resolution) const = 0;

  // Every Parameter once, in construction order, frozen buffers included.
  const std::vector<ParamPtr>& parameters() const { return params_; }
  std::vector<ParamPtr> trainable_parameters() const;
  // nullptr when absent.
  ParamPtr find(const std::string& name) const;
  void zero_grad();

 protected:
  // Registers a module's parameters; throws BuildError on a name clash
  // between distinct Parameter objects.
  void register_params(const std::vector<ParamPtr>& params);

  ModelConfig cfg_;

 private:
  std::vector<ParamPtr> params_;
};

// Pre-norm transformer encoder layer.
class EncoderLayer : public Module {
 public:
  EncoderLayer(const std::string& name, const ModelConfig& cfg);

  Tensor forward(const Tensor& x) override;
  std::vector<ParamPtr> parameters() const override;
  std::int64_t macs(const Shape& input) const override;

  LayerNormLayer norm1;
  std::unique_ptr<Module> attn;  // MhaLayer or TiedMhaLayer
  LayerNormLayer norm2;
  std::unique_ptr<Module> ffn;   // FfnLayer or TiedFfnLayer
};

class VitModel : public Model {
 public:
  explicit VitModel(const ModelConfig& cfg);

  Tensor forward(const Tensor& images) override;
  void set_mode(NormMode) override {}
  std::vector<LayerUsage> layer_usage(std::int64_t resolution) const override;

  PatchEmbed patch_embed;
  std::vector<std::unique_ptr<EncoderLayer>> encoder;
  LayerNormLayer norm;
  LinearLayer head;
};

// Stem convolution + BN + relu + max-pool, four bottleneck stages, global
// average pool, classifier. In a tied stage the first block stays a
// conventional downsampling block; the remaining identity blocks are tied.
class ResNetModel : public Model {
 public:
  explicit ResNetModel(const ModelConfig& cfg);

  Tensor forward(const Tensor& images) override;
  void set_mode(NormMode mode) override;
  std::vector<LayerUsage> layer_usage(std::int64_t resolution) const override;

  struct Stage {
    std::string name;
    std::vector<std::unique_ptr<Module>> blocks;  // block 0 is conventional
    SharedStage* shared = nullptr;  // set when the identity blocks share W
  };

  ParamPtr stem_w;  // [base x 3 x 7 x 7]
  BatchNorm2dLayer stem_bn;
  std::vector<Stage> stages;
  LinearLayer fc;

 private:
  std::vector<const Module*> stage_modules(const Stage& s) const;
};

// Builds and initializes a model; deterministic in (cfg, seed). Throws
// BuildError when the configuration cannot be tied.
std::unique_ptr<Model> build_model(const ModelConfig& cfg, std::uint64_t seed);
// Structure only, no random init. Enough for auditing or as a load target.
std::unique_ptr<Model> build_layout(const ModelConfig& cfg);

// Deterministic per-parameter initialization: truncated normal (std 0.02,
// +-2 std) for transformer matrices, class token, positional embeddings and
// classifiers; Kaiming-normal fan-out for convolution kernels (1x1 included);
// norm scales 1; shifts, biases and running means 0; running variances 1.
void init_weights(Model& model, std::uint64_t seed);

// Independent copy with equal values (running statistics included). Tying is
// re-created by construction inside the copy, never shared with the source.
std::unique_ptr<Model> clone_model(const Model& model);

// Spatial extent after the ResNet stem (strided conv, then max-pool).
std::int64_t resnet_stem_extent(std::int64_t resolution);

}  // namespace tiednet
