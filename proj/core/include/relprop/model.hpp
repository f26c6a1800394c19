#pragma once

#include <string>
#include <vector>

#include "relprop/rng.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

enum class LayerKind {
    Linear,
    Conv2d,
    Relu,
    Gelu,
    MaxPool2d,
    Softmax,
    BatchNorm,
    LayerNorm,
    SelfAttention,
    ResidualBegin,
    ResidualEnd,
    Flatten,
    PatchEmbed,
    ClassToken,
    MeanPool,
};

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& name);

struct NamedTensor {
    std::string name;
    Tensor value;
};

// One layer of a sequential model. Parameter layout per kind:
//   Linear:        weight (out x in), bias (out)
//   Conv2d:        weight (out_c x in_c x kh x kw), bias (out_c); stride, padding
//   BatchNorm:     gamma, beta, running_mean, running_var (all C); norm_eps
//   LayerNorm:     gamma, beta (E over the last axis); norm_eps
//   SelfAttention: wq,wk,wv,wo (E x E), bq,bk,bv,bo (E); heads divides E
//   PatchEmbed:    weight (E x C*P*P), bias (E), pos (tokens x E); patch
//   ClassToken:    token (E)
//   MaxPool2d:     pool (window == stride)
// Remaining kinds carry no parameters.
struct LayerSpec {
    LayerKind kind = LayerKind::Linear;
    std::vector<NamedTensor> params;
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t pool = 2;
    int64_t heads = 1;
    int64_t patch = 4;
    double norm_eps = 1e-5;

    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);
    bool has_param(const std::string& name) const;
};

struct Model {
    std::vector<int64_t> input_shape;
    int64_t num_classes = 0;
    std::vector<LayerSpec> layers;
};

// Checks parameter shape consistency, residual begin/end pairing, batchnorm
// variance positivity and head divisibility. Throws NumericError naming the
// offending layer index.
void validate_model(const Model& m);

// Output shape of each layer given the model input shape; index 0 is the
// input shape itself, index i+1 the output of layer i.
std::vector<std::vector<int64_t>> layer_shapes(const Model& m);

bool model_has_attention(const Model& m);
bool model_has_patch_embed(const Model& m);

// Patch grid (rows, cols) of the first patch-embed layer.
std::pair<int64_t, int64_t> patch_grid(const Model& m);

// Fixture architectures. Weights are seeded gaussians scaled by fan-in.
Model make_mlp(const std::vector<int64_t>& input_shape, int64_t num_classes, int64_t hidden,
               uint64_t seed);
Model make_cnn(const std::vector<int64_t>& input_shape, int64_t num_classes, uint64_t seed);
Model make_tiny_vit(const std::vector<int64_t>& input_shape, int64_t num_classes, int64_t embed,
                    int64_t blocks, int64_t heads, int64_t patch, uint64_t seed);

// Layer builders used by fixtures and tests.
LayerSpec linear_layer(int64_t in, int64_t out, Rng& rng, double weight_scale = 0.0);
LayerSpec linear_layer_from(const Tensor& weight, const Tensor& bias);
LayerSpec conv2d_layer(int64_t in_c, int64_t out_c, int64_t kh, int64_t kw, int64_t stride,
                       int64_t padding, Rng& rng);
LayerSpec batchnorm_layer(const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                          const Tensor& var);
LayerSpec layernorm_layer(int64_t features, Rng* rng = nullptr);
LayerSpec self_attention_layer(int64_t embed, int64_t heads, Rng& rng);
LayerSpec patch_embed_layer(int64_t channels, int64_t patch, int64_t grid_h, int64_t grid_w,
                            int64_t embed, Rng& rng);
LayerSpec class_token_layer(int64_t embed, Rng& rng);
LayerSpec plain_layer(LayerKind kind);

}  // namespace relprop
