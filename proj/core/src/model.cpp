#include "relprop/model.hpp"

#include <cmath>

#include "relprop/error.hpp"

namespace relprop {

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Linear: return "linear";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::Gelu: return "gelu";
        case LayerKind::MaxPool2d: return "maxpool2d";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::LayerNorm: return "layernorm";
        case LayerKind::SelfAttention: return "self-attention";
        case LayerKind::ResidualBegin: return "residual-begin";
        case LayerKind::ResidualEnd: return "residual-end";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::PatchEmbed: return "patch-embed";
        case LayerKind::ClassToken: return "class-token";
        case LayerKind::MeanPool: return "mean-pool";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& name) {
    static const std::pair<const char*, LayerKind> table[] = {
        {"linear", LayerKind::Linear},
        {"conv2d", LayerKind::Conv2d},
        {"relu", LayerKind::Relu},
        {"gelu", LayerKind::Gelu},
        {"maxpool2d", LayerKind::MaxPool2d},
        {"softmax", LayerKind::Softmax},
        {"batchnorm", LayerKind::BatchNorm},
        {"layernorm", LayerKind::LayerNorm},
        {"self-attention", LayerKind::SelfAttention},
        {"residual-begin", LayerKind::ResidualBegin},
        {"residual-end", LayerKind::ResidualEnd},
        {"flatten", LayerKind::Flatten},
        {"patch-embed", LayerKind::PatchEmbed},
        {"class-token", LayerKind::ClassToken},
        {"mean-pool", LayerKind::MeanPool},
    };
    for (const auto& [n, k] : table)
        if (name == n) return k;
    throw IoError("unknown layer kind '" + name + "'");
}

const Tensor& LayerSpec::param(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return p.value;
    throw NumericError(std::string(kind_name(kind)) + ": missing parameter '" + name + "'");
}

Tensor& LayerSpec::param(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p.value;
    throw NumericError(std::string(kind_name(kind)) + ": missing parameter '" + name + "'");
}

bool LayerSpec::has_param(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return true;
    return false;
}

static void fail_layer(size_t idx, const std::string& why) {
    throw NumericError("layer " + std::to_string(idx) + ": " + why);
}

// Walks the layer list propagating the activation shape, validating as it goes.
std::vector<std::vector<int64_t>> layer_shapes(const Model& m) {
    std::vector<std::vector<int64_t>> shapes;
    shapes.push_back(m.input_shape);
    std::vector<std::vector<int64_t>> residual_stack;
    std::vector<int64_t> cur = m.input_shape;

    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        switch (l.kind) {
            case LayerKind::Linear: {
                // Applies to a flat vector or row-wise to a tokens x features matrix.
                const Tensor& w = l.param("weight");
                if (w.rank() != 2) fail_layer(i, "linear weight must be rank 2");
                if (l.param("bias").numel() != w.shape[0]) fail_layer(i, "linear bias size mismatch");
                if (cur.size() == 1 && cur[0] == w.shape[1])
                    cur = {w.shape[0]};
                else if (cur.size() == 2 && cur[1] == w.shape[1])
                    cur = {cur[0], w.shape[0]};
                else
                    fail_layer(i, "linear expects trailing dim " + std::to_string(w.shape[1]) +
                                      ", got " + shape_str(cur));
                break;
            }
            case LayerKind::Conv2d: {
                const Tensor& w = l.param("weight");
                if (w.rank() != 4) fail_layer(i, "conv2d weight must be rank 4");
                if (cur.size() != 3 || cur[0] != w.shape[1])
                    fail_layer(i, "conv2d expects " + std::to_string(w.shape[1]) +
                                      " input channels, got " + shape_str(cur));
                if (l.param("bias").numel() != w.shape[0]) fail_layer(i, "conv2d bias size mismatch");
                if (l.stride < 1) fail_layer(i, "conv2d stride must be >= 1");
                int64_t oh = (cur[1] + 2 * l.padding - w.shape[2]) / l.stride + 1;
                int64_t ow = (cur[2] + 2 * l.padding - w.shape[3]) / l.stride + 1;
                if (oh < 1 || ow < 1) fail_layer(i, "conv2d output collapses to zero size");
                cur = {w.shape[0], oh, ow};
                break;
            }
            case LayerKind::Relu:
            case LayerKind::Gelu:
            case LayerKind::Softmax:
                break;
            case LayerKind::MaxPool2d: {
                if (cur.size() != 3) fail_layer(i, "maxpool2d expects CHW input, got " + shape_str(cur));
                if (l.pool < 1 || cur[1] % l.pool || cur[2] % l.pool)
                    fail_layer(i, "maxpool2d window must divide spatial dims");
                cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
                break;
            }
            case LayerKind::BatchNorm: {
                if (cur.size() != 3) fail_layer(i, "batchnorm expects CHW input");
                int64_t c = cur[0];
                for (const char* n : {"gamma", "beta", "running_mean", "running_var"})
                    if (l.param(n).numel() != c) fail_layer(i, std::string("batchnorm ") + n + " size mismatch");
                for (double v : l.param("running_var").data)
                    if (v <= 0.0) fail_layer(i, "batchnorm variance must be strictly positive");
                break;
            }
            case LayerKind::LayerNorm: {
                if (cur.empty()) fail_layer(i, "layernorm needs an input axis");
                int64_t e = cur.back();
                if (l.param("gamma").numel() != e || l.param("beta").numel() != e)
                    fail_layer(i, "layernorm parameter size mismatch");
                break;
            }
            case LayerKind::SelfAttention: {
                if (cur.size() != 2) fail_layer(i, "self-attention expects tokens x embed input");
                int64_t e = cur[1];
                if (l.heads < 1 || e % l.heads) fail_layer(i, "heads must divide embed dim");
                for (const char* n : {"wq", "wk", "wv", "wo"}) {
                    const Tensor& w = l.param(n);
                    if (w.rank() != 2 || w.shape[0] != e || w.shape[1] != e)
                        fail_layer(i, std::string("self-attention ") + n + " must be " +
                                          std::to_string(e) + "x" + std::to_string(e));
                }
                for (const char* n : {"bq", "bk", "bv", "bo"})
                    if (l.param(n).numel() != e) fail_layer(i, std::string("self-attention ") + n + " size mismatch");
                break;
            }
            case LayerKind::ResidualBegin:
                residual_stack.push_back(cur);
                break;
            case LayerKind::ResidualEnd: {
                if (residual_stack.empty()) fail_layer(i, "residual-end without matching begin");
                if (residual_stack.back() != cur)
                    fail_layer(i, "residual branch changed shape: skip " +
                                      shape_str(residual_stack.back()) + " vs branch " + shape_str(cur));
                residual_stack.pop_back();
                break;
            }
            case LayerKind::Flatten:
                cur = {shape_numel(cur)};
                break;
            case LayerKind::PatchEmbed: {
                if (cur.size() != 3) fail_layer(i, "patch-embed expects CHW input");
                int64_t p = l.patch;
                if (p < 1 || cur[1] % p || cur[2] % p) fail_layer(i, "patch size must divide image dims");
                int64_t tokens = (cur[1] / p) * (cur[2] / p);
                const Tensor& w = l.param("weight");
                if (w.rank() != 2 || w.shape[1] != cur[0] * p * p)
                    fail_layer(i, "patch-embed weight must be embed x C*P*P");
                int64_t e = w.shape[0];
                if (l.param("bias").numel() != e) fail_layer(i, "patch-embed bias size mismatch");
                const Tensor& pos = l.param("pos");
                if (pos.rank() != 2 || pos.shape[0] != tokens || pos.shape[1] != e)
                    fail_layer(i, "patch-embed pos must be tokens x embed");
                cur = {tokens, e};
                break;
            }
            case LayerKind::ClassToken: {
                if (cur.size() != 2) fail_layer(i, "class-token expects tokens x embed input");
                if (l.param("token").numel() != cur[1]) fail_layer(i, "class-token size mismatch");
                cur = {cur[0] + 1, cur[1]};
                break;
            }
            case LayerKind::MeanPool: {
                if (cur.size() == 3) {
                    cur = {cur[0]};
                    break;
                }
                if (cur.size() != 2)
                    fail_layer(i, "mean-pool expects tokens x embed or channel x spatial input");
                cur = {cur[1]};
                break;
            }
        }
        shapes.push_back(cur);
    }
    if (!residual_stack.empty())
        throw NumericError("unterminated residual-begin (depth " +
                           std::to_string(residual_stack.size()) + ")");
    return shapes;
}

void validate_model(const Model& m) {
    if (m.input_shape.empty()) throw NumericError("model input shape is empty");
    if (m.num_classes < 1) throw NumericError("model must declare at least one class");
    auto shapes = layer_shapes(m);
    const auto& out = shapes.back();
    if (out.size() != 1 || out[0] != m.num_classes)
        throw NumericError("model output shape " + shape_str(out) + " does not match " +
                           std::to_string(m.num_classes) + " classes");
}

bool model_has_attention(const Model& m) {
    for (const auto& l : m.layers)
        if (l.kind == LayerKind::SelfAttention) return true;
    return false;
}

bool model_has_patch_embed(const Model& m) {
    for (const auto& l : m.layers)
        if (l.kind == LayerKind::PatchEmbed) return true;
    return false;
}

std::pair<int64_t, int64_t> patch_grid(const Model& m) {
    for (const auto& l : m.layers)
        if (l.kind == LayerKind::PatchEmbed)
            return {m.input_shape[1] / l.patch, m.input_shape[2] / l.patch};
    throw NumericError("model has no patch-embed layer");
}

static Tensor gaussian_tensor(std::vector<int64_t> shape, Rng& rng, double scale) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data) v = rng.gaussian(0.0, scale);
    return t;
}

LayerSpec linear_layer(int64_t in, int64_t out, Rng& rng, double weight_scale) {
    double scale = weight_scale > 0.0 ? weight_scale : std::sqrt(2.0 / static_cast<double>(in));
    LayerSpec l;
    l.kind = LayerKind::Linear;
    l.params.push_back({"weight", gaussian_tensor({out, in}, rng, scale)});
    l.params.push_back({"bias", Tensor({out}, 0.0)});
    return l;
}

LayerSpec linear_layer_from(const Tensor& weight, const Tensor& bias) {
    LayerSpec l;
    l.kind = LayerKind::Linear;
    l.params.push_back({"weight", weight});
    l.params.push_back({"bias", bias});
    return l;
}

LayerSpec conv2d_layer(int64_t in_c, int64_t out_c, int64_t kh, int64_t kw, int64_t stride,
                       int64_t padding, Rng& rng) {
    double scale = std::sqrt(2.0 / static_cast<double>(in_c * kh * kw));
    LayerSpec l;
    l.kind = LayerKind::Conv2d;
    l.stride = stride;
    l.padding = padding;
    l.params.push_back({"weight", gaussian_tensor({out_c, in_c, kh, kw}, rng, scale)});
    l.params.push_back({"bias", Tensor({out_c}, 0.0)});
    return l;
}

LayerSpec batchnorm_layer(const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                          const Tensor& var) {
    LayerSpec l;
    l.kind = LayerKind::BatchNorm;
    l.params.push_back({"gamma", gamma});
    l.params.push_back({"beta", beta});
    l.params.push_back({"running_mean", mean});
    l.params.push_back({"running_var", var});
    return l;
}

LayerSpec layernorm_layer(int64_t features, Rng*) {
    LayerSpec l;
    l.kind = LayerKind::LayerNorm;
    l.params.push_back({"gamma", Tensor({features}, 1.0)});
    l.params.push_back({"beta", Tensor({features}, 0.0)});
    return l;
}

LayerSpec self_attention_layer(int64_t embed, int64_t heads, Rng& rng) {
    double scale = std::sqrt(1.0 / static_cast<double>(embed));
    LayerSpec l;
    l.kind = LayerKind::SelfAttention;
    l.heads = heads;
    for (const char* n : {"wq", "wk", "wv", "wo"})
        l.params.push_back({n, gaussian_tensor({embed, embed}, rng, scale)});
    for (const char* n : {"bq", "bk", "bv", "bo"}) l.params.push_back({n, Tensor({embed}, 0.0)});
    return l;
}

LayerSpec patch_embed_layer(int64_t channels, int64_t patch, int64_t grid_h, int64_t grid_w,
                            int64_t embed, Rng& rng) {
    double scale = std::sqrt(2.0 / static_cast<double>(channels * patch * patch));
    LayerSpec l;
    l.kind = LayerKind::PatchEmbed;
    l.patch = patch;
    l.params.push_back({"weight", gaussian_tensor({embed, channels * patch * patch}, rng, scale)});
    l.params.push_back({"bias", Tensor({embed}, 0.0)});
    l.params.push_back({"pos", gaussian_tensor({grid_h * grid_w, embed}, rng, 0.02)});
    return l;
}

LayerSpec class_token_layer(int64_t embed, Rng& rng) {
    LayerSpec l;
    l.kind = LayerKind::ClassToken;
    l.params.push_back({"token", gaussian_tensor({embed}, rng, 0.02)});
    return l;
}

LayerSpec plain_layer(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
}

Model make_mlp(const std::vector<int64_t>& input_shape, int64_t num_classes, int64_t hidden,
               uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    int64_t in = shape_numel(input_shape);
    if (input_shape.size() > 1) m.layers.push_back(plain_layer(LayerKind::Flatten));
    m.layers.push_back(linear_layer(in, hidden, rng));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(linear_layer(hidden, num_classes, rng));
    validate_model(m);
    return m;
}

Model make_cnn(const std::vector<int64_t>& input_shape, int64_t num_classes, uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    int64_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    m.layers.push_back(conv2d_layer(c, 8, 3, 3, 1, 1, rng));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    LayerSpec p1 = plain_layer(LayerKind::MaxPool2d);
    p1.pool = 2;
    m.layers.push_back(p1);
    m.layers.push_back(conv2d_layer(8, 16, 3, 3, 1, 1, rng));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(p1);
    m.layers.push_back(plain_layer(LayerKind::Flatten));
    m.layers.push_back(linear_layer(16 * (h / 4) * (w / 4), 64, rng));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(linear_layer(64, num_classes, rng));
    validate_model(m);
    return m;
}

Model make_tiny_vit(const std::vector<int64_t>& input_shape, int64_t num_classes, int64_t embed,
                    int64_t blocks, int64_t heads, int64_t patch, uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    int64_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    m.layers.push_back(patch_embed_layer(c, patch, h / patch, w / patch, embed, rng));
    m.layers.push_back(class_token_layer(embed, rng));
    for (int64_t b = 0; b < blocks; ++b) {
        m.layers.push_back(plain_layer(LayerKind::ResidualBegin));
        m.layers.push_back(layernorm_layer(embed));
        m.layers.push_back(self_attention_layer(embed, heads, rng));
        m.layers.push_back(plain_layer(LayerKind::ResidualEnd));
        m.layers.push_back(plain_layer(LayerKind::ResidualBegin));
        m.layers.push_back(layernorm_layer(embed));
        m.layers.push_back(linear_layer(embed, 2 * embed, rng));
        m.layers.push_back(plain_layer(LayerKind::Gelu));
        m.layers.push_back(linear_layer(2 * embed, embed, rng));
        m.layers.push_back(plain_layer(LayerKind::ResidualEnd));
    }
    m.layers.push_back(layernorm_layer(embed));
    m.layers.push_back(plain_layer(LayerKind::MeanPool));
    m.layers.push_back(linear_layer(embed, num_classes, rng));
    validate_model(m);
    return m;
}

}  // namespace relprop
