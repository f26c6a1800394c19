#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relprop/tape.hpp"

namespace relprop {

enum class Method {
    AbsLrp,
    LrpEpsilon,
    LrpAlphaBeta,
    Rap,
    Crap,
    Clrp,
    Saliency,
    InputXGradient,
    Rollout,
    Tibav,
    Constant,
    Random,
};

enum class Ablation { None, PatchStop, ValueOnly, QkOnly };

// Which implementation computes the absolute-magnitude rule. Both are exact
// reformulations of each other; the autodiff route goes through the tape's
// transposed-map machinery on (abs-forward + forward)/2 and exists so the two
// derivations can be checked against each other.
enum class AbsLrpRoute { Explicit, Autodiff };

const char* method_name(Method m);
Method method_from_name(const std::string& name);
const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

struct MethodConfig {
    Method method = Method::AbsLrp;
    bool contrastive = false;
    Ablation ablation = Ablation::None;
    double epsilon = 1e-9;
    double alpha = 1.0;  // lrp-alphabeta; beta = alpha - 1 is enforced
    double beta = 0.0;
    AbsLrpRoute route = AbsLrpRoute::Explicit;
    bool renormalize_flow = true;  // rollout/tibav row renormalization
    uint64_t seed = 0;             // random-attribution baseline only
};

struct AttributionMap {
    Tensor values;  // same shape as the model input (raw, unnormalized)
    Method method = Method::AbsLrp;
    int64_t target = 0;
};

// Output-layer seed: one-hot at target, or 1 at target and -1/N elsewhere
// when contrastive (N = total classes).
Tensor init_relevance(int64_t num_classes, int64_t target, bool contrastive);

// Single-layer redistribution rules for linear-like layers (linear, conv2d,
// patch-embed, mean-pool). `input` is the layer input; the layer output is
// recomputed internally. rel_next matches the output shape.
Tensor abslrp_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                    double epsilon, AbsLrpRoute route = AbsLrpRoute::Explicit);
Tensor lrp_epsilon_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                         double epsilon);
Tensor lrp_alphabeta_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                           double alpha, double beta);
// Both-sign combination weighted by relative absolute magnitude, then the
// mean of the non-zero relevances is subtracted from each non-zero entry.
Tensor rap_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next);

struct RelevanceResult {
    Tensor input_rel;
    // Relevance recorded at each post-softmax attention tensor, node order.
    std::vector<Tensor> attn_rel;
    // Filled instead of input_rel when the pass stops at patch level.
    std::optional<Tensor> token_rel;
};

// Full backward relevance pass for the LRP-family rules. seed matches the
// output shape. Residual splits sum at the begin node; batchnorm and
// layernorm redistribute as two affine steps with detached statistics; the
// softmax denominator is detached; self-attention runs separate passes for
// queries, keys and values and sums them at the merge.
RelevanceResult relevance_backward(const Tape& tape, const Tensor& seed, const MethodConfig& cfg,
                                   bool capture_attn = false);

// Attention-flow baselines. Both require a class token ahead of the patch
// tokens and at least one self-attention block.
AttributionMap rollout(const Tape& tape, const MethodConfig& cfg);
AttributionMap tibav(const Tape& tape, int64_t target, const MethodConfig& cfg);

// Unified entry point for every method.
AttributionMap attribute(const Model& model, const Tensor& input, int64_t target,
                         const MethodConfig& cfg);

// Positive part, then scaled so the largest value is 1 (all-nonpositive maps
// come back all zero). Applied at the metric boundary, never inside
// propagation.
Tensor normalize_positive(const Tensor& map);

}  // namespace relprop
