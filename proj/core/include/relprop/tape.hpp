#pragma once

#include <memory>
#include <vector>

#include "relprop/model.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

// Saved self-attention internals; relevance passes and the attention-flow
// methods replay them instead of recomputing.
struct AttnState {
    Tensor q, k, v;   // (S, E)
    Tensor scores;    // (H, S, S) scaled pre-softmax
    Tensor attn;      // (H, S, S) post-softmax
    Tensor merged;    // (S, E)
};

struct TapeNode {
    int64_t layer = -1;  // index into model->layers
    Tensor input;        // primary input (chain predecessor's output)
    Tensor output;
    Tensor skip;          // residual-end only: the held skip value
    int64_t partner = -1; // residual begin/end pairing, node index
    std::shared_ptr<AttnState> attn;
};

// Immutable record of one batch-1 forward pass. The model must outlive the
// tape; nodes borrow its layer specs by index.
struct Tape {
    const Model* model = nullptr;
    std::vector<TapeNode> nodes;

    const Tensor& input() const { return nodes.front().input; }
    const Tensor& output() const { return nodes.back().output; }
    const LayerSpec& spec(const TapeNode& n) const {
        return model->layers[static_cast<size_t>(n.layer)];
    }
};

// Runs the model on one input. Shape mismatches raise NumericError with the
// offending layer index; non-finite node outputs raise NumericError.
Tape forward(const Model& m, const Tensor& input);

// Forward pass with every parameter replaced by its absolute value and
// normalization statistics detached from a real pass over the same input.
// Every node output dominates the magnitude of its real counterpart.
Tape abs_forward(const Model& m, const Tensor& input);

struct GradResult {
    Tensor input_grad;
    // Per layer, per parameter (matching LayerSpec::params order). Only
    // filled when requested.
    std::vector<std::vector<Tensor>> param_grads;
    // d(seed . output)/d attn for each self-attention node, in node order.
    std::vector<Tensor> attn_grads;
};

// Reverse-mode gradient of seed . output with respect to the tape input.
Tensor grad(const Tape& tape, const Tensor& seed);

GradResult grad_full(const Tape& tape, const Tensor& seed, bool want_params, bool want_attn);

}  // namespace relprop
