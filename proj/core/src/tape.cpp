#include "relprop/tape.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kernels.hpp"
#include "relprop/error.hpp"

namespace relprop {

using kernels::im2col;
using kernels::col2im_add;
using kernels::linear_apply;
using kernels::linear_backward_input;
using kernels::transpose2d;
using kernels::conv_forward;
using kernels::maxpool_forward;
using kernels::maxpool_argmax;
using kernels::patch_embed_forward;

namespace {

Tensor batchnorm_forward(const Tensor& x, const LayerSpec& l, bool abs_mode) {
    const Tensor& gamma = l.param("gamma");
    const Tensor& beta = l.param("beta");
    const Tensor& mean = l.param("running_mean");
    const Tensor& var = l.param("running_var");
    Tensor y = zeros_like(x);
    int64_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
    for (int64_t ci = 0; ci < c; ++ci) {
        double s = std::sqrt(var[ci] + l.norm_eps);
        // The module splits into (x - mean)/s followed by gamma*x + beta; the
        // abs version flips the signs of those two affine steps' parameters.
        double g = abs_mode ? std::fabs(gamma[ci]) : gamma[ci];
        double b = abs_mode ? std::fabs(beta[ci]) : beta[ci];
        double m = abs_mode ? -std::fabs(mean[ci]) : mean[ci];
        for (int64_t p = 0; p < hw; ++p) y[ci * hw + p] = g * (x[ci * hw + p] - m) / s + b;
    }
    return y;
}

void layernorm_stats(const Tensor& x, double norm_eps, int64_t row, double& mean, double& sd) {
    int64_t e = x.shape.back();
    const double* xr = x.data.data() + row * e;
    double m = 0.0;
    for (int64_t i = 0; i < e; ++i) m += xr[i];
    m /= static_cast<double>(e);
    double v = 0.0;
    for (int64_t i = 0; i < e; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<double>(e);
    mean = m;
    sd = std::sqrt(v + norm_eps);
}

// ref carries the activations of the real pass at the same node; the
// normalization statistics are taken from it so they act as constants. The
// abs variant then dominates the real output magnitude elementwise.
Tensor layernorm_forward(const Tensor& x, const LayerSpec& l, bool abs_mode, const Tensor* ref) {
    const Tensor& gamma = l.param("gamma");
    const Tensor& beta = l.param("beta");
    int64_t e = x.shape.back();
    int64_t rows = x.numel() / e;
    Tensor y = zeros_like(x);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * e;
        double m, s;
        layernorm_stats(abs_mode ? *ref : x, l.norm_eps, r, m, s);
        for (int64_t i = 0; i < e; ++i) {
            double g = abs_mode ? std::fabs(gamma[i]) : gamma[i];
            double b = abs_mode ? std::fabs(beta[i]) : beta[i];
            double mm = abs_mode ? -std::fabs(m) : m;
            y.data[r * e + i] = g * (xr[i] - mm) / s + b;
        }
    }
    return y;
}

// Softmax with the normalizer detached: h_j = exp(x_j) * c with c taken from
// the real pass. Rows are shifted by the real row max for stability.
Tensor softmax_detached_abs(const Tensor& x, const Tensor& ref) {
    int64_t n = x.shape.back();
    int64_t rows = x.numel() / n;
    Tensor y = zeros_like(x);
    for (int64_t r = 0; r < rows; ++r) {
        const double* rr = ref.data.data() + r * n;
        double mx = rr[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, rr[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) denom += std::exp(rr[i] - mx);
        const double* xr = x.data.data() + r * n;
        double* yr = y.data.data() + r * n;
        for (int64_t i = 0; i < n; ++i) yr[i] = std::exp(xr[i] - mx) / denom;
    }
    return y;
}

LayerSpec abs_params_copy(const LayerSpec& l) {
    LayerSpec out = l;
    for (auto& p : out.params) p.value = abs(p.value);
    return out;
}

// Abs-mode attention: projections use absolute parameters, the row softmax is
// replaced by detached-normalizer exponentials keyed to the real pass scores.
kernels::AttnForward attention_forward_abs(const Tensor& x, const LayerSpec& labs,
                                           const AttnState& ref) {
    int64_t s = x.shape[0], e = x.shape[1];
    int64_t nh = labs.heads, dh = e / nh;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    kernels::AttnForward f;
    f.q = linear_apply(x, labs.param("wq"), &labs.param("bq"));
    f.k = linear_apply(x, labs.param("wk"), &labs.param("bk"));
    f.v = linear_apply(x, labs.param("wv"), &labs.param("bv"));
    f.scores = Tensor({nh, s, s}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (int64_t d = 0; d < dh; ++d)
                    acc += f.q.at2(i, h * dh + d) * f.k.at2(j, h * dh + d);
                f.scores.at3(h, i, j) = acc * inv_sqrt_dh;
            }
    f.attn = softmax_detached_abs(f.scores, ref.scores);
    f.merged = Tensor({s, e}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (int64_t j = 0; j < s; ++j)
                    acc += f.attn.at3(h, i, j) * f.v.at2(j, h * dh + d);
                f.merged.at2(i, h * dh + d) = acc;
            }
    f.out = linear_apply(f.merged, labs.param("wo"), &labs.param("bo"));
    return f;
}

}  // namespace

// ref is the real pass over the same input; abs mode reads detached
// normalization statistics out of it and is never run without one.
static Tape run_forward(const Model& m, const Tensor& input, bool abs_mode, const Tape* ref) {
    if (input.shape != m.input_shape)
        throw NumericError("input shape " + shape_str(input.shape) + " does not match model input " +
                           shape_str(m.input_shape));
    layer_shapes(m);  // validates structure, reporting the offending layer index

    Tape tape;
    tape.model = &m;
    Tensor cur = abs_mode ? abs(input) : input;
    std::vector<int64_t> begin_stack;

    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        TapeNode node;
        node.layer = static_cast<int64_t>(i);
        node.input = cur;
        Tensor out;
        switch (l.kind) {
            case LayerKind::Linear: {
                Tensor w = abs_mode ? abs(l.param("weight")) : l.param("weight");
                Tensor b = abs_mode ? abs(l.param("bias")) : l.param("bias");
                out = linear_apply(cur, w, &b);
                break;
            }
            case LayerKind::Conv2d: {
                Tensor w = abs_mode ? abs(l.param("weight")) : l.param("weight");
                Tensor b = abs_mode ? abs(l.param("bias")) : l.param("bias");
                out = conv_forward(cur, w, b, l.stride, l.padding);
                break;
            }
            case LayerKind::Relu: {
                out = pos_part(cur);
                break;
            }
            case LayerKind::Gelu: {
                out = cur;
                for (double& v : out.data) v = kernels::gelu_val(v);
                break;
            }
            case LayerKind::MaxPool2d: {
                out = maxpool_forward(cur, l.pool);
                break;
            }
            case LayerKind::Softmax: {
                if (abs_mode) {
                    out = softmax_detached_abs(cur, ref->nodes[i].input);
                } else {
                    out = cur;
                    kernels::softmax_last_axis(out);
                }
                break;
            }
            case LayerKind::BatchNorm: {
                out = batchnorm_forward(cur, l, abs_mode);
                break;
            }
            case LayerKind::LayerNorm: {
                out = layernorm_forward(cur, l, abs_mode, abs_mode ? &ref->nodes[i].input : nullptr);
                break;
            }
            case LayerKind::SelfAttention: {
                kernels::AttnForward f =
                    abs_mode ? attention_forward_abs(cur, abs_params_copy(l), *ref->nodes[i].attn)
                             : kernels::attention_forward(cur, l);
                node.attn = std::make_shared<AttnState>();
                node.attn->q = std::move(f.q);
                node.attn->k = std::move(f.k);
                node.attn->v = std::move(f.v);
                node.attn->scores = std::move(f.scores);
                node.attn->attn = std::move(f.attn);
                node.attn->merged = std::move(f.merged);
                out = std::move(f.out);
                break;
            }
            case LayerKind::ResidualBegin: {
                begin_stack.push_back(static_cast<int64_t>(tape.nodes.size()));
                out = cur;
                break;
            }
            case LayerKind::ResidualEnd: {
                node.partner = begin_stack.back();
                begin_stack.pop_back();
                node.skip = tape.nodes[static_cast<size_t>(node.partner)].output;
                out = add(cur, node.skip);
                break;
            }
            case LayerKind::Flatten: {
                out = cur.reshaped({cur.numel()});
                break;
            }
            case LayerKind::PatchEmbed: {
                out = abs_mode ? patch_embed_forward(cur, abs_params_copy(l))
                               : patch_embed_forward(cur, l);
                break;
            }
            case LayerKind::ClassToken: {
                const Tensor& tok = l.param("token");
                int64_t s = cur.shape[0], e = cur.shape[1];
                out = Tensor({s + 1, e}, 0.0);
                for (int64_t j = 0; j < e; ++j)
                    out.at2(0, j) = abs_mode ? std::fabs(tok[j]) : tok[j];
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t j = 0; j < e; ++j) out.at2(t + 1, j) = cur.at2(t, j);
                break;
            }
            case LayerKind::MeanPool: {
                if (cur.rank() == 3) {
                    // global average pool: channel-height-width to per-channel means
                    int64_t c = cur.shape[0], hw = cur.shape[1] * cur.shape[2];
                    out = Tensor({c}, 0.0);
                    for (int64_t ch = 0; ch < c; ++ch) {
                        for (int64_t p = 0; p < hw; ++p) out[ch] += cur[ch * hw + p];
                        out[ch] /= static_cast<double>(hw);
                    }
                    break;
                }
                int64_t s = cur.shape[0], e = cur.shape[1];
                out = Tensor({e}, 0.0);
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t j = 0; j < e; ++j) out[j] += cur.at2(t, j);
                for (int64_t j = 0; j < e; ++j) out[j] /= static_cast<double>(s);
                break;
            }
        }
        if (!all_finite(out))
            throw NumericError("layer " + std::to_string(i) + " (" + kind_name(l.kind) +
                               ") produced non-finite values");
        node.output = std::move(out);
        cur = node.output;
        tape.nodes.push_back(std::move(node));
    }
    return tape;
}

Tape forward(const Model& m, const Tensor& input) { return run_forward(m, input, false, nullptr); }

Tape abs_forward(const Model& m, const Tensor& input) {
    Tape real = run_forward(m, input, false, nullptr);
    return run_forward(m, input, true, &real);
}

namespace {

void accumulate_linear_param_grads(const Tensor& g, const Tensor& x, Tensor& gw, Tensor& gb) {
    int64_t out = gw.shape[0], in = gw.shape[1];
    int64_t rows = g.rank() == 2 ? g.shape[0] : 1;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < out; ++j) {
            double gv = g[r * out + j];
            if (gv == 0.0) continue;
            gb[j] += gv;
            const double* xr = x.data.data() + r * in;
            double* gwr = gw.data.data() + j * in;
            for (int64_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
        }
}

struct AttnBackwardOut {
    Tensor gx;
    Tensor gattn;  // (H,S,S)
};

AttnBackwardOut attention_backward(const Tensor& x, const AttnState& st, const LayerSpec& l,
                                   const Tensor& g_out, std::vector<Tensor>* pgrads) {
    int64_t s = x.shape[0], e = x.shape[1];
    int64_t nh = l.heads, dh = e / nh;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor gmerged = linear_backward_input(g_out, l.param("wo"));
    Tensor gattn({nh, s, s}, 0.0);
    Tensor gv({s, e}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (int64_t d = 0; d < dh; ++d)
                    acc += gmerged.at2(i, h * dh + d) * st.v.at2(j, h * dh + d);
                gattn.at3(h, i, j) = acc;
                double a = st.attn.at3(h, i, j);
                if (a != 0.0)
                    for (int64_t d = 0; d < dh; ++d)
                        gv.at2(j, h * dh + d) += a * gmerged.at2(i, h * dh + d);
            }

    Tensor gscores = kernels::softmax_backward(st.attn, gattn);
    Tensor gq({s, e}, 0.0), gk({s, e}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) {
                double gs = gscores.at3(h, i, j) * inv_sqrt_dh;
                if (gs == 0.0) continue;
                for (int64_t d = 0; d < dh; ++d) {
                    gq.at2(i, h * dh + d) += gs * st.k.at2(j, h * dh + d);
                    gk.at2(j, h * dh + d) += gs * st.q.at2(i, h * dh + d);
                }
            }

    AttnBackwardOut out;
    out.gattn = std::move(gattn);
    out.gx = linear_backward_input(gq, l.param("wq"));
    out.gx = add(out.gx, linear_backward_input(gk, l.param("wk")));
    out.gx = add(out.gx, linear_backward_input(gv, l.param("wv")));

    if (pgrads) {
        auto& pg = *pgrads;
        // Param order: wq, wk, wv, wo, bq, bk, bv, bo (see self_attention_layer).
        accumulate_linear_param_grads(gq, x, pg[0], pg[4]);
        accumulate_linear_param_grads(gk, x, pg[1], pg[5]);
        accumulate_linear_param_grads(gv, x, pg[2], pg[6]);
        accumulate_linear_param_grads(g_out, st.merged, pg[3], pg[7]);
    }
    return out;
}

}  // namespace

GradResult grad_full(const Tape& tape, const Tensor& seed, bool want_params, bool want_attn) {
    const Model& m = *tape.model;
    if (seed.shape != tape.output().shape)
        throw NumericError("gradient seed shape " + shape_str(seed.shape) +
                           " does not match output shape " + shape_str(tape.output().shape));

    GradResult res;
    if (want_params) {
        res.param_grads.resize(m.layers.size());
        for (size_t i = 0; i < m.layers.size(); ++i)
            for (const auto& p : m.layers[i].params)
                res.param_grads[i].push_back(zeros_like(p.value));
    }

    std::map<int64_t, Tensor> pending_skip;
    Tensor g = seed;

    for (int64_t ni = static_cast<int64_t>(tape.nodes.size()) - 1; ni >= 0; --ni) {
        const TapeNode& node = tape.nodes[static_cast<size_t>(ni)];
        const LayerSpec& l = tape.spec(node);
        const Tensor& x = node.input;
        Tensor gx;
        switch (l.kind) {
            case LayerKind::Linear: {
                gx = linear_backward_input(g, l.param("weight"));
                if (want_params)
                    accumulate_linear_param_grads(g, x, res.param_grads[node.layer][0],
                                                  res.param_grads[node.layer][1]);
                break;
            }
            case LayerKind::Conv2d: {
                const Tensor& w = l.param("weight");
                int64_t out_c = w.shape[0], kh = w.shape[2], kw = w.shape[3];
                int64_t k = w.shape[1] * kh * kw;
                Tensor s2 = g.reshaped({out_c, g.shape[1] * g.shape[2]});
                Tensor wmat = w.reshaped({out_c, k});
                Tensor gcols = matmul(transpose2d(wmat), s2);
                gx = col2im_add(gcols, x.shape[0], x.shape[1], x.shape[2], kh, kw, l.stride,
                                l.padding);
                if (want_params) {
                    Tensor cols = im2col(x, kh, kw, l.stride, l.padding);
                    Tensor gwmat = matmul(s2, transpose2d(cols));
                    res.param_grads[node.layer][0] =
                        add(res.param_grads[node.layer][0], gwmat.reshaped(w.shape));
                    Tensor& gb = res.param_grads[node.layer][1];
                    for (int64_t j = 0; j < out_c; ++j)
                        for (int64_t p = 0; p < s2.shape[1]; ++p) gb[j] += s2.at2(j, p);
                }
                break;
            }
            case LayerKind::Relu: {
                gx = g;
                for (int64_t i = 0; i < gx.numel(); ++i)
                    if (x[i] <= 0.0) gx[i] = 0.0;
                break;
            }
            case LayerKind::Gelu: {
                gx = g;
                for (int64_t i = 0; i < gx.numel(); ++i) gx[i] *= kernels::gelu_deriv(x[i]);
                break;
            }
            case LayerKind::MaxPool2d: {
                gx = zeros_like(x);
                int64_t c = x.shape[0], oh = g.shape[1], ow = g.shape[2];
                for (int64_t ci = 0; ci < c; ++ci)
                    for (int64_t oy = 0; oy < oh; ++oy)
                        for (int64_t ox = 0; ox < ow; ++ox)
                            gx[maxpool_argmax(x, ci, oy, ox, l.pool)] += g.at3(ci, oy, ox);
                break;
            }
            case LayerKind::Softmax: {
                gx = kernels::softmax_backward(node.output, g);
                break;
            }
            case LayerKind::BatchNorm: {
                const Tensor& gamma = l.param("gamma");
                const Tensor& mean = l.param("running_mean");
                const Tensor& var = l.param("running_var");
                gx = zeros_like(x);
                int64_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
                for (int64_t ci = 0; ci < c; ++ci) {
                    double s = std::sqrt(var[ci] + l.norm_eps);
                    for (int64_t p = 0; p < hw; ++p) {
                        double gv = g[ci * hw + p];
                        gx[ci * hw + p] = gv * gamma[ci] / s;
                        if (want_params) {
                            res.param_grads[node.layer][0][ci] +=
                                gv * (x[ci * hw + p] - mean[ci]) / s;
                            res.param_grads[node.layer][1][ci] += gv;
                        }
                    }
                }
                break;
            }
            case LayerKind::LayerNorm: {
                const Tensor& gamma = l.param("gamma");
                int64_t e = x.shape.back();
                int64_t rows = x.numel() / e;
                gx = zeros_like(x);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.data.data() + r * e;
                    const double* gr = g.data.data() + r * e;
                    double mval = 0.0;
                    for (int64_t i = 0; i < e; ++i) mval += xr[i];
                    mval /= static_cast<double>(e);
                    double v = 0.0;
                    for (int64_t i = 0; i < e; ++i) v += (xr[i] - mval) * (xr[i] - mval);
                    v /= static_cast<double>(e);
                    double s = std::sqrt(v + l.norm_eps);
                    double mean_gg = 0.0, mean_ggxh = 0.0;
                    for (int64_t i = 0; i < e; ++i) {
                        double xh = (xr[i] - mval) / s;
                        double gg = gr[i] * gamma[i];
                        mean_gg += gg;
                        mean_ggxh += gg * xh;
                        if (want_params) {
                            res.param_grads[node.layer][0][i] += gr[i] * xh;
                            res.param_grads[node.layer][1][i] += gr[i];
                        }
                    }
                    mean_gg /= static_cast<double>(e);
                    mean_ggxh /= static_cast<double>(e);
                    for (int64_t i = 0; i < e; ++i) {
                        double xh = (xr[i] - mval) / s;
                        gx.data[r * e + i] = (gr[i] * gamma[i] - mean_gg - xh * mean_ggxh) / s;
                    }
                }
                break;
            }
            case LayerKind::SelfAttention: {
                AttnBackwardOut ab = attention_backward(
                    x, *node.attn, l, g, want_params ? &res.param_grads[node.layer] : nullptr);
                if (want_attn) res.attn_grads.push_back(std::move(ab.gattn));
                gx = std::move(ab.gx);
                break;
            }
            case LayerKind::ResidualBegin: {
                gx = g;
                auto it = pending_skip.find(ni);
                if (it != pending_skip.end()) {
                    gx = add(gx, it->second);
                    pending_skip.erase(it);
                }
                break;
            }
            case LayerKind::ResidualEnd: {
                pending_skip[node.partner] = g;
                gx = g;
                break;
            }
            case LayerKind::Flatten: {
                gx = g.reshaped(x.shape);
                break;
            }
            case LayerKind::PatchEmbed: {
                const Tensor& w = l.param("weight");
                int64_t p = l.patch;
                // g arrives as (tokens, E); the projection step sees (E, tokens).
                Tensor gt = transpose2d(g);
                Tensor gcols = matmul(transpose2d(w), gt);
                gx = col2im_add(gcols, x.shape[0], x.shape[1], x.shape[2], p, p, p, 0);
                if (want_params) {
                    Tensor cols = im2col(x, p, p, p, 0);
                    Tensor gw = matmul(gt, transpose2d(cols));
                    res.param_grads[node.layer][0] = add(res.param_grads[node.layer][0], gw);
                    Tensor& gb = res.param_grads[node.layer][1];
                    for (int64_t t = 0; t < g.shape[0]; ++t)
                        for (int64_t e2 = 0; e2 < g.shape[1]; ++e2) gb[e2] += g.at2(t, e2);
                    res.param_grads[node.layer][2] = add(res.param_grads[node.layer][2], g);
                }
                break;
            }
            case LayerKind::ClassToken: {
                int64_t s = x.shape[0], e = x.shape[1];
                gx = Tensor({s, e}, 0.0);
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t j = 0; j < e; ++j) gx.at2(t, j) = g.at2(t + 1, j);
                if (want_params)
                    for (int64_t j = 0; j < e; ++j) res.param_grads[node.layer][0][j] += g.at2(0, j);
                break;
            }
            case LayerKind::MeanPool: {
                if (x.rank() == 3) {
                    int64_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
                    gx = zeros_like(x);
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t p = 0; p < hw; ++p)
                            gx[ch * hw + p] = g[ch] / static_cast<double>(hw);
                    break;
                }
                int64_t s = x.shape[0], e = x.shape[1];
                gx = Tensor({s, e}, 0.0);
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t j = 0; j < e; ++j) gx.at2(t, j) = g[j] / static_cast<double>(s);
                break;
            }
        }
        g = std::move(gx);
    }

    std::reverse(res.attn_grads.begin(), res.attn_grads.end());
    res.input_grad = std::move(g);
    return res;
}

Tensor grad(const Tape& tape, const Tensor& seed) {
    return grad_full(tape, seed, false, false).input_grad;
}

}  // namespace relprop
