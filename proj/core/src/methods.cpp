#include "relprop/methods.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <utility>

#include "kernels.hpp"
#include "relprop/error.hpp"
#include "relprop/rng.hpp"

namespace relprop {

const char* method_name(Method m) {
    switch (m) {
        case Method::AbsLrp: return "abslrp";
        case Method::LrpEpsilon: return "lrp-eps";
        case Method::LrpAlphaBeta: return "lrp-alphabeta";
        case Method::Rap: return "rap";
        case Method::Crap: return "crap";
        case Method::Clrp: return "clrp";
        case Method::Saliency: return "saliency";
        case Method::InputXGradient: return "input-x-gradient";
        case Method::Rollout: return "rollout";
        case Method::Tibav: return "tibav";
        case Method::Constant: return "constant";
        case Method::Random: return "random";
    }
    return "?";
}

Method method_from_name(const std::string& name) {
    static const std::pair<const char*, Method> table[] = {
        {"abslrp", Method::AbsLrp},
        {"lrp-eps", Method::LrpEpsilon},
        {"lrp-alphabeta", Method::LrpAlphaBeta},
        {"rap", Method::Rap},
        {"crap", Method::Crap},
        {"clrp", Method::Clrp},
        {"saliency", Method::Saliency},
        {"input-x-gradient", Method::InputXGradient},
        {"rollout", Method::Rollout},
        {"tibav", Method::Tibav},
        {"constant", Method::Constant},
        {"random", Method::Random},
    };
    for (const auto& [n, m] : table)
        if (name == n) return m;
    throw UsageError("unknown method '" + name + "'");
}

const char* ablation_name(Ablation a) {
    switch (a) {
        case Ablation::None: return "none";
        case Ablation::PatchStop: return "patch-stop";
        case Ablation::ValueOnly: return "value-only";
        case Ablation::QkOnly: return "qk-only";
    }
    return "?";
}

Ablation ablation_from_name(const std::string& name) {
    if (name == "none") return Ablation::None;
    if (name == "patch-stop") return Ablation::PatchStop;
    if (name == "value-only") return Ablation::ValueOnly;
    if (name == "qk-only") return Ablation::QkOnly;
    throw UsageError("unknown ablation '" + name + "'");
}

Tensor init_relevance(int64_t num_classes, int64_t target, bool contrastive) {
    if (target < 0 || target >= num_classes)
        throw UsageError("target " + std::to_string(target) + " out of range for " +
                         std::to_string(num_classes) + " classes");
    Tensor r({num_classes}, contrastive ? -1.0 / static_cast<double>(num_classes) : 0.0);
    r[target] = 1.0;
    return r;
}

namespace {

using kernels::transpose2d;

// All four redistribution families reduce to one per-contribution share
// function. c is a single signed contribution x_i*w_ij, z the output value
// with bias, zp/zm the positive/negative contribution sums of that output
// with the bias folded into the side matching its sign.
struct RuleCtx {
    Method family = Method::AbsLrp;  // AbsLrp, LrpEpsilon, LrpAlphaBeta or Rap
    AbsLrpRoute route = AbsLrpRoute::Explicit;
    double eps = 1e-9;
    double alpha = 1.0;
    double beta = 0.0;
};

double stabilized(double z, double eps) { return z >= 0.0 ? z + eps : z - eps; }

double share(double c, double z, double zp, double zm, double r, const RuleCtx& ctx) {
    switch (ctx.family) {
        case Method::AbsLrp:
            return c > 0.0 ? c / (std::fabs(z) + ctx.eps) * r : 0.0;
        case Method::LrpEpsilon:
            return c / stabilized(z, ctx.eps) * r;
        case Method::LrpAlphaBeta: {
            double out = 0.0;
            if (c > 0.0 && zp != 0.0) out += ctx.alpha * c / zp * r;
            if (c < 0.0 && zm != 0.0) out -= ctx.beta * c / zm * r;
            return out;
        }
        case Method::Rap: {
            double d = zp + std::fabs(zm);
            return d != 0.0 ? c / d * r : 0.0;
        }
        default:
            return 0.0;
    }
}

// Subtracts the mean of the non-zero entries from each non-zero entry.
// Structural zeros stay zero, so inactive units keep zero relevance.
void psi_shift_inplace(Tensor& t) {
    double s = 0.0;
    int64_t n = 0;
    for (double v : t.data)
        if (v != 0.0) {
            s += v;
            ++n;
        }
    if (n == 0) return;
    double m = s / static_cast<double>(n);
    for (double& v : t.data)
        if (v != 0.0) v -= m;
}

void maybe_psi(Tensor& t, const RuleCtx& ctx) {
    if (ctx.family == Method::Rap) psi_shift_inplace(t);
}

// Matrix-space redistribution: outputs z = wmat*cols + bias, relevance rel
// over the outputs, result over the columns. bias_vec is per output row,
// bias_mat per output element; at most one of them is set.
Tensor redistribute_cols(const Tensor& cols, const Tensor& wmat, const Tensor* bias_vec,
                         const Tensor* bias_mat, const Tensor& z, const Tensor& rel,
                         const RuleCtx& ctx) {
    int64_t jdim = wmat.shape[0], ldim = cols.shape[1];
    auto bias_at = [&](int64_t j, int64_t l) -> double {
        if (bias_vec) return (*bias_vec)[j];
        if (bias_mat) return bias_mat->at2(j, l);
        return 0.0;
    };
    // Signed contribution sums, bias folded in by sign. Only the two-sided
    // families pay for these matmuls.
    auto signed_sums = [&](Tensor& zp, Tensor& zm) {
        Tensor wp = pos_part(wmat), wn = neg_part(wmat);
        Tensor cp = pos_part(cols), cn = neg_part(cols);
        zp = add(matmul(wp, cp), matmul(wn, cn));
        zm = add(matmul(wp, cn), matmul(wn, cp));
        for (int64_t j = 0; j < jdim; ++j)
            for (int64_t l = 0; l < ldim; ++l) {
                double b = bias_at(j, l);
                if (b > 0.0) zp.at2(j, l) += b;
                if (b < 0.0) zm.at2(j, l) += b;
            }
    };

    switch (ctx.family) {
        case Method::AbsLrp: {
            Tensor s = rel;
            for (int64_t i = 0; i < s.numel(); ++i) s[i] = rel[i] / (std::fabs(z[i]) + ctx.eps);
            if (ctx.route == AbsLrpRoute::Explicit) {
                Tensor a = matmul(transpose2d(pos_part(wmat)), s);
                Tensor b = matmul(transpose2d(neg_part(wmat)), s);
                return add(mul(pos_part(cols), a), mul(neg_part(cols), b));
            }
            // Transposed-map route: 0.5*(x (.) W^T s + |x| (.) |W|^T s). The
            // half compensates the doubling in forward-plus-abs-forward.
            Tensor a = matmul(transpose2d(wmat), s);
            Tensor b = matmul(transpose2d(abs(wmat)), s);
            return scale(add(mul(cols, a), mul(abs(cols), b)), 0.5);
        }
        case Method::LrpEpsilon: {
            Tensor s = rel;
            for (int64_t i = 0; i < s.numel(); ++i) s[i] = rel[i] / stabilized(z[i], ctx.eps);
            return mul(cols, matmul(transpose2d(wmat), s));
        }
        case Method::LrpAlphaBeta: {
            Tensor zp, zm;
            signed_sums(zp, zm);
            Tensor sp({jdim, ldim}, 0.0), sm({jdim, ldim}, 0.0);
            for (int64_t j = 0; j < jdim; ++j)
                for (int64_t l = 0; l < ldim; ++l) {
                    double zpv = zp.at2(j, l), zmv = zm.at2(j, l);
                    if (zpv != 0.0) sp.at2(j, l) = ctx.alpha * rel.at2(j, l) / zpv;
                    if (zmv != 0.0) sm.at2(j, l) = ctx.beta * rel.at2(j, l) / zmv;
                }
            Tensor wp = pos_part(wmat), wn = neg_part(wmat);
            Tensor cp = pos_part(cols), cn = neg_part(cols);
            Tensor pos =
                add(mul(cp, matmul(transpose2d(wp), sp)), mul(cn, matmul(transpose2d(wn), sp)));
            Tensor neg =
                add(mul(cp, matmul(transpose2d(wn), sm)), mul(cn, matmul(transpose2d(wp), sm)));
            return sub(pos, neg);
        }
        case Method::Rap: {
            Tensor zp, zm;
            signed_sums(zp, zm);
            Tensor s({jdim, ldim}, 0.0);
            for (int64_t j = 0; j < jdim; ++j)
                for (int64_t l = 0; l < ldim; ++l) {
                    double d = zp.at2(j, l) + std::fabs(zm.at2(j, l));
                    if (d != 0.0) s.at2(j, l) = rel.at2(j, l) / d;
                }
            return mul(cols, matmul(transpose2d(wmat), s));
        }
        default:
            return zeros_like(cols);
    }
}

// Affine step with a diagonal weight: z = w*x + b.
double diag_share(double x, double w, double b, double z, double r, const RuleCtx& ctx) {
    double c = w * x;
    double zp = (c > 0.0 ? c : 0.0) + (b > 0.0 ? b : 0.0);
    double zm = (c < 0.0 ? c : 0.0) + (b < 0.0 ? b : 0.0);
    return share(c, z, zp, zm, r, ctx);
}

Tensor redistribute_linear_vec(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& y,
                               const Tensor& rel, const RuleCtx& ctx) {
    Tensor cols = x.reshaped({x.numel(), 1});
    Tensor z = y.reshaped({y.numel(), 1});
    Tensor r2 = rel.reshaped({rel.numel(), 1});
    Tensor out = redistribute_cols(cols, w, &b, nullptr, z, r2, ctx);
    return out.reshaped({x.numel()});
}

// Row-wise linear over a (rows, in) matrix, as used on token embeddings.
Tensor redistribute_linear_rows(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& y,
                                const Tensor& rel, const RuleCtx& ctx) {
    Tensor cols = transpose2d(x);
    Tensor z = transpose2d(y);
    Tensor r2 = transpose2d(rel);
    Tensor out = redistribute_cols(cols, w, &b, nullptr, z, r2, ctx);
    return transpose2d(out);
}

Tensor redistribute_linear_any(const Tensor& x, const LayerSpec& l, const Tensor& y,
                               const Tensor& rel, const RuleCtx& ctx) {
    const Tensor& w = l.param("weight");
    const Tensor& b = l.param("bias");
    if (x.rank() == 1) return redistribute_linear_vec(x, w, b, y, rel, ctx);
    return redistribute_linear_rows(x, w, b, y, rel, ctx);
}

Tensor redistribute_conv(const Tensor& x, const LayerSpec& l, const Tensor& y, const Tensor& rel,
                         const RuleCtx& ctx) {
    const Tensor& w = l.param("weight");
    const Tensor& b = l.param("bias");
    int64_t oc = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    Tensor cols = kernels::im2col(x, kh, kw, l.stride, l.padding);
    Tensor wmat = w.reshaped({oc, w.numel() / oc});
    int64_t spots = cols.shape[1];
    Tensor z = y.reshaped({oc, spots});
    Tensor r2 = rel.reshaped({oc, spots});
    Tensor rel_cols = redistribute_cols(cols, wmat, &b, nullptr, z, r2, ctx);
    return kernels::col2im_add(rel_cols, x.shape[0], x.shape[1], x.shape[2], kh, kw, l.stride,
                               l.padding);
}

Tensor redistribute_patch_embed(const Tensor& x, const LayerSpec& l, const Tensor& y,
                                const Tensor& rel, const RuleCtx& ctx) {
    const Tensor& w = l.param("weight");
    const Tensor& b = l.param("bias");
    const Tensor& pos = l.param("pos");
    int64_t embed = w.shape[0];
    Tensor cols = kernels::im2col(x, l.patch, l.patch, l.patch, 0);
    int64_t tokens = cols.shape[1];
    // The positional offset acts as a per-token bias next to the shared one.
    Tensor bias_mat({embed, tokens}, 0.0);
    for (int64_t e = 0; e < embed; ++e)
        for (int64_t t = 0; t < tokens; ++t) bias_mat.at2(e, t) = b[e] + pos.at2(t, e);
    Tensor z = transpose2d(y);
    Tensor r2 = transpose2d(rel);
    Tensor rel_cols = redistribute_cols(cols, w, nullptr, &bias_mat, z, r2, ctx);
    return kernels::col2im_add(rel_cols, x.shape[0], x.shape[1], x.shape[2], l.patch, l.patch,
                               l.patch, 0);
}

Tensor redistribute_mean_pool(const Tensor& x, const Tensor& y, const Tensor& rel,
                              const RuleCtx& ctx) {
    if (x.rank() == 3) {
        // global average pool: each channel's relevance splits over its own
        // spatial positions
        int64_t chans = x.shape[0], hw = x.shape[1] * x.shape[2];
        double inv = 1.0 / static_cast<double>(hw);
        Tensor rel_x = zeros_like(x);
        for (int64_t ch = 0; ch < chans; ++ch) {
            double zp = 0.0, zm = 0.0;
            for (int64_t p = 0; p < hw; ++p) {
                double c = x[ch * hw + p] * inv;
                (c > 0.0 ? zp : zm) += c;
            }
            for (int64_t p = 0; p < hw; ++p)
                rel_x[ch * hw + p] = share(x[ch * hw + p] * inv, y[ch], zp, zm, rel[ch], ctx);
        }
        return rel_x;
    }
    int64_t rows = x.shape[0], width = x.shape[1];
    double inv = 1.0 / static_cast<double>(rows);
    Tensor rel_x = zeros_like(x);
    for (int64_t e = 0; e < width; ++e) {
        double zp = 0.0, zm = 0.0;
        for (int64_t t = 0; t < rows; ++t) {
            double c = x.at2(t, e) * inv;
            (c > 0.0 ? zp : zm) += c;
        }
        for (int64_t t = 0; t < rows; ++t)
            rel_x.at2(t, e) = share(x.at2(t, e) * inv, y[e], zp, zm, rel[e], ctx);
    }
    return rel_x;
}

// Elementwise sum y = a + b; relevance splits between the two addends.
void redistribute_residual(const Tensor& a, const Tensor& b, const Tensor& y, const Tensor& rel,
                           const RuleCtx& ctx, Tensor& rel_a, Tensor& rel_b) {
    rel_a = zeros_like(a);
    rel_b = zeros_like(b);
    for (int64_t i = 0; i < y.numel(); ++i) {
        double zp = (a[i] > 0.0 ? a[i] : 0.0) + (b[i] > 0.0 ? b[i] : 0.0);
        double zm = (a[i] < 0.0 ? a[i] : 0.0) + (b[i] < 0.0 ? b[i] : 0.0);
        rel_a[i] = share(a[i], y[i], zp, zm, rel[i], ctx);
        rel_b[i] = share(b[i], y[i], zp, zm, rel[i], ctx);
    }
}

// Normalization layers redistribute as two chained diagonal affine steps with
// the statistics treated as constants.
Tensor redistribute_batchnorm(const LayerSpec& l, const Tensor& x, const Tensor& y,
                              const Tensor& rel, const RuleCtx& ctx) {
    const Tensor& gamma = l.param("gamma");
    const Tensor& beta = l.param("beta");
    const Tensor& mean = l.param("running_mean");
    const Tensor& var = l.param("running_var");
    int64_t ch = x.shape[0], hw = x.numel() / ch;
    Tensor rel_x = zeros_like(x);
    for (int64_t c = 0; c < ch; ++c) {
        double sd = std::sqrt(var[c] + l.norm_eps);
        for (int64_t i = 0; i < hw; ++i) {
            double xv = x[c * hw + i];
            double xhat = (xv - mean[c]) / sd;
            double r1 = diag_share(xhat, gamma[c], beta[c], y[c * hw + i], rel[c * hw + i], ctx);
            rel_x[c * hw + i] = diag_share(xv, 1.0 / sd, -mean[c] / sd, xhat, r1, ctx);
        }
    }
    return rel_x;
}

Tensor redistribute_layernorm(const LayerSpec& l, const Tensor& x, const Tensor& y,
                              const Tensor& rel, const RuleCtx& ctx) {
    const Tensor& gamma = l.param("gamma");
    const Tensor& beta = l.param("beta");
    int64_t width = x.shape[x.rank() - 1];
    int64_t rows = x.numel() / width;
    Tensor rel_x = zeros_like(x);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * width;
        double m = 0.0;
        for (int64_t e = 0; e < width; ++e) m += xr[e];
        m /= static_cast<double>(width);
        double v = 0.0;
        for (int64_t e = 0; e < width; ++e) v += (xr[e] - m) * (xr[e] - m);
        v /= static_cast<double>(width);
        double sd = std::sqrt(v + l.norm_eps);
        for (int64_t e = 0; e < width; ++e) {
            int64_t i = r * width + e;
            double xhat = (xr[e] - m) / sd;
            double r1 = diag_share(xhat, gamma[e], beta[e], y[i], rel[i], ctx);
            rel_x[i] = diag_share(xr[e], 1.0 / sd, -m / sd, xhat, r1, ctx);
        }
    }
    return rel_x;
}

// Winner-takes-all pooling: each window's relevance follows the routed
// maximum for every family, so totals are preserved.
Tensor maxpool_route(const LayerSpec& l, const Tensor& x, const Tensor& rel) {
    Tensor rel_x = zeros_like(x);
    int64_t c = x.shape[0], oh = rel.shape[1], ow = rel.shape[2];
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox)
                rel_x[kernels::maxpool_argmax(x, ci, oy, ox, l.pool)] += rel.at3(ci, oy, ox);
    return rel_x;
}

// Absolute-magnitude rule for unary maps h(x): the signed and absolute-input
// responses are averaged against the absolute output. Inactive relu units
// always carry exactly zero incoming relevance (their downstream
// contributions vanish), so clamping them avoids the epsilon division.
Tensor abslrp_relu(const Tensor& x, const Tensor& rel, double eps) {
    Tensor out = zeros_like(x);
    for (int64_t i = 0; i < x.numel(); ++i)
        if (x[i] > 0.0) out[i] = x[i] / (x[i] + eps) * rel[i];
    return out;
}

Tensor abslrp_gelu(const Tensor& x, const Tensor& rel, double eps) {
    Tensor out = zeros_like(x);
    for (int64_t i = 0; i < x.numel(); ++i) {
        double sgn = x[i] >= 0.0 ? 1.0 : -1.0;
        double num =
            x[i] * 0.5 * (kernels::gelu_deriv(x[i]) + sgn * kernels::gelu_deriv(std::fabs(x[i])));
        out[i] = num / (std::fabs(kernels::gelu_val(x[i])) + eps) * rel[i];
    }
    return out;
}

// Softmax with the normalizer treated as a constant: h_j = exp(x_j)*c. All
// exponentials are shifted by the row max so they stay bounded.
void abslrp_softmax_row(const double* x, const double* h, const double* rel, double* out,
                        int64_t width, double eps) {
    double mx = x[0];
    for (int64_t e = 1; e < width; ++e) mx = std::max(mx, x[e]);
    double denom = 0.0;
    for (int64_t e = 0; e < width; ++e) denom += std::exp(x[e] - mx);
    double c = 1.0 / denom;  // detached normalizer in max-shifted units
    for (int64_t e = 0; e < width; ++e) {
        double e2 = std::exp(std::fabs(x[e]) - mx);
        double sgn = x[e] >= 0.0 ? 1.0 : -1.0;
        double num = x[e] * 0.5 * (h[e] + sgn * e2 * c);
        out[e] = num / (h[e] + eps) * rel[e];
    }
}

Tensor abslrp_softmax(const Tensor& x, const Tensor& h, const Tensor& rel, double eps) {
    int64_t width = x.shape[x.rank() - 1];
    int64_t rows = x.numel() / width;
    Tensor out = zeros_like(x);
    for (int64_t r = 0; r < rows; ++r)
        abslrp_softmax_row(x.data.data() + r * width, h.data.data() + r * width,
                           rel.data.data() + r * width, out.data.data() + r * width, width, eps);
    return out;
}

struct AttnRelevance {
    Tensor rel_x;
    Tensor rel_attn;  // (H, S, S), credited to the post-softmax tensor
};

AttnRelevance attention_redistribute(const LayerSpec& l, const Tensor& x, const AttnState& st,
                                     const Tensor& out, const Tensor& rel, const RuleCtx& ctx,
                                     Ablation ablation) {
    bool use_values = ablation != Ablation::QkOnly;
    bool use_qk = ablation != Ablation::ValueOnly;
    int64_t seq = x.shape[0], embed = x.shape[1];
    int64_t heads = l.heads, hd = embed / heads;
    double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor rel_merged =
        redistribute_linear_rows(st.merged, l.param("wo"), l.param("bo"), out, rel, ctx);
    maybe_psi(rel_merged, ctx);

    // Bilinear mix O(i,d) = sum_j A(i,j) V(j,d) per head. Each signed product
    // credits both of its factors with the same share.
    Tensor rel_attn({heads, seq, seq}, 0.0);
    Tensor rel_v({seq, embed}, 0.0);
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t i = 0; i < seq; ++i)
            for (int64_t d = 0; d < hd; ++d) {
                int64_t col = h * hd + d;
                double zp = 0.0, zm = 0.0;
                for (int64_t j = 0; j < seq; ++j) {
                    double c = st.attn.at3(h, i, j) * st.v.at2(j, col);
                    (c > 0.0 ? zp : zm) += c;
                }
                double zv = st.merged.at2(i, col);
                double rv = rel_merged.at2(i, col);
                for (int64_t j = 0; j < seq; ++j) {
                    double c = st.attn.at3(h, i, j) * st.v.at2(j, col);
                    double inc = share(c, zv, zp, zm, rv, ctx);
                    if (use_qk) rel_attn.at3(h, i, j) += inc;
                    if (use_values) rel_v.at2(j, col) += inc;
                }
            }

    Tensor rel_x({seq, embed}, 0.0);
    if (use_qk) {
        Tensor rel_scores = ctx.family == Method::AbsLrp
                                ? abslrp_softmax(st.scores, st.attn, rel_attn, ctx.eps)
                                : rel_attn;
        // Bilinear scores(i,j) = sc * sum_d Q(i,d) K(j,d) per head.
        Tensor rel_q({seq, embed}, 0.0), rel_k({seq, embed}, 0.0);
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < seq; ++i)
                for (int64_t j = 0; j < seq; ++j) {
                    double zp = 0.0, zm = 0.0;
                    for (int64_t d = 0; d < hd; ++d) {
                        double c = st.q.at2(i, h * hd + d) * st.k.at2(j, h * hd + d) * sc;
                        (c > 0.0 ? zp : zm) += c;
                    }
                    double zv = st.scores.at3(h, i, j);
                    double rv = rel_scores.at3(h, i, j);
                    for (int64_t d = 0; d < hd; ++d) {
                        int64_t col = h * hd + d;
                        double c = st.q.at2(i, col) * st.k.at2(j, col) * sc;
                        double inc = share(c, zv, zp, zm, rv, ctx);
                        rel_q.at2(i, col) += inc;
                        rel_k.at2(j, col) += inc;
                    }
                }
        Tensor rq = redistribute_linear_rows(x, l.param("wq"), l.param("bq"), st.q, rel_q, ctx);
        maybe_psi(rq, ctx);
        Tensor rk = redistribute_linear_rows(x, l.param("wk"), l.param("bk"), st.k, rel_k, ctx);
        maybe_psi(rk, ctx);
        rel_x = add(rel_x, add(rq, rk));
    }
    if (use_values) {
        Tensor rv = redistribute_linear_rows(x, l.param("wv"), l.param("bv"), st.v, rel_v, ctx);
        maybe_psi(rv, ctx);
        rel_x = add(rel_x, rv);
    }
    return {std::move(rel_x), std::move(rel_attn)};
}

bool is_rule_method(Method m) {
    switch (m) {
        case Method::AbsLrp:
        case Method::LrpEpsilon:
        case Method::LrpAlphaBeta:
        case Method::Rap:
        case Method::Crap:
        case Method::Clrp:
            return true;
        default:
            return false;
    }
}

RuleCtx rule_ctx_for(const MethodConfig& cfg) {
    RuleCtx ctx;
    ctx.eps = cfg.epsilon;
    ctx.route = cfg.route;
    switch (cfg.method) {
        case Method::AbsLrp:
            ctx.family = Method::AbsLrp;
            break;
        case Method::LrpEpsilon:
            ctx.family = Method::LrpEpsilon;
            break;
        case Method::LrpAlphaBeta:
            if (std::fabs(cfg.alpha - cfg.beta - 1.0) > 1e-12 || cfg.alpha < 1.0)
                throw UsageError("alpha - beta must equal 1 with alpha >= 1");
            ctx.family = Method::LrpAlphaBeta;
            ctx.alpha = cfg.alpha;
            ctx.beta = cfg.beta;
            break;
        case Method::Clrp:
            ctx.family = Method::LrpAlphaBeta;
            ctx.alpha = 1.0;
            ctx.beta = 0.0;
            break;
        case Method::Rap:
        case Method::Crap:
            ctx.family = Method::Rap;
            break;
        default:
            throw UsageError(std::string("method '") + method_name(cfg.method) +
                             "' has no layer-wise redistribution rule");
    }
    return ctx;
}

// Forward output of one linear-like layer, for the standalone per-layer entry
// points where no tape is at hand.
Tensor linear_like_forward(const LayerSpec& l, const Tensor& x) {
    switch (l.kind) {
        case LayerKind::Linear:
            return kernels::linear_apply(x, l.param("weight"), &l.param("bias"));
        case LayerKind::Conv2d:
            return kernels::conv_forward(x, l.param("weight"), l.param("bias"), l.stride,
                                         l.padding);
        case LayerKind::PatchEmbed:
            return kernels::patch_embed_forward(x, l);
        case LayerKind::MeanPool:
            return kernels::meanpool_forward(x);
        default:
            throw UsageError(std::string("layer kind '") + kind_name(l.kind) +
                             "' has no standalone redistribution rule");
    }
}

Tensor linear_like_redistribute(const LayerSpec& l, const Tensor& x, const Tensor& y,
                                const Tensor& rel, const RuleCtx& ctx) {
    switch (l.kind) {
        case LayerKind::Linear:
            return redistribute_linear_any(x, l, y, rel, ctx);
        case LayerKind::Conv2d:
            return redistribute_conv(x, l, y, rel, ctx);
        case LayerKind::PatchEmbed:
            return redistribute_patch_embed(x, l, y, rel, ctx);
        case LayerKind::MeanPool:
            return redistribute_mean_pool(x, y, rel, ctx);
        default:
            throw UsageError(std::string("layer kind '") + kind_name(l.kind) +
                             "' has no standalone redistribution rule");
    }
}

Tensor single_layer_rule(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                         const RuleCtx& ctx) {
    Tensor y = linear_like_forward(l, input);
    if (rel_next.shape != y.shape)
        throw NumericError("relevance shape " + shape_str(rel_next.shape) +
                           " does not match layer output " + shape_str(y.shape));
    Tensor out = linear_like_redistribute(l, input, y, rel_next, ctx);
    maybe_psi(out, ctx);
    return out;
}

}  // namespace

Tensor abslrp_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                    double epsilon, AbsLrpRoute route) {
    RuleCtx ctx;
    ctx.family = Method::AbsLrp;
    ctx.eps = epsilon;
    ctx.route = route;
    return single_layer_rule(l, input, rel_next, ctx);
}

Tensor lrp_epsilon_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                         double epsilon) {
    RuleCtx ctx;
    ctx.family = Method::LrpEpsilon;
    ctx.eps = epsilon;
    return single_layer_rule(l, input, rel_next, ctx);
}

Tensor lrp_alphabeta_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next,
                           double alpha, double beta) {
    if (std::fabs(alpha - beta - 1.0) > 1e-12 || alpha < 1.0)
        throw UsageError("alpha - beta must equal 1 with alpha >= 1");
    RuleCtx ctx;
    ctx.family = Method::LrpAlphaBeta;
    ctx.alpha = alpha;
    ctx.beta = beta;
    return single_layer_rule(l, input, rel_next, ctx);
}

Tensor rap_layer(const LayerSpec& l, const Tensor& input, const Tensor& rel_next) {
    RuleCtx ctx;
    ctx.family = Method::Rap;
    return single_layer_rule(l, input, rel_next, ctx);
}

RelevanceResult relevance_backward(const Tape& tape, const Tensor& seed, const MethodConfig& cfg,
                                   bool capture_attn) {
    RuleCtx ctx = rule_ctx_for(cfg);
    if (seed.shape != tape.output().shape)
        throw NumericError("relevance seed shape " + shape_str(seed.shape) +
                           " does not match output shape " + shape_str(tape.output().shape));

    RelevanceResult res;
    std::map<int64_t, Tensor> pending_skip;
    Tensor r = seed;
    bool stopped = false;

    for (int64_t ni = static_cast<int64_t>(tape.nodes.size()) - 1; ni >= 0 && !stopped; --ni) {
        const TapeNode& node = tape.nodes[static_cast<size_t>(ni)];
        const LayerSpec& l = tape.spec(node);
        const Tensor& x = node.input;
        Tensor rx;
        switch (l.kind) {
            case LayerKind::Linear: {
                rx = redistribute_linear_any(x, l, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
            case LayerKind::Conv2d: {
                rx = redistribute_conv(x, l, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
            case LayerKind::Relu: {
                rx = ctx.family == Method::AbsLrp ? abslrp_relu(x, r, ctx.eps) : r;
                break;
            }
            case LayerKind::Gelu: {
                rx = ctx.family == Method::AbsLrp ? abslrp_gelu(x, r, ctx.eps) : r;
                break;
            }
            case LayerKind::MaxPool2d: {
                rx = maxpool_route(l, x, r);
                break;
            }
            case LayerKind::Softmax: {
                rx = ctx.family == Method::AbsLrp ? abslrp_softmax(x, node.output, r, ctx.eps) : r;
                break;
            }
            case LayerKind::BatchNorm: {
                rx = redistribute_batchnorm(l, x, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
            case LayerKind::LayerNorm: {
                rx = redistribute_layernorm(l, x, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
            case LayerKind::SelfAttention: {
                AttnRelevance ar =
                    attention_redistribute(l, x, *node.attn, node.output, r, ctx, cfg.ablation);
                if (capture_attn) res.attn_rel.push_back(std::move(ar.rel_attn));
                rx = std::move(ar.rel_x);
                break;
            }
            case LayerKind::ResidualBegin: {
                rx = r;
                auto it = pending_skip.find(ni);
                if (it != pending_skip.end()) {
                    rx = add(rx, it->second);
                    pending_skip.erase(it);
                }
                break;
            }
            case LayerKind::ResidualEnd: {
                Tensor rel_branch, rel_skip;
                redistribute_residual(x, node.skip, node.output, r, ctx, rel_branch, rel_skip);
                pending_skip[node.partner] = std::move(rel_skip);
                rx = std::move(rel_branch);
                break;
            }
            case LayerKind::Flatten: {
                rx = r.reshaped(x.shape);
                break;
            }
            case LayerKind::PatchEmbed: {
                if (cfg.ablation == Ablation::PatchStop) {
                    // Stop at token level; the caller turns this into a
                    // patch-resolution map over the input grid.
                    res.token_rel = r;
                    rx = zeros_like(tape.input());
                    stopped = true;
                    break;
                }
                rx = redistribute_patch_embed(x, l, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
            case LayerKind::ClassToken: {
                int64_t s = x.shape[0], e = x.shape[1];
                rx = Tensor({s, e}, 0.0);
                for (int64_t t = 0; t < s; ++t)
                    for (int64_t j = 0; j < e; ++j) rx.at2(t, j) = r.at2(t + 1, j);
                break;
            }
            case LayerKind::MeanPool: {
                rx = redistribute_mean_pool(x, node.output, r, ctx);
                maybe_psi(rx, ctx);
                break;
            }
        }
        r = std::move(rx);
    }

    std::reverse(res.attn_rel.begin(), res.attn_rel.end());
    res.input_rel = std::move(r);
    return res;
}

namespace {

// Nearest-neighbour upscale of a per-patch map onto the model input, repeated
// across channels.
Tensor patch_map_to_input(const Model& m, const Tensor& patches) {
    auto [gh, gw] = patch_grid(m);
    if (patches.numel() != gh * gw)
        throw NumericError("patch map size does not match the patch grid");
    int64_t c = m.input_shape[0], h = m.input_shape[1], w = m.input_shape[2];
    int64_t ph = h / gh, pw = w / gw;
    Tensor out({c, h, w}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                out.at3(ci, y, x) = patches[(y / ph) * gw + x / pw];
    return out;
}

// I + mixed, rows scaled to sum 1 when requested.
Tensor flow_matrix(const Tensor& mixed, bool renormalize) {
    int64_t s = mixed.shape[0];
    Tensor a = mixed;
    for (int64_t i = 0; i < s; ++i) a.at2(i, i) += 1.0;
    if (renormalize)
        for (int64_t i = 0; i < s; ++i) {
            double row = 0.0;
            for (int64_t j = 0; j < s; ++j) row += a.at2(i, j);
            if (row != 0.0)
                for (int64_t j = 0; j < s; ++j) a.at2(i, j) /= row;
        }
    return a;
}

std::vector<const TapeNode*> attention_nodes(const Tape& tape) {
    std::vector<const TapeNode*> out;
    for (const auto& node : tape.nodes)
        if (tape.spec(node).kind == LayerKind::SelfAttention) out.push_back(&node);
    return out;
}

// Shared scaffold for the attention-flow methods: per-block (S, S) mixing
// matrices composed first block innermost, then the class-token row read out
// over the patch columns.
AttributionMap compose_attention_flow(const Tape& tape, const std::vector<Tensor>& mixed,
                                      bool renormalize, Method method) {
    const Model& m = *tape.model;
    auto [gh, gw] = patch_grid(m);
    int64_t s = mixed.front().shape[0];
    if (s != gh * gw + 1)
        throw UsageError("attention flow requires a class token ahead of the patch tokens");
    Tensor flow({s, s}, 0.0);
    for (int64_t i = 0; i < s; ++i) flow.at2(i, i) = 1.0;
    for (const Tensor& mx : mixed) flow = matmul(flow_matrix(mx, renormalize), flow);
    Tensor patches({gh * gw}, 0.0);
    for (int64_t j = 0; j < gh * gw; ++j) patches[j] = flow.at2(0, j + 1);
    AttributionMap out;
    out.values = patch_map_to_input(m, patches);
    out.method = method;
    return out;
}

Tensor head_mean(const Tensor& attn) {
    int64_t h = attn.shape[0], s = attn.shape[1];
    Tensor out({s, s}, 0.0);
    for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) out.at2(i, j) += attn.at3(hi, i, j);
    return scale(out, 1.0 / static_cast<double>(h));
}

}  // namespace

AttributionMap rollout(const Tape& tape, const MethodConfig& cfg) {
    auto blocks = attention_nodes(tape);
    if (blocks.empty()) throw UsageError("rollout requires at least one self-attention layer");
    std::vector<Tensor> mixed;
    mixed.reserve(blocks.size());
    for (const TapeNode* b : blocks) mixed.push_back(head_mean(b->attn->attn));
    return compose_attention_flow(tape, mixed, cfg.renormalize_flow, Method::Rollout);
}

AttributionMap tibav(const Tape& tape, int64_t target, const MethodConfig& cfg) {
    auto blocks = attention_nodes(tape);
    if (blocks.empty()) throw UsageError("tibav requires at least one self-attention layer");
    Tensor seed = init_relevance(tape.model->num_classes, target, false);
    GradResult gr = grad_full(tape, seed, false, true);
    MethodConfig lcfg;
    lcfg.method = Method::LrpEpsilon;
    lcfg.epsilon = cfg.epsilon;
    RelevanceResult rr = relevance_backward(tape, seed, lcfg, true);

    std::vector<Tensor> mixed;
    mixed.reserve(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b) {
        // Per element: positive part of gradient x relevance, then head mean.
        Tensor prod = mul(gr.attn_grads[b], rr.attn_rel[b]);
        mixed.push_back(head_mean(pos_part(prod)));
    }
    AttributionMap out = compose_attention_flow(tape, mixed, cfg.renormalize_flow, Method::Tibav);
    out.target = target;
    return out;
}

namespace {

uint64_t input_fingerprint(const Tensor& input, int64_t target) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (double v : input.data) mix(&v, sizeof v);
    mix(&target, sizeof target);
    return h;
}

}  // namespace

AttributionMap attribute(const Model& model, const Tensor& input, int64_t target,
                         const MethodConfig& cfg) {
    if (target < 0 || target >= model.num_classes)
        throw UsageError("target " + std::to_string(target) + " out of range for " +
                         std::to_string(model.num_classes) + " classes");
    if (cfg.ablation != Ablation::None) {
        if (!is_rule_method(cfg.method))
            throw UsageError(std::string("ablation '") + ablation_name(cfg.ablation) +
                             "' requires a layer-wise rule method");
        if (cfg.ablation == Ablation::PatchStop && !model_has_patch_embed(model))
            throw UsageError("patch-stop ablation requires a patch-embed layer");
        if ((cfg.ablation == Ablation::ValueOnly || cfg.ablation == Ablation::QkOnly) &&
            !model_has_attention(model))
            throw UsageError(std::string("ablation '") + ablation_name(cfg.ablation) +
                             "' requires a self-attention layer");
    }

    AttributionMap out;
    out.method = cfg.method;
    out.target = target;

    switch (cfg.method) {
        case Method::Constant: {
            out.values = Tensor(input.shape, 1.0);
            break;
        }
        case Method::Random: {
            // Seeded from the input bytes and target so repeated calls agree
            // while different inputs draw different maps.
            Rng rng(cfg.seed ^ input_fingerprint(input, target));
            out.values = zeros_like(input);
            for (double& v : out.values.data) v = rng.gaussian();
            break;
        }
        case Method::Saliency:
        case Method::InputXGradient: {
            Tape tape = forward(model, input);
            Tensor g = grad(tape, init_relevance(model.num_classes, target, false));
            out.values = cfg.method == Method::Saliency ? abs(g) : mul(g, input);
            break;
        }
        case Method::Rollout: {
            Tape tape = forward(model, input);
            out = rollout(tape, cfg);
            out.target = target;
            break;
        }
        case Method::Tibav: {
            Tape tape = forward(model, input);
            out = tibav(tape, target, cfg);
            break;
        }
        default: {
            bool contrastive =
                cfg.contrastive || cfg.method == Method::Crap || cfg.method == Method::Clrp;
            Tape tape = forward(model, input);
            Tensor seed = init_relevance(model.num_classes, target, contrastive);
            RelevanceResult rr = relevance_backward(tape, seed, cfg, false);
            if (rr.token_rel) {
                const Tensor& tok = *rr.token_rel;
                Tensor patches({tok.shape[0]}, 0.0);
                for (int64_t t = 0; t < tok.shape[0]; ++t)
                    for (int64_t e = 0; e < tok.shape[1]; ++e) patches[t] += tok.at2(t, e);
                out.values = patch_map_to_input(model, patches);
            } else {
                out.values = std::move(rr.input_rel);
            }
            break;
        }
    }

    if (!all_finite(out.values)) throw NumericError("attribution produced non-finite values");
    return out;
}

Tensor normalize_positive(const Tensor& map) {
    Tensor out = pos_part(map);
    double m = max_value(out);
    if (m > 0.0) out = scale(out, 1.0 / m);
    return out;
}

}  // namespace relprop
