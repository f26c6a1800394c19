#pragma once

// Internal compute kernels shared by the forward tape and the relevance
// backward passes. Not installed.

#include <algorithm>
#include <cmath>
#include <vector>

#include "relprop/model.hpp"
#include "relprop/tensor.hpp"

namespace relprop::kernels {

// Unrolls CHW input into a (C*kh*kw) x (oh*ow) matrix; column l holds the
// receptive field of output position l in [c][ky][kx] order. Out-of-bounds
// taps (padding) read as zero.
inline Tensor im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad) {
    int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (w + 2 * pad - kw) / stride + 1;
    Tensor cols({c * kh * kw, oh * ow}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t row = (ci * kh + ky) * kw + kx;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        cols.at2(row, oy * ow + ox) = x.at3(ci, iy, ix);
                    }
                }
            }
    return cols;
}

// Scatter-adds a (C*kh*kw) x (oh*ow) matrix back onto the input grid;
// overlapping receptive fields accumulate.
inline Tensor col2im_add(const Tensor& cols, int64_t c, int64_t h, int64_t w, int64_t kh,
                         int64_t kw, int64_t stride, int64_t pad) {
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (w + 2 * pad - kw) / stride + 1;
    Tensor x({c, h, w}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t row = (ci * kh + ky) * kw + kx;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        x.at3(ci, iy, ix) += cols.at2(row, oy * ow + ox);
                    }
                }
            }
    return x;
}

// y = x W^T + b applied to a vector or row-wise to a matrix; W is (out, in).
inline Tensor linear_apply(const Tensor& x, const Tensor& w, const Tensor* b) {
    int64_t out = w.shape[0], in = w.shape[1];
    int64_t rows = x.rank() == 2 ? x.shape[0] : 1;
    Tensor y(x.rank() == 2 ? std::vector<int64_t>{rows, out} : std::vector<int64_t>{out}, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < out; ++j) {
            double acc = b ? (*b)[j] : 0.0;
            const double* xr = x.data.data() + r * in;
            const double* wr = w.data.data() + j * in;
            for (int64_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
            y[r * out + j] = acc;
        }
    return y;
}

// g_x = g W for the layout above (vector or row-wise matrix).
inline Tensor linear_backward_input(const Tensor& g, const Tensor& w) {
    int64_t out = w.shape[0], in = w.shape[1];
    int64_t rows = g.rank() == 2 ? g.shape[0] : 1;
    Tensor gx(g.rank() == 2 ? std::vector<int64_t>{rows, in} : std::vector<int64_t>{in}, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < out; ++j) {
            double gv = g[r * out + j];
            if (gv == 0.0) continue;
            const double* wr = w.data.data() + j * in;
            double* gxr = gx.data.data() + r * in;
            for (int64_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
        }
    return gx;
}

inline Tensor transpose2d(const Tensor& t) {
    Tensor out({t.shape[1], t.shape[0]}, 0.0);
    for (int64_t i = 0; i < t.shape[0]; ++i)
        for (int64_t j = 0; j < t.shape[1]; ++j) out.at2(j, i) = t.at2(i, j);
    return out;
}

inline Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                           int64_t pad) {
    int64_t out_c = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    int64_t oh = (x.shape[1] + 2 * pad - kh) / stride + 1;
    int64_t ow = (x.shape[2] + 2 * pad - kw) / stride + 1;
    Tensor cols = im2col(x, kh, kw, stride, pad);
    Tensor wmat = w.reshaped({out_c, w.shape[1] * kh * kw});
    Tensor y = matmul(wmat, cols);
    for (int64_t j = 0; j < out_c; ++j)
        for (int64_t p = 0; p < oh * ow; ++p) y.at2(j, p) += b[j];
    return y.reshaped({out_c, oh, ow});
}

inline Tensor maxpool_forward(const Tensor& x, int64_t pool) {
    int64_t c = x.shape[0], oh = x.shape[1] / pool, ow = x.shape[2] / pool;
    Tensor y({c, oh, ow}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                double best = -1e300;
                for (int64_t py = 0; py < pool; ++py)
                    for (int64_t px = 0; px < pool; ++px) {
                        double v = x.at3(ci, oy * pool + py, ox * pool + px);
                        if (v > best) best = v;
                    }
                y.at3(ci, oy, ox) = best;
            }
    return y;
}

// Flat index of the window maximum; iteration order makes ties resolve to the
// lowest flat index.
inline int64_t maxpool_argmax(const Tensor& x, int64_t ci, int64_t oy, int64_t ox, int64_t pool) {
    double best = -1e300;
    int64_t best_idx = -1;
    for (int64_t py = 0; py < pool; ++py)
        for (int64_t px = 0; px < pool; ++px) {
            int64_t iy = oy * pool + py, ix = ox * pool + px;
            double v = x.at3(ci, iy, ix);
            if (v > best) {
                best = v;
                best_idx = x.idx3(ci, iy, ix);
            }
        }
    return best_idx;
}

inline Tensor patch_embed_forward(const Tensor& x, const LayerSpec& l) {
    int64_t p = l.patch;
    const Tensor& w = l.param("weight");
    const Tensor& b = l.param("bias");
    const Tensor& pos = l.param("pos");
    Tensor cols = im2col(x, p, p, p, 0);  // (C*P*P, tokens)
    Tensor y = matmul(w, cols);           // (E, tokens)
    Tensor out = transpose2d(y);          // (tokens, E)
    for (int64_t t = 0; t < out.shape[0]; ++t)
        for (int64_t e = 0; e < out.shape[1]; ++e) out.at2(t, e) += b[e] + pos.at2(t, e);
    return out;
}

// Token mean: (S, E) -> (E).
inline Tensor meanpool_forward(const Tensor& x) {
    int64_t s = x.shape[0], e = x.shape[1];
    Tensor out({e}, 0.0);
    for (int64_t t = 0; t < s; ++t)
        for (int64_t j = 0; j < e; ++j) out[j] += x.at2(t, j);
    for (int64_t j = 0; j < e; ++j) out[j] /= static_cast<double>(s);
    return out;
}

inline double gelu_val(double x) {
    constexpr double kRoot2OverPi = 0.7978845608028653558798921198687;
    double u = kRoot2OverPi * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_deriv(double x) {
    constexpr double kRoot2OverPi = 0.7978845608028653558798921198687;
    double u = kRoot2OverPi * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kRoot2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
}

// Numerically stable softmax over the last axis, in place.
inline void softmax_last_axis(Tensor& t) {
    int64_t n = t.shape.back();
    int64_t rows = t.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        double* p = t.data.data() + r * n;
        double mx = p[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, p[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            p[i] = std::exp(p[i] - mx);
            denom += p[i];
        }
        for (int64_t i = 0; i < n; ++i) p[i] /= denom;
    }
}

// Last-axis softmax VJP: gx = s (.) (g - <g, s>) per row, where s is the
// softmax output.
inline Tensor softmax_backward(const Tensor& s, const Tensor& g) {
    Tensor gx = zeros_like(s);
    int64_t n = s.shape.back();
    int64_t rows = s.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        const double* sp = s.data.data() + r * n;
        const double* gp = g.data.data() + r * n;
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += sp[i] * gp[i];
        double* o = gx.data.data() + r * n;
        for (int64_t i = 0; i < n; ++i) o[i] = sp[i] * (gp[i] - dot);
    }
    return gx;
}

struct AttnForward {
    Tensor q, k, v;   // (S, E)
    Tensor scores;    // (H, S, S) scaled pre-softmax
    Tensor attn;      // (H, S, S) post-softmax
    Tensor merged;    // (S, E) head outputs side by side
    Tensor out;       // (S, E)
};

inline AttnForward attention_forward(const Tensor& x, const LayerSpec& l) {
    int64_t s = x.shape[0], e = x.shape[1];
    int64_t nh = l.heads, dh = e / nh;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    AttnForward f;
    f.q = linear_apply(x, l.param("wq"), &l.param("bq"));
    f.k = linear_apply(x, l.param("wk"), &l.param("bk"));
    f.v = linear_apply(x, l.param("wv"), &l.param("bv"));
    f.scores = Tensor({nh, s, s}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (int64_t d = 0; d < dh; ++d)
                    acc += f.q.at2(i, h * dh + d) * f.k.at2(j, h * dh + d);
                f.scores.at3(h, i, j) = acc * inv_sqrt_dh;
            }
    f.attn = f.scores;
    softmax_last_axis(f.attn);
    f.merged = Tensor({s, e}, 0.0);
    for (int64_t h = 0; h < nh; ++h)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (int64_t j = 0; j < s; ++j)
                    acc += f.attn.at3(h, i, j) * f.v.at2(j, h * dh + d);
                f.merged.at2(i, h * dh + d) = acc;
            }
    f.out = linear_apply(f.merged, l.param("wo"), &l.param("bo"));
    return f;
}

}  // namespace relprop::kernels
