#include <cmath>
#include <vector>

#include "doctest.h"
#include "relprop/error.hpp"
#include "relprop/methods.hpp"
#include "relprop/model.hpp"
#include "relprop/rng.hpp"
#include "relprop/tape.hpp"
#include "test_util.hpp"

using namespace relprop;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::rel_diff;

namespace {

// Dense view of an affine layer: columns of M probed with basis vectors,
// offset from the zero input. Exact for linear, conv and patch-embed, and
// independent of the library's unrolling.
struct DenseAffine {
    Tensor m;  // (out, in)
    Tensor c;  // (out)
};

DenseAffine densify(const Model& model) {
    int64_t in = shape_numel(model.input_shape);
    Tape zero = forward(model, Tensor(model.input_shape, 0.0));
    int64_t out = zero.output().numel();
    DenseAffine d{Tensor({out, in}, 0.0), Tensor({out}, 0.0)};
    for (int64_t j = 0; j < out; ++j) d.c[j] = zero.output()[j];
    for (int64_t i = 0; i < in; ++i) {
        Tensor e(model.input_shape, 0.0);
        e[i] = 1.0;
        Tape t = forward(model, e);
        for (int64_t j = 0; j < out; ++j) d.m.at2(j, i) = t.output()[j] - d.c[j];
    }
    return d;
}

// Reference redistribution straight from the per-method definitions, written
// as the literal double loop over outputs and inputs.
enum class Fam { Abs, Eps, AlphaBeta, Rap };

Tensor dense_rule_oracle(const DenseAffine& d, const Tensor& xflat, const Tensor& rel, Fam fam,
                         double eps, double alpha, double beta) {
    int64_t out = d.m.shape[0], in = d.m.shape[1];
    Tensor r({in}, 0.0);
    for (int64_t j = 0; j < out; ++j) {
        double z = d.c[j];
        double zp = d.c[j] > 0.0 ? d.c[j] : 0.0;
        double zm = d.c[j] < 0.0 ? d.c[j] : 0.0;
        for (int64_t i = 0; i < in; ++i) {
            double c = xflat[i] * d.m.at2(j, i);
            z += c;
            (c > 0.0 ? zp : zm) += c;
        }
        for (int64_t i = 0; i < in; ++i) {
            double c = xflat[i] * d.m.at2(j, i);
            switch (fam) {
                case Fam::Abs:
                    if (c > 0.0) r[i] += c / (std::fabs(z) + eps) * rel[j];
                    break;
                case Fam::Eps:
                    r[i] += c / (z >= 0.0 ? z + eps : z - eps) * rel[j];
                    break;
                case Fam::AlphaBeta:
                    if (c > 0.0 && zp != 0.0) r[i] += alpha * c / zp * rel[j];
                    if (c < 0.0 && zm != 0.0) r[i] -= beta * c / zm * rel[j];
                    break;
                case Fam::Rap:
                    if (zp + std::fabs(zm) != 0.0) r[i] += c / (zp + std::fabs(zm)) * rel[j];
                    break;
            }
        }
    }
    return r;
}

void psi_oracle(Tensor& t) {
    double s = 0.0;
    int64_t n = 0;
    for (double v : t.data)
        if (v != 0.0) {
            s += v;
            ++n;
        }
    if (!n) return;
    for (double& v : t.data)
        if (v != 0.0) v -= s / static_cast<double>(n);
}

Model single_layer_model(LayerSpec l, std::vector<int64_t> input_shape, int64_t out_numel) {
    Model m;
    m.input_shape = std::move(input_shape);
    m.num_classes = out_numel;
    m.layers.push_back(std::move(l));
    return m;
}

void check_layer_against_dense(const LayerSpec& l, const std::vector<int64_t>& input_shape,
                               uint64_t seed) {
    Model m = single_layer_model(l, input_shape, 0);
    Rng rng(seed);
    Tensor x = random_tensor(input_shape, rng);
    Tape t = forward(m, x);
    Tensor rel = random_tensor(t.output().shape, rng);
    DenseAffine d = densify(m);
    Tensor xflat = x.reshaped({x.numel()});
    Tensor relflat = rel.reshaped({rel.numel()});

    Tensor abs_got = abslrp_layer(l, x, rel, 1e-9).reshaped({x.numel()});
    Tensor abs_want = dense_rule_oracle(d, xflat, relflat, Fam::Abs, 1e-9, 0, 0);
    CHECK(max_abs_diff(abs_got, abs_want) < 1e-10);

    Tensor eps_got = lrp_epsilon_layer(l, x, rel, 1e-6).reshaped({x.numel()});
    Tensor eps_want = dense_rule_oracle(d, xflat, relflat, Fam::Eps, 1e-6, 0, 0);
    CHECK(max_abs_diff(eps_got, eps_want) < 1e-10);

    for (double alpha : {1.0, 2.0}) {
        Tensor ab_got = lrp_alphabeta_layer(l, x, rel, alpha, alpha - 1.0).reshaped({x.numel()});
        Tensor ab_want =
            dense_rule_oracle(d, xflat, relflat, Fam::AlphaBeta, 0, alpha, alpha - 1.0);
        CHECK(max_abs_diff(ab_got, ab_want) < 1e-10);
    }

    Tensor rap_got = rap_layer(l, x, rel).reshaped({x.numel()});
    Tensor rap_want = dense_rule_oracle(d, xflat, relflat, Fam::Rap, 0, 0, 0);
    psi_oracle(rap_want);
    CHECK(max_abs_diff(rap_got, rap_want) < 1e-10);
}

}  // namespace

TEST_CASE("init relevance seeds") {
    Tensor plain = init_relevance(5, 2, false);
    CHECK(plain[2] == 1.0);
    CHECK(plain[0] == 0.0);
    Tensor con = init_relevance(5, 2, true);
    CHECK(con[2] == 1.0);
    CHECK(con[0] == doctest::Approx(-0.2));
    CHECK(con[4] == doctest::Approx(-0.2));
    CHECK_THROWS_AS(init_relevance(5, 5, false), UsageError);
    CHECK_THROWS_AS(init_relevance(5, -1, false), UsageError);
}

TEST_CASE("linear layer rules match the dense-affine oracle") {
    Rng wrng(900);
    check_layer_against_dense(linear_layer(7, 5, wrng), {7}, 1);
    check_layer_against_dense(linear_layer(12, 4, wrng), {12}, 2);
}

TEST_CASE("conv layer rules match the dense-affine oracle") {
    Rng wrng(901);
    check_layer_against_dense(conv2d_layer(2, 3, 3, 3, 1, 1, wrng), {2, 5, 5}, 3);
    check_layer_against_dense(conv2d_layer(1, 2, 3, 3, 2, 0, wrng), {1, 7, 7}, 4);
}

TEST_CASE("patch embed rules match the dense-affine oracle") {
    Rng wrng(902);
    check_layer_against_dense(patch_embed_layer(1, 4, 2, 2, 6, wrng), {1, 8, 8}, 5);
}

TEST_CASE("mean pool rules match the dense-affine oracle") {
    LayerSpec mp = plain_layer(LayerKind::MeanPool);
    check_layer_against_dense(mp, {5, 6}, 6);
}

TEST_CASE("token-matrix linear rules match the dense-affine oracle") {
    Rng wrng(903);
    check_layer_against_dense(linear_layer(6, 4, wrng), {3, 6}, 7);
}

TEST_CASE("explicit and transposed-map routes agree") {
    Rng rng(904);
    for (int trial = 0; trial < 20; ++trial) {
        int64_t in = 2 + rng.uniform_int(30);
        int64_t out = 1 + rng.uniform_int(20);
        Rng wrng(1000 + static_cast<uint64_t>(trial));
        LayerSpec l = linear_layer(in, out, wrng);
        Tensor x = random_tensor({in}, rng);
        Tensor rel = random_tensor({out}, rng);
        Tensor a = abslrp_layer(l, x, rel, 1e-9, AbsLrpRoute::Explicit);
        Tensor b = abslrp_layer(l, x, rel, 1e-9, AbsLrpRoute::Autodiff);
        CHECK(max_abs_diff(a, b) < 1e-11);
    }
}

TEST_CASE("alphabeta parameters outside the constraint are rejected") {
    Rng wrng(905);
    LayerSpec l = linear_layer(4, 3, wrng);
    Tensor x({4}, 0.5), rel({3}, 1.0);
    CHECK_THROWS_AS(lrp_alphabeta_layer(l, x, rel, 2.0, 0.5), UsageError);
    CHECK_THROWS_AS(lrp_alphabeta_layer(l, x, rel, 0.5, -0.5), UsageError);
    CHECK_NOTHROW(lrp_alphabeta_layer(l, x, rel, 2.0, 1.0));
}

TEST_CASE("epsilon rule stays finite when outputs cancel to zero") {
    // Hand-built layer with z exactly 0 for the only output.
    Tensor w({1, 2}, std::vector<double>{1.0, -1.0});
    Tensor b({1}, 0.0);
    LayerSpec l = linear_layer_from(w, b);
    Tensor x({2}, std::vector<double>{3.0, 3.0});
    for (double eps : {1e-9, 1e-6, 1e-3}) {
        Tensor r = lrp_epsilon_layer(l, x, Tensor({1}, 1.0), eps);
        CHECK(all_finite(r));
        CHECK(r[0] == doctest::Approx(3.0 / eps));
        CHECK(r[1] == doctest::Approx(-3.0 / eps));
    }
}

TEST_CASE("abslrp relevance is nonnegative under a one-hot seed") {
    Rng rng(906);
    std::vector<Model> models;
    models.push_back(make_mlp({6}, 3, 10, 51));
    models.push_back(make_cnn({1, 12, 12}, 4, 52));
    models.push_back(make_tiny_vit({1, 8, 8}, 3, 8, 2, 2, 4, 53));
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    for (const Model& m : models) {
        Tensor x = random_tensor(m.input_shape, rng);
        Tape t = forward(m, x);
        Tensor seed = init_relevance(m.num_classes, 0, false);
        RelevanceResult r = relevance_backward(t, seed, cfg);
        for (double v : r.input_rel.data) CHECK(v >= -1e-15);
    }
}

TEST_CASE("epsilon rule conserves relevance through bias-free stacks") {
    Rng wrng(907);
    Model m;
    m.input_shape = {24};
    m.num_classes = 5;
    auto biasless = [&](int64_t in, int64_t out) {
        LayerSpec l = linear_layer(in, out, wrng);
        for (double& v : l.param("bias").data) v = 0.0;
        return l;
    };
    m.layers.push_back(biasless(24, 30));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(biasless(30, 26));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(biasless(26, 5));

    Rng rng(908);
    MethodConfig cfg;
    cfg.method = Method::LrpEpsilon;
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_tensor({24}, rng);
        Tape t = forward(m, x);
        Tensor seed = init_relevance(5, rng.uniform_int(5), false);
        RelevanceResult r = relevance_backward(t, seed, cfg);
        CHECK(rel_diff(sum(r.input_rel), sum(seed)) < 1e-6);
    }
}

TEST_CASE("alphabeta conserves relevance through bias-free stacks") {
    // Holds when every active output has contributions of both signs; fan-in
    // 24+ makes single-signed sums vanishingly unlikely at these seeds.
    Rng wrng(909);
    Model m;
    m.input_shape = {24};
    m.num_classes = 4;
    auto biasless = [&](int64_t in, int64_t out) {
        LayerSpec l = linear_layer(in, out, wrng);
        for (double& v : l.param("bias").data) v = 0.0;
        return l;
    };
    m.layers.push_back(biasless(24, 28));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(biasless(28, 4));

    Rng rng(910);
    MethodConfig cfg;
    cfg.method = Method::LrpAlphaBeta;
    cfg.alpha = 2.0;
    cfg.beta = 1.0;
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_tensor({24}, rng);
        Tape t = forward(m, x);
        Tensor seed = init_relevance(4, rng.uniform_int(4), false);
        RelevanceResult r = relevance_backward(t, seed, cfg);
        CHECK(rel_diff(sum(r.input_rel), sum(seed)) < 1e-6);
    }
}

TEST_CASE("rap relevance sums to zero after the shift") {
    Rng rng(911);
    std::vector<Model> models;
    models.push_back(make_mlp({8}, 3, 12, 61));
    models.push_back(make_cnn({1, 12, 12}, 4, 62));
    MethodConfig cfg;
    cfg.method = Method::Rap;
    for (const Model& m : models) {
        Tensor x = random_tensor(m.input_shape, rng);
        Tape t = forward(m, x);
        RelevanceResult r = relevance_backward(t, init_relevance(m.num_classes, 1, false), cfg);
        double scl = std::max(1.0, l1_norm(r.input_rel));
        CHECK(std::fabs(sum(r.input_rel)) / scl < 1e-9);
    }
}

TEST_CASE("relevance is linear in the seed for redistribution families") {
    Rng rng(912);
    Model m = make_mlp({6}, 4, 10, 71);
    Tensor x = random_tensor({6}, rng);
    Tape t = forward(m, x);
    for (Method method : {Method::AbsLrp, Method::LrpEpsilon, Method::LrpAlphaBeta}) {
        MethodConfig cfg;
        cfg.method = method;
        if (method == Method::LrpAlphaBeta) {
            cfg.alpha = 2.0;
            cfg.beta = 1.0;
        }
        Tensor s1 = random_tensor({4}, rng);
        Tensor s2 = random_tensor({4}, rng);
        Tensor lhs = relevance_backward(t, add(scale(s1, 2.0), s2), cfg).input_rel;
        Tensor rhs = add(scale(relevance_backward(t, s1, cfg).input_rel, 2.0),
                         relevance_backward(t, s2, cfg).input_rel);
        CHECK(max_abs_diff(lhs, rhs) < 1e-9);
    }
}

TEST_CASE("maxpool routes relevance like the gradient, ties to lowest index") {
    Model m;
    m.input_shape = {1, 4, 4};
    m.num_classes = 4;
    m.layers.push_back(plain_layer(LayerKind::MaxPool2d));
    m.layers.push_back(plain_layer(LayerKind::Flatten));
    Tensor x({1, 4, 4}, 1.0);  // every window ties; lowest flat index wins
    Tape t = forward(m, x);
    MethodConfig cfg;
    cfg.method = Method::LrpEpsilon;
    Tensor seed({4}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
    RelevanceResult r = relevance_backward(t, seed, cfg);
    CHECK(r.input_rel.at3(0, 0, 0) == 1.0);
    CHECK(r.input_rel.at3(0, 0, 2) == 2.0);
    CHECK(r.input_rel.at3(0, 2, 0) == 3.0);
    CHECK(r.input_rel.at3(0, 2, 2) == 4.0);
    CHECK(sum(r.input_rel) == doctest::Approx(10.0));
}

TEST_CASE("residual split follows the shared-share rule") {
    Rng rng(913);
    Tensor a = random_tensor({10}, rng);
    for (double& v : a.data) v = (v < 0.0 ? -1.0 : 1.0) * (std::fabs(v) + 0.5);
    Tensor b = random_tensor({10}, rng);
    Model m;
    m.input_shape = {10};
    m.num_classes = 10;
    // Identity begin, then an affine branch y = x + b - a... instead drive the
    // split directly: begin holds the input, branch subtracts nothing. The
    // simplest observable is begin(x) + branch(x) with branch = diag scale.
    Tensor w({10, 10}, 0.0);
    for (int64_t i = 0; i < 10; ++i) w.at2(i, i) = 0.5;
    m.layers.push_back(plain_layer(LayerKind::ResidualBegin));
    m.layers.push_back(linear_layer_from(w, Tensor({10}, 0.0)));
    m.layers.push_back(plain_layer(LayerKind::ResidualEnd));

    Tape t = forward(m, a);
    MethodConfig cfg;
    cfg.method = Method::LrpEpsilon;
    cfg.epsilon = 1e-9;
    Tensor rel = abs(b);
    RelevanceResult r = relevance_backward(t, rel, cfg);
    // Branch carries 0.5x, skip carries x; both end up at the same input, so
    // totals per element survive (z = 1.5x, shares 1/3 and 2/3 recombine).
    for (int64_t i = 0; i < 10; ++i) CHECK(rel_diff(r.input_rel[i], rel[i]) < 1e-6);
}

TEST_CASE("attention relevance is additive across the value and qk branches") {
    // Exact on a standalone attention node: every relevance path runs through
    // the bilinear split, so gating one side removes exactly its share. In a
    // full network the residual skip bypasses the node and the sum of the two
    // ablated maps double-counts it.
    Rng rng(914);
    Rng wrng(918);
    Model m;
    m.input_shape = {5, 8};
    m.num_classes = 40;
    m.layers.push_back(self_attention_layer(8, 2, wrng));
    Tensor x = random_tensor({5, 8}, rng);
    Tape t = forward(m, x);
    Tensor seed = random_tensor({5, 8}, rng);
    for (Method method : {Method::AbsLrp, Method::LrpEpsilon}) {
        MethodConfig cfg;
        cfg.method = method;
        Tensor full = relevance_backward(t, seed, cfg).input_rel;
        cfg.ablation = Ablation::ValueOnly;
        Tensor vals = relevance_backward(t, seed, cfg).input_rel;
        cfg.ablation = Ablation::QkOnly;
        Tensor qk = relevance_backward(t, seed, cfg).input_rel;
        CHECK(max_abs_diff(full, add(vals, qk)) < 1e-9 * std::max(1.0, max_abs(full)));
        CHECK(max_abs(vals) > 0.0);
        CHECK(max_abs(qk) > 0.0);
    }
}

TEST_CASE("attention ablations change the map on a full network") {
    Rng rng(919);
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 1, 2, 4, 81);
    Tensor x = random_tensor({1, 8, 8}, rng);
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    AttributionMap full = attribute(vit, x, 1, cfg);
    cfg.ablation = Ablation::ValueOnly;
    AttributionMap vals = attribute(vit, x, 1, cfg);
    cfg.ablation = Ablation::QkOnly;
    AttributionMap qk = attribute(vit, x, 1, cfg);
    CHECK(max_abs_diff(full.values, vals.values) > 1e-6);
    CHECK(max_abs_diff(full.values, qk.values) > 1e-6);
    CHECK(max_abs_diff(vals.values, qk.values) > 1e-6);
}

TEST_CASE("abslrp softmax rule matches the unshifted formula on small scores") {
    Rng rng(915);
    Model m;
    m.input_shape = {6};
    m.num_classes = 6;
    m.layers.push_back(plain_layer(LayerKind::Softmax));
    Tensor x = random_tensor({6}, rng, 2.0);
    Tape t = forward(m, x);
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    Tensor rel = random_tensor({6}, rng);
    RelevanceResult r = relevance_backward(t, rel, cfg);
    double denom = 0.0;
    for (double v : x.data) denom += std::exp(v);
    double c = 1.0 / denom;
    for (int64_t i = 0; i < 6; ++i) {
        double h = std::exp(x[i]) * c;
        double sgn = x[i] >= 0.0 ? 1.0 : -1.0;
        double want = x[i] * 0.5 * (h + sgn * std::exp(std::fabs(x[i])) * c) / (h + 1e-9) * rel[i];
        CHECK(rel_diff(r.input_rel[i], want) < 1e-9);
    }
}

TEST_CASE("abslrp gelu rule matches the averaged-derivative formula") {
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    Model m;
    m.input_shape = {4};
    m.num_classes = 4;
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    Tensor x({4}, std::vector<double>{-2.0, -0.3, 0.4, 1.7});
    Tape t = forward(m, x);
    Tensor rel({4}, 1.0);
    RelevanceResult r = relevance_backward(t, rel, cfg);
    auto gelu = [](double v) {
        double u = 0.7978845608028653558798921198687 * (v + 0.044715 * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
    };
    auto dgelu = [](double v) {
        double kr = 0.7978845608028653558798921198687;
        double u = kr * (v + 0.044715 * v * v * v);
        double th = std::tanh(u);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kr * (1.0 + 3.0 * 0.044715 * v * v);
    };
    for (int64_t i = 0; i < 4; ++i) {
        double sgn = x[i] >= 0.0 ? 1.0 : -1.0;
        double want = x[i] * 0.5 * (dgelu(x[i]) + sgn * dgelu(std::fabs(x[i]))) /
                      (std::fabs(gelu(x[i])) + 1e-9);
        CHECK(rel_diff(r.input_rel[i], want) < 1e-12);
        // Negative inputs still earn nonnegative relevance under a positive
        // seed; both factors flip sign together.
        CHECK(r.input_rel[i] >= 0.0);
    }
}

TEST_CASE("contrastive variants force the contrastive seed") {
    Rng rng(916);
    Model m = make_mlp({6}, 4, 10, 91);
    Tensor x = random_tensor({6}, rng);

    MethodConfig crap;
    crap.method = Method::Crap;
    MethodConfig rap_con;
    rap_con.method = Method::Rap;
    rap_con.contrastive = true;
    CHECK(max_abs_diff(attribute(m, x, 2, crap).values, attribute(m, x, 2, rap_con).values) ==
          0.0);

    MethodConfig clrp;
    clrp.method = Method::Clrp;
    MethodConfig ab_con;
    ab_con.method = Method::LrpAlphaBeta;
    ab_con.alpha = 1.0;
    ab_con.beta = 0.0;
    ab_con.contrastive = true;
    CHECK(max_abs_diff(attribute(m, x, 2, clrp).values, attribute(m, x, 2, ab_con).values) == 0.0);
}

TEST_CASE("normalize_positive clamps and scales to unit max") {
    Tensor t({4}, std::vector<double>{-3.0, 0.0, 2.0, 8.0});
    Tensor n = normalize_positive(t);
    CHECK(n[0] == 0.0);
    CHECK(n[2] == doctest::Approx(0.25));
    CHECK(n[3] == 1.0);
    Tensor allneg({3}, std::vector<double>{-1.0, -2.0, 0.0});
    CHECK(max_abs(normalize_positive(allneg)) == 0.0);
}

TEST_CASE("method and ablation names round-trip") {
    for (Method m : {Method::AbsLrp, Method::LrpEpsilon, Method::LrpAlphaBeta, Method::Rap,
                     Method::Crap, Method::Clrp, Method::Saliency, Method::InputXGradient,
                     Method::Rollout, Method::Tibav, Method::Constant, Method::Random})
        CHECK(method_from_name(method_name(m)) == m);
    for (Ablation a :
         {Ablation::None, Ablation::PatchStop, Ablation::ValueOnly, Ablation::QkOnly})
        CHECK(ablation_from_name(ablation_name(a)) == a);
    CHECK_THROWS_AS(method_from_name("nope"), UsageError);
    CHECK_THROWS_AS(ablation_from_name("nope"), UsageError);
}

TEST_CASE("ablations are rejected where they make no sense") {
    Rng rng(917);
    Model mlp = make_mlp({6}, 3, 8, 95);
    Tensor x = random_tensor({6}, rng);
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    cfg.ablation = Ablation::ValueOnly;
    CHECK_THROWS_AS(attribute(mlp, x, 0, cfg), UsageError);
    cfg.ablation = Ablation::PatchStop;
    CHECK_THROWS_AS(attribute(mlp, x, 0, cfg), UsageError);
    cfg.method = Method::Saliency;
    cfg.ablation = Ablation::ValueOnly;
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 1, 2, 4, 96);
    CHECK_THROWS_AS(attribute(vit, random_tensor({1, 8, 8}, rng), 0, cfg), UsageError);
}

namespace {

// Independent restatement of the flow composition used by the attention-flow
// baselines: identity-added mixing matrices, optionally row-normalized,
// multiplied with the first block innermost, class-token row read out.
Tensor flow_oracle(const std::vector<Tensor>& mixed, bool renorm, int64_t tokens) {
    int64_t s = mixed.front().shape[0];
    Tensor flow({s, s}, 0.0);
    for (int64_t i = 0; i < s; ++i) flow.at2(i, i) = 1.0;
    for (const Tensor& mx : mixed) {
        Tensor a = mx;
        for (int64_t i = 0; i < s; ++i) a.at2(i, i) += 1.0;
        if (renorm)
            for (int64_t i = 0; i < s; ++i) {
                double row = 0.0;
                for (int64_t j = 0; j < s; ++j) row += a.at2(i, j);
                if (row != 0.0)
                    for (int64_t j = 0; j < s; ++j) a.at2(i, j) /= row;
            }
        flow = matmul(a, flow);
    }
    Tensor patches({tokens}, 0.0);
    for (int64_t j = 0; j < tokens; ++j) patches[j] = flow.at2(0, j + 1);
    return patches;
}

Tensor mean_heads(const Tensor& a) {
    int64_t h = a.shape[0], s = a.shape[1];
    Tensor out({s, s}, 0.0);
    for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) out.at2(i, j) += a.at3(hi, i, j) / h;
    return out;
}

}  // namespace

TEST_CASE("rollout equals the explicit product of attention flow matrices") {
    Rng rng(920);
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 2, 2, 4, 83);
    Tensor x = random_tensor({1, 8, 8}, rng);
    Tape t = forward(vit, x);

    std::vector<Tensor> mixed;
    for (const auto& node : t.nodes)
        if (t.spec(node).kind == LayerKind::SelfAttention)
            mixed.push_back(mean_heads(node.attn->attn));
    REQUIRE(mixed.size() == 2);

    for (bool renorm : {true, false}) {
        MethodConfig cfg;
        cfg.method = Method::Rollout;
        cfg.renormalize_flow = renorm;
        AttributionMap got = rollout(t, cfg);
        Tensor patches = flow_oracle(mixed, renorm, 4);
        for (int64_t py = 0; py < 2; ++py)
            for (int64_t px = 0; px < 2; ++px)
                for (int64_t y = 0; y < 4; ++y)
                    for (int64_t xx = 0; xx < 4; ++xx)
                        CHECK(got.values.at3(0, py * 4 + y, px * 4 + xx) ==
                              doctest::Approx(patches[py * 2 + px]).epsilon(1e-12));
    }
    MethodConfig cfg;
    cfg.method = Method::Rollout;
    Model mlp = make_mlp({6}, 3, 8, 84);
    Tape tm = forward(mlp, random_tensor({6}, rng));
    CHECK_THROWS_AS(rollout(tm, cfg), UsageError);
}

TEST_CASE("tibav composes gradient-weighted relevance through the same flow") {
    Rng rng(921);
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 2, 2, 4, 85);
    Tensor x = random_tensor({1, 8, 8}, rng);
    Tape t = forward(vit, x);
    int64_t target = 2;

    Tensor seed = init_relevance(3, target, false);
    GradResult gr = grad_full(t, seed, false, true);
    MethodConfig lcfg;
    lcfg.method = Method::LrpEpsilon;
    RelevanceResult rr = relevance_backward(t, seed, lcfg, true);
    REQUIRE(gr.attn_grads.size() == 2);
    REQUIRE(rr.attn_rel.size() == 2);

    std::vector<Tensor> mixed;
    for (size_t b = 0; b < 2; ++b)
        mixed.push_back(mean_heads(pos_part(mul(gr.attn_grads[b], rr.attn_rel[b]))));
    Tensor patches = flow_oracle(mixed, true, 4);

    MethodConfig cfg;
    cfg.method = Method::Tibav;
    AttributionMap got = tibav(t, target, cfg);
    CHECK(got.target == target);
    for (int64_t py = 0; py < 2; ++py)
        for (int64_t px = 0; px < 2; ++px)
            CHECK(got.values.at3(0, py * 4, px * 4) ==
                  doctest::Approx(patches[py * 2 + px]).epsilon(1e-12));
}

TEST_CASE("patch-stop attribution is constant within each patch cell") {
    Rng rng(922);
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 1, 2, 4, 86);
    Tensor x = random_tensor({1, 8, 8}, rng);
    MethodConfig cfg;
    cfg.method = Method::AbsLrp;
    cfg.ablation = Ablation::PatchStop;
    AttributionMap got = attribute(vit, x, 0, cfg);

    Tape t = forward(vit, x);
    RelevanceResult rr = relevance_backward(t, init_relevance(3, 0, false), cfg);
    REQUIRE(rr.token_rel.has_value());
    REQUIRE(rr.token_rel->shape[0] == 4);
    CHECK(max_abs(rr.input_rel) == 0.0);

    for (int64_t py = 0; py < 2; ++py)
        for (int64_t px = 0; px < 2; ++px) {
            double want = 0.0;
            for (int64_t e = 0; e < 8; ++e) want += rr.token_rel->at2(py * 2 + px, e);
            for (int64_t y = 0; y < 4; ++y)
                for (int64_t xx = 0; xx < 4; ++xx)
                    CHECK(got.values.at3(0, py * 4 + y, px * 4 + xx) == doctest::Approx(want));
        }
}
