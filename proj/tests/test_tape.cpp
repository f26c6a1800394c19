#include <cmath>
#include <limits>

#include "doctest.h"
#include "relprop/error.hpp"
#include "relprop/model.hpp"
#include "relprop/rng.hpp"
#include "relprop/tape.hpp"
#include "test_util.hpp"

using namespace relprop;
using testutil::max_abs_diff;
using testutil::max_rel_diff;
using testutil::random_tensor;

namespace {

double phi(const Model& m, const Tensor& x, const Tensor& seed) {
    Tape t = forward(m, x);
    double acc = 0.0;
    for (int64_t i = 0; i < seed.numel(); ++i) acc += seed[i] * t.output()[i];
    return acc;
}

// Central differences through the full forward pass.
Tensor fd_input_grad(const Model& m, const Tensor& x, const Tensor& seed, double h) {
    Tensor g = zeros_like(x);
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (phi(m, xp, seed) - phi(m, xm, seed)) / (2.0 * h);
    }
    return g;
}

void check_input_grad(const Model& m, const Tensor& x, const Tensor& seed, double tol) {
    Tape t = forward(m, x);
    Tensor an = grad(t, seed);
    Tensor fd = fd_input_grad(m, x, seed, 1e-5);
    CHECK(max_rel_diff(an, fd) < tol);
}

void check_param_grads(Model m, const Tensor& x, const Tensor& seed, double tol) {
    Tape t = forward(m, x);
    GradResult res = grad_full(t, seed, true, false);
    for (size_t li = 0; li < m.layers.size(); ++li)
        for (size_t pi = 0; pi < m.layers[li].params.size(); ++pi) {
            Tensor& p = m.layers[li].params[pi].value;
            // Probe a handful of entries per parameter to keep runtime sane.
            int64_t step = std::max<int64_t>(1, p.numel() / 7);
            for (int64_t i = 0; i < p.numel(); i += step) {
                double keep = p[i];
                p[i] = keep + 1e-5;
                double up = phi(m, x, seed);
                p[i] = keep - 1e-5;
                double down = phi(m, x, seed);
                p[i] = keep;
                double fd = (up - down) / 2e-5;
                CHECK(testutil::rel_diff(res.param_grads[li][pi][i], fd) < tol);
            }
        }
}

Model gelu_mlp(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {6};
    m.num_classes = 4;
    m.layers.push_back(linear_layer(6, 8, rng));
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    m.layers.push_back(linear_layer(8, 4, rng));
    return m;
}

Model gelu_convnet(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {2, 7, 7};
    m.num_classes = 3;
    m.layers.push_back(conv2d_layer(2, 3, 3, 3, 1, 1, rng));
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    m.layers.push_back(conv2d_layer(3, 2, 3, 3, 2, 0, rng));
    m.layers.push_back(plain_layer(LayerKind::Flatten));
    m.layers.push_back(linear_layer(18, 3, rng));
    return m;
}

Model norm_softmax_net(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {5};
    m.num_classes = 3;
    m.layers.push_back(linear_layer(5, 6, rng));
    m.layers.push_back(layernorm_layer(6, &rng));
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    m.layers.push_back(linear_layer(6, 3, rng));
    m.layers.push_back(plain_layer(LayerKind::Softmax));
    return m;
}

Model batchnorm_net(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {2, 4, 4};
    m.num_classes = 2;
    m.layers.push_back(conv2d_layer(2, 3, 3, 3, 1, 1, rng));
    Tensor gamma = random_tensor({3}, rng);
    Tensor beta = random_tensor({3}, rng);
    Tensor mean = random_tensor({3}, rng, 0.3);
    Tensor var({3}, 0.0);
    for (int64_t i = 0; i < 3; ++i) var[i] = 0.5 + rng.uniform();
    m.layers.push_back(batchnorm_layer(gamma, beta, mean, var));
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    m.layers.push_back(plain_layer(LayerKind::Flatten));
    m.layers.push_back(linear_layer(48, 2, rng));
    return m;
}

Model residual_net(uint64_t seed) {
    Rng rng(seed);
    Model m;
    m.input_shape = {6};
    m.num_classes = 2;
    m.layers.push_back(linear_layer(6, 6, rng));
    m.layers.push_back(plain_layer(LayerKind::ResidualBegin));
    m.layers.push_back(linear_layer(6, 6, rng));
    m.layers.push_back(plain_layer(LayerKind::Gelu));
    m.layers.push_back(plain_layer(LayerKind::ResidualEnd));
    m.layers.push_back(linear_layer(6, 2, rng));
    return m;
}

}  // namespace

TEST_CASE("input gradients match finite differences on smooth nets") {
    Rng rng(101);
    for (uint64_t s : {1ull, 2ull}) {
        Model m = gelu_mlp(s);
        check_input_grad(m, random_tensor({6}, rng), random_tensor({4}, rng), 1e-6);
    }
    Model conv = gelu_convnet(3);
    check_input_grad(conv, random_tensor({2, 7, 7}, rng), random_tensor({3}, rng), 1e-6);
    Model norm = norm_softmax_net(4);
    check_input_grad(norm, random_tensor({5}, rng), random_tensor({3}, rng), 1e-6);
    Model bn = batchnorm_net(5);
    check_input_grad(bn, random_tensor({2, 4, 4}, rng), random_tensor({2}, rng), 1e-6);
    Model res = residual_net(6);
    check_input_grad(res, random_tensor({6}, rng), random_tensor({2}, rng), 1e-6);
}

TEST_CASE("input gradients match finite differences on a tiny transformer") {
    Rng rng(202);
    Model vit = make_tiny_vit({1, 8, 8}, 4, 8, 2, 2, 4, 77);
    check_input_grad(vit, random_tensor({1, 8, 8}, rng), random_tensor({4}, rng), 1e-5);
}

TEST_CASE("relu gradients match finite differences away from the kink") {
    Rng rng(303);
    Rng wrng(7);
    Model m;
    m.input_shape = {6};
    m.num_classes = 3;
    m.layers.push_back(linear_layer(6, 10, wrng));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(linear_layer(10, 3, wrng));

    Tensor x = random_tensor({6}, rng);
    for (int attempt = 0; attempt < 100; ++attempt) {
        Tape t = forward(m, x);
        double margin = 1e9;
        for (double v : t.nodes[0].output.data) margin = std::min(margin, std::fabs(v));
        if (margin > 0.05) break;
        x = random_tensor({6}, rng);
    }
    check_input_grad(m, x, random_tensor({3}, rng), 1e-6);
}

TEST_CASE("maxpool gradient routes to the window argmax") {
    Model m;
    m.input_shape = {2, 4, 4};
    m.num_classes = 8;
    m.layers.push_back(plain_layer(LayerKind::MaxPool2d));
    m.layers.push_back(plain_layer(LayerKind::Flatten));

    Rng rng(404);
    Tensor x = random_tensor({2, 4, 4}, rng);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] += static_cast<double>(i) * 1e-4;
    Tensor seed = random_tensor({8}, rng);
    Tape t = forward(m, x);
    Tensor g = grad(t, seed);

    double total_in = 0.0, total_seed = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) total_in += g[i];
    for (int64_t i = 0; i < seed.numel(); ++i) total_seed += seed[i];
    CHECK(total_in == doctest::Approx(total_seed));
    // Every window pushes its seed entry onto exactly one input position.
    int64_t nonzero = 0;
    for (double v : g.data)
        if (v != 0.0) ++nonzero;
    CHECK(nonzero == 8);
}

TEST_CASE("parameter gradients match finite differences") {
    Rng rng(505);
    check_param_grads(gelu_mlp(11), random_tensor({6}, rng), random_tensor({4}, rng), 1e-5);
    check_param_grads(norm_softmax_net(12), random_tensor({5}, rng), random_tensor({3}, rng),
                      1e-5);
    check_param_grads(gelu_convnet(13), random_tensor({2, 7, 7}, rng), random_tensor({3}, rng),
                      1e-5);
    Model vit = make_tiny_vit({1, 8, 8}, 3, 8, 1, 2, 4, 14);
    check_param_grads(vit, random_tensor({1, 8, 8}, rng), random_tensor({3}, rng), 1e-4);
}

TEST_CASE("attention gradients treat the post-softmax tensor as an input") {
    Rng wrng(606);
    Model m;
    m.input_shape = {3, 4};
    m.num_classes = 12;
    m.layers.push_back(self_attention_layer(4, 2, wrng));
    m.layers.push_back(plain_layer(LayerKind::Flatten));

    Rng rng(607);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor seed = random_tensor({12}, rng);
    Tape t = forward(m, x);
    GradResult res = grad_full(t, seed, false, true);
    REQUIRE(res.attn_grads.size() == 1);

    const AttnState& st = *t.nodes[0].attn;
    const LayerSpec& l = m.layers[0];
    int64_t s = 3, e = 4, nh = 2, dh = 2;
    // phi as a function of the attention weights alone, all else frozen.
    auto phi_attn = [&](const Tensor& a) {
        Tensor merged({s, e}, 0.0);
        for (int64_t h = 0; h < nh; ++h)
            for (int64_t i = 0; i < s; ++i)
                for (int64_t d = 0; d < dh; ++d) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < s; ++j)
                        acc += a.at3(h, i, j) * st.v.at2(j, h * dh + d);
                    merged.at2(i, h * dh + d) = acc;
                }
        const Tensor& wo = l.param("wo");
        const Tensor& bo = l.param("bo");
        double out = 0.0;
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < e; ++j) {
                double acc = bo[j];
                for (int64_t kk = 0; kk < e; ++kk) acc += merged.at2(i, kk) * wo.at2(j, kk);
                out += seed[i * e + j] * acc;
            }
        return out;
    };
    for (int64_t i = 0; i < res.attn_grads[0].numel(); ++i) {
        Tensor ap = st.attn, am = st.attn;
        ap[i] += 1e-6;
        am[i] -= 1e-6;
        double fd = (phi_attn(ap) - phi_attn(am)) / 2e-6;
        CHECK(testutil::rel_diff(res.attn_grads[0][i], fd) < 1e-6);
    }
}

TEST_CASE("abs forward dominates the real forward at every node") {
    Rng rng(707);
    std::vector<Model> models;
    models.push_back(make_mlp({6}, 3, 12, 21));
    models.push_back(make_cnn({1, 12, 12}, 4, 22));
    models.push_back(make_tiny_vit({1, 8, 8}, 3, 8, 1, 2, 4, 23));
    models.push_back(batchnorm_net(24));
    models.push_back(norm_softmax_net(25));
    for (const Model& m : models) {
        Tensor x = random_tensor(m.input_shape, rng);
        Tape real = forward(m, x);
        Tape dom = abs_forward(m, x);
        for (size_t ni = 0; ni < real.nodes.size(); ++ni)
            for (int64_t i = 0; i < real.nodes[ni].output.numel(); ++i)
                CHECK(dom.nodes[ni].output[i] >=
                      std::fabs(real.nodes[ni].output[i]) - 1e-9);
    }
}

TEST_CASE("abs forward reports overflow on deep attention stacks") {
    // Absolute-value activations feed the next block's exponentials, which
    // grow past double range after two attention blocks. That must surface
    // as an error, not silent garbage.
    Model deep = make_tiny_vit({1, 8, 8}, 3, 8, 2, 2, 4, 23);
    Rng rng(717);
    Tensor x = random_tensor({1, 8, 8}, rng);
    CHECK_NOTHROW(forward(deep, x));
    CHECK_THROWS_AS(abs_forward(deep, x), NumericError);
}

TEST_CASE("forward is deterministic") {
    Rng rng(808);
    Model m = make_cnn({1, 12, 12}, 4, 31);
    Tensor x = random_tensor({1, 12, 12}, rng);
    Tape a = forward(m, x);
    Tape b = forward(m, x);
    CHECK(max_abs_diff(a.output(), b.output()) == 0.0);
}

TEST_CASE("shape and finiteness violations raise NumericError") {
    Model m = gelu_mlp(41);
    CHECK_THROWS_AS(forward(m, Tensor({5}, 1.0)), NumericError);
    Tensor bad({6}, 1.0);
    bad[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(forward(m, bad), NumericError);
    Tape t = forward(m, Tensor({6}, 0.5));
    CHECK_THROWS_AS(grad(t, Tensor({5}, 1.0)), NumericError);
}
