#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <doctest.h>

#include "relprop/dataset.hpp"
#include "relprop/error.hpp"
#include "relprop/serialize.hpp"
#include "relprop/tape.hpp"
#include "relprop/train.hpp"
#include "test_util.hpp"

using namespace relprop;
using namespace relprop::testutil;

namespace {

bool params_identical(const Model& a, const Model& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (size_t i = 0; i < a.layers.size(); ++i) {
        for (size_t p = 0; p < a.layers[i].params.size(); ++p) {
            const Tensor& ta = a.layers[i].params[p].value;
            const Tensor& tb = b.layers[i].params[p].value;
            if (ta.shape != tb.shape) return false;
            if (std::memcmp(ta.data.data(), tb.data.data(), ta.data.size() * 8) != 0)
                return false;
        }
    }
    return true;
}

// Six trivially separable (1,4,4) images: class 0 lights the top rows,
// class 1 the bottom rows.
Dataset half_field_dataset() {
    Dataset d;
    d.classes = {"top", "bottom"};
    for (int i = 0; i < 3; ++i) {
        Tensor t0({1, 4, 4}, 0.0);
        Tensor t1({1, 4, 4}, 0.0);
        for (int64_t y = 0; y < 2; ++y)
            for (int64_t x = 0; x < 4; ++x) {
                t0.at3(0, y, x) = 0.8 + 0.05 * i;
                t1.at3(0, 3 - y, x) = 0.8 + 0.05 * i;
            }
        d.train.push_back({t0, 0});
        d.train.push_back({t1, 1});
    }
    d.eval = d.train;
    return d;
}

}  // namespace

TEST_CASE("mlp fixture trains to its floor on blobs") {
    Dataset blobs = make_blob_dataset(2, 60, 8, 11);
    TrainOptions opt;
    opt.epochs = 10;
    opt.lr = 0.05;
    opt.seed = 3;
    Model m = train_fixture("mlp", blobs, opt);  // throws below 0.99
    CHECK(accuracy(m, blobs.eval) >= 0.99);
    CHECK(accuracy(m, blobs.train) >= 0.99);
}

TEST_CASE("training is a pure function of model, data and options") {
    Dataset blobs = make_blob_dataset(2, 30, 6, 17);
    TrainOptions opt;
    opt.epochs = 4;
    opt.lr = 0.05;
    opt.seed = 9;
    opt.momentum = 0.9;

    Model a = make_mlp({6}, 2, 16, 5);
    Model b = make_mlp({6}, 2, 16, 5);
    TrainResult ra = train_model(a, blobs, opt);
    TrainResult rb = train_model(b, blobs, opt);
    CHECK(params_identical(a, b));
    REQUIRE(ra.epoch_loss.size() == rb.epoch_loss.size());
    for (size_t i = 0; i < ra.epoch_loss.size(); ++i)
        CHECK(ra.epoch_loss[i] == rb.epoch_loss[i]);
    CHECK(ra.eval_accuracy == rb.eval_accuracy);

    // A different shuffle seed must actually change the trajectory.
    Model c = make_mlp({6}, 2, 16, 5);
    TrainOptions opt2 = opt;
    opt2.seed = 10;
    train_model(c, blobs, opt2);
    CHECK(!params_identical(a, c));
}

TEST_CASE("loss decreases and ends small on separable data") {
    Dataset blobs = make_blob_dataset(2, 40, 8, 23);
    Model m = make_mlp({8}, 2, 16, 31);
    TrainOptions opt;
    opt.epochs = 8;
    opt.lr = 0.05;
    opt.seed = 1;
    TrainResult r = train_model(m, blobs, opt);
    REQUIRE(r.epoch_loss.size() == 8);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
    CHECK(r.epoch_loss.back() < 0.1);
}

TEST_CASE("a tight gradient clip bounds total parameter movement") {
    Dataset blobs = make_blob_dataset(2, 20, 6, 2);
    Model m = make_mlp({6}, 2, 8, 4);
    Model before = m;
    TrainOptions opt;
    opt.epochs = 1;
    opt.lr = 0.05;
    opt.seed = 0;
    opt.clip = 1e-6;
    train_model(m, blobs, opt);
    // Each step moves parameters by at most lr*clip in norm.
    const double bound = double(blobs.train.size()) * opt.lr * opt.clip * 1.0001;
    for (size_t li = 0; li < m.layers.size(); ++li)
        for (size_t p = 0; p < m.layers[li].params.size(); ++p)
            CHECK(max_abs_diff(m.layers[li].params[p].value,
                               before.layers[li].params[p].value) <= bound);
}

TEST_CASE("batchnorm running statistics stay frozen while affine params move") {
    Dataset d = half_field_dataset();
    Rng rng(6);
    Model m;
    m.input_shape = {1, 4, 4};
    m.num_classes = 2;
    m.layers.push_back(conv2d_layer(1, 2, 3, 3, 1, 1, rng));
    Tensor ones({2}, 1.0);
    Tensor zeros({2}, 0.0);
    Tensor var({2}, {1.5, 0.75});
    m.layers.push_back(batchnorm_layer(ones, zeros, zeros, var));
    m.layers.push_back(plain_layer(LayerKind::Relu));
    m.layers.push_back(plain_layer(LayerKind::Flatten));
    m.layers.push_back(linear_layer(2 * 4 * 4, 2, rng));
    validate_model(m);

    Model before = m;
    TrainOptions opt;
    opt.epochs = 3;
    opt.lr = 0.05;
    opt.seed = 2;
    train_model(m, d, opt);

    const LayerSpec& bn = m.layers[1];
    const LayerSpec& bn0 = before.layers[1];
    CHECK(max_abs_diff(bn.param("running_mean"), bn0.param("running_mean")) == 0.0);
    CHECK(max_abs_diff(bn.param("running_var"), bn0.param("running_var")) == 0.0);
    CHECK(max_abs_diff(bn.param("gamma"), bn0.param("gamma")) > 0.0);
    CHECK(max_abs_diff(m.layers[4].param("weight"), before.layers[4].param("weight")) > 0.0);
}

TEST_CASE("invalid training setups are rejected") {
    Dataset blobs = make_blob_dataset(2, 10, 6, 3);
    Model m = make_mlp({6}, 2, 8, 1);
    TrainOptions opt;

    TrainOptions bad = opt;
    bad.epochs = 0;
    CHECK_THROWS_AS(train_model(m, blobs, bad), UsageError);
    bad = opt;
    bad.lr = 0.0;
    CHECK_THROWS_AS(train_model(m, blobs, bad), UsageError);
    bad = opt;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(train_model(m, blobs, bad), UsageError);

    Dataset empty;
    CHECK_THROWS_AS(train_model(m, empty, opt), UsageError);

    Dataset wrong = blobs;
    wrong.train[0].label = 7;
    CHECK_THROWS_AS(train_model(m, wrong, opt), UsageError);

    CHECK_THROWS_AS(train_fixture("resnet", blobs, opt), UsageError);
    CHECK_THROWS_AS(accuracy(m, {}), UsageError);
}

TEST_CASE("an exploding run aborts with a numeric error") {
    Dataset blobs = make_blob_dataset(2, 10, 6, 3);
    Model m = make_mlp({6}, 2, 8, 1);
    TrainOptions opt;
    opt.epochs = 50;
    opt.lr = 1e18;
    opt.clip = 0.0;  // disable the safety net so the explosion is observable
    CHECK_THROWS_AS(train_model(m, blobs, opt), NumericError);
}

TEST_CASE("cnn fixture reaches its floor on stroke digits") {
    Dataset strokes = make_stroke_dataset(20, 5);
    TrainOptions opt;
    opt.epochs = 10;
    opt.lr = 0.05;
    opt.seed = 3;
    Model m = train_fixture("cnn", strokes, opt);  // throws below 0.90
    const double acc = accuracy(m, strokes.eval);
    CHECK(acc >= 0.90);

    // Serialization preserves behaviour, not just bits: the reloaded model
    // scores every example identically.
    namespace fs = std::filesystem;
    const std::string path =
        (fs::temp_directory_path() / ("relprop_train_" + std::to_string(::getpid()) + ".rpm"))
            .string();
    save_model(m, path);
    Model back = load_model(path);
    fs::remove(path);
    for (size_t i = 0; i < 5; ++i) {
        Tape ta = forward(m, strokes.eval[i].image);
        Tape tb = forward(back, strokes.eval[i].image);
        CHECK(max_abs_diff(ta.output(), tb.output()) == 0.0);
    }
}

TEST_CASE("tiny vit fixture reaches its floor on stroke digits") {
    Dataset strokes = make_stroke_dataset(60, 5);
    TrainOptions opt;
    opt.epochs = 20;
    opt.lr = 0.05;
    opt.seed = 3;
    Model m = train_fixture("tiny-vit", strokes, opt);  // throws below 0.80
    CHECK(accuracy(m, strokes.eval) >= 0.80);
}
