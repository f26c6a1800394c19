#include "relprop/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "relprop/error.hpp"
#include "relprop/tape.hpp"

namespace relprop {
namespace {

// BatchNorm running statistics are inference buffers, not weights.
bool trainable(const LayerSpec& l, const std::string& param_name) {
    if (l.kind == LayerKind::BatchNorm)
        return param_name != "running_mean" && param_name != "running_var";
    return true;
}

}  // namespace

double accuracy(const Model& m, const std::vector<Example>& examples) {
    if (examples.empty()) throw UsageError("accuracy of an empty example list is undefined");
    int64_t hits = 0;
    for (const auto& ex : examples) {
        Tape t = forward(m, ex.image);
        if (argmax(t.output()) == ex.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

TrainResult train_model(Model& m, const Dataset& data, const TrainOptions& opt) {
    if (opt.epochs < 1) throw UsageError("epoch count must be positive");
    if (!(opt.lr > 0.0)) throw UsageError("learning rate must be positive");
    if (opt.momentum < 0.0 || opt.momentum >= 1.0)
        throw UsageError("momentum must lie in [0, 1)");
    if (data.train.empty()) throw UsageError("training split is empty");
    const int64_t classes = m.num_classes;
    for (const auto& ex : data.train)
        if (ex.label < 0 || ex.label >= classes)
            throw UsageError("training label outside the model's class range");

    TrainResult res;
    std::vector<size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    std::vector<std::vector<Tensor>> velocity(m.layers.size());
    if (opt.momentum > 0.0) {
        for (size_t li = 0; li < m.layers.size(); ++li)
            for (const auto& p : m.layers[li].params)
                velocity[li].push_back(Tensor(p.value.shape, 0.0));
    }

    for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng rng(derive_seed(opt.seed, static_cast<uint64_t>(epoch)));
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (size_t pos : order) {
            const Example& ex = data.train[pos];
            Tape tape = forward(m, ex.image);
            const Tensor& logits = tape.output();

            // Softmax with the usual max shift; seed is dL/dlogits.
            double top = logits.data[0];
            for (int64_t i = 1; i < classes; ++i) top = std::max(top, logits.data[i]);
            Tensor p(logits.shape);
            double z = 0.0;
            for (int64_t i = 0; i < classes; ++i) {
                p.data[i] = std::exp(logits.data[i] - top);
                z += p.data[i];
            }
            for (int64_t i = 0; i < classes; ++i) p.data[i] /= z;
            loss_sum += -std::log(std::max(p.data[ex.label], 1e-300));

            Tensor seed = p;
            seed.data[ex.label] -= 1.0;
            GradResult gr = grad_full(tape, seed, true, false);

            if (opt.clip > 0.0) {
                double sq = 0.0;
                for (const auto& lg : gr.param_grads)
                    for (const auto& g : lg)
                        for (int64_t i = 0; i < g.numel(); ++i) sq += g.data[i] * g.data[i];
                const double norm = std::sqrt(sq);
                if (norm > opt.clip) {
                    const double scale = opt.clip / norm;
                    for (auto& lg : gr.param_grads)
                        for (auto& g : lg)
                            for (int64_t i = 0; i < g.numel(); ++i) g.data[i] *= scale;
                }
            }

            for (size_t li = 0; li < m.layers.size(); ++li) {
                LayerSpec& l = m.layers[li];
                for (size_t pi = 0; pi < l.params.size(); ++pi) {
                    if (!trainable(l, l.params[pi].name)) continue;
                    Tensor& w = l.params[pi].value;
                    Tensor& g = gr.param_grads[li][pi];
                    if (opt.momentum > 0.0) {
                        Tensor& v = velocity[li][pi];
                        for (int64_t i = 0; i < w.numel(); ++i) {
                            v.data[i] = opt.momentum * v.data[i] + g.data[i];
                            w.data[i] -= opt.lr * v.data[i];
                        }
                    } else {
                        for (int64_t i = 0; i < w.numel(); ++i) w.data[i] -= opt.lr * g.data[i];
                    }
                }
            }
        }

        const double mean_loss = loss_sum / static_cast<double>(order.size());
        if (!std::isfinite(mean_loss))
            throw NumericError("training diverged at epoch " + std::to_string(epoch));
        res.epoch_loss.push_back(mean_loss);
    }

    res.eval_accuracy = accuracy(m, data.eval.empty() ? data.train : data.eval);
    return res;
}

Model train_fixture(const std::string& arch, const Dataset& data, const TrainOptions& opt) {
    if (data.train.empty()) throw UsageError("training split is empty");
    const std::vector<int64_t>& shape = data.train.front().image.shape;
    const int64_t classes = static_cast<int64_t>(data.classes.size());
    const uint64_t init_seed = derive_seed(opt.seed, 0x6d6f64656cULL);

    Model m;
    double floor;
    if (arch == "mlp") {
        m = make_mlp(shape, classes, 32, init_seed);
        floor = 0.99;
    } else if (arch == "cnn") {
        m = make_cnn(shape, classes, init_seed);
        floor = 0.90;
    } else if (arch == "tiny-vit") {
        m = make_tiny_vit(shape, classes, 24, 2, 2, 4, init_seed);
        floor = 0.80;
    } else {
        throw UsageError("unknown architecture '" + arch + "' (want mlp, cnn or tiny-vit)");
    }

    TrainResult res = train_model(m, data, opt);
    if (res.eval_accuracy < floor)
        throw NumericError("fixture '" + arch + "' reached accuracy " +
                           std::to_string(res.eval_accuracy) + ", below the required " +
                           std::to_string(floor));
    return m;
}

}  // namespace relprop
