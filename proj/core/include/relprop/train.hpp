#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relprop/dataset.hpp"
#include "relprop/model.hpp"

namespace relprop {

struct TrainOptions {
    int64_t epochs = 10;
    double lr = 0.05;
    uint64_t seed = 0;
    // Global gradient-norm ceiling applied per step; 0 disables clipping.
    double clip = 5.0;
    // Classical momentum on the clipped gradient; 0 is plain SGD.
    double momentum = 0.0;
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean cross-entropy per epoch
    double eval_accuracy = 0.0;      // on the eval split (train split if empty)
};

// Fraction of examples whose top-scoring class matches the label.
double accuracy(const Model& m, const std::vector<Example>& examples);

// Plain SGD on softmax cross-entropy, one example per step, examples
// reshuffled each epoch from a seed derived from (opt.seed, epoch).  The
// whole run is a pure function of the model, data and options.  BatchNorm
// running statistics are treated as buffers and never updated.  A non-finite
// loss aborts with NumericError naming the epoch.
TrainResult train_model(Model& m, const Dataset& data, const TrainOptions& opt);

// Builds one of the reference architectures ("mlp", "cnn", "tiny-vit") sized
// from the dataset, trains it, and enforces the accuracy floor the test
// fixtures rely on (0.99 / 0.90 / 0.80 respectively).  Throws NumericError if
// training lands below the floor.
Model train_fixture(const std::string& arch, const Dataset& data, const TrainOptions& opt);

}  // namespace relprop
