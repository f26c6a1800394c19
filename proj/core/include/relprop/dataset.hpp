#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relprop/rng.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

struct Example {
    Tensor image;
    int64_t label = 0;
};

// A labelled dataset with a train/eval split.  classes[i] names label i.
// skipped counts files that were present but could not be used.
struct Dataset {
    std::vector<Example> train;
    std::vector<Example> eval;
    std::vector<std::string> classes;
    int64_t skipped = 0;
};

// Loads a directory of images laid out as one subdirectory per class.
// Subdirectory names in lexicographic order define the label indices; files
// within a class are visited in lexicographic order too.  Only binary PGM and
// PPM files are accepted; files that fail to decode or whose shape disagrees
// with the first accepted image (or expected_shape, when given) are skipped
// and counted.
//
// A manifest.json at the root may pin the split:
//   {"split": {"train": ["3/0001.pgm", ...], "eval": [...]}}
// Paths are relative to the dataset root.  Listed files go to their split and
// everything else is ignored.  Without a manifest every fifth file of each
// class (the 5th, 10th, ...) is held out for eval.
Dataset load_dataset(const std::string& dir,
                     const std::vector<int64_t>& expected_shape = {});

// Writes a Dataset in the layout load_dataset reads, including a
// manifest.json pinning the split.  Only image (rank-3) examples can be
// written.
void save_dataset(const Dataset& d, const std::string& dir);

// Gaussian point clouds, one cluster per class, centred at 3*e_c with unit
// basis vector e_c; examples are rank-1 tensors of length dim (dim must be at
// least the class count).  Linearly separable with a wide margin, so a small
// MLP trains to near-perfect accuracy.
Dataset make_blob_dataset(int64_t classes, int64_t per_class, int64_t dim,
                          uint64_t seed);

// Rendering knobs for the stroke digits.  The defaults give the easy,
// high-contrast variant.  half_scale_fraction > 0 renders that share of
// examples at half size in a random quadrant (the same reduction the
// evaluation mosaics use), which makes quadrant-sized digits part of the
// training distribution.
struct StrokeOptions {
    double noise = 0.10;     // background uniform noise amplitude
    double fg_min = 0.70;    // lower bound of the stroke intensity
    double half_scale_fraction = 0.0;
};

// Ten-class 28x28 grayscale digits drawn as seven-segment glyphs with
// per-example position jitter, stroke intensity variation and background
// noise.  Pixel values are multiples of 1/255 so a PGM round trip is exact.
Dataset make_stroke_dataset(int64_t per_class, uint64_t seed,
                            const StrokeOptions& opt = {});

}  // namespace relprop
