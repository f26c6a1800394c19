#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relprop/methods.hpp"
#include "relprop/rng.hpp"

namespace relprop {

enum class MaskOrder { MoRF, LeRF };

// One gradient-guided masking run. Pixels (whole channel columns for image
// inputs, single elements otherwise) are zeroed in T steps; each step picks
// the next slice of units by the impact map recomputed on the current masked
// input. MoRF masks the highest-impact units first, LeRF the lowest.
struct MaskingTrace {
    MaskOrder mode = MaskOrder::MoRF;
    double o_init = 0.0;               // unmasked target logit, the normalizer
    std::vector<double> outputs;       // o_t / o_init after each step, length T
    std::vector<Tensor> attributions;  // raw per-step maps of the method under test
    std::vector<Tensor> impacts;       // impact map that guided each step
    std::vector<Tensor> masks;         // cumulative 0/1 masks, input shape
    Tensor a_init;                     // raw attribution of the unmasked input
};

struct Mosaic {
    Tensor image;  // model input shape: four downscaled tiles in a 2x2 grid
    int positive_quadrant = 0;  // 0 tl, 1 tr, 2 bl, 3 br
    int64_t positive_class = 0;
    std::vector<int64_t> negative_classes;  // predicted class per negative
    std::vector<double> scores;             // softmax scores of the positive image
    Tensor scoring;                         // (H, W) quadrant scoring map
};

struct GaeRecord {
    int64_t group = 0;
    bool skipped = false;
    std::string reason;
    double lc_r = 0.0, lc_f = 0.0, lc = 0.0, c = 0.0, total = 0.0;
};

struct GaeSummary {
    int64_t evaluated = 0, skipped = 0;
    double mean_lc_r = 0.0, mean_lc_f = 0.0, mean_lc = 0.0, mean_c = 0.0;
    double mean_total = 0.0;    // mean of per-group lc*c
    double median_total = 0.0;  // median of per-group lc*c
    double product_of_means = 0.0;
};

struct GaeReport {
    std::vector<GaeRecord> records;
    GaeSummary summary;
};

struct GaeOptions {
    int64_t steps = 10;   // T
    double fraction = 0.02;  // k, per-step share of input units
    int64_t groups = 50;
    uint64_t seed = 0;
    int jobs = 1;
};

// |input (.) d|logit_target| / d input|, elementwise nonnegative.
Tensor impact_map(const Model& model, const Tensor& input, int64_t target);

// Runs T masking steps; returns nothing when the initial target logit is not
// positive, since output normalization divides by it. Per-step unit budgets
// follow the cumulative target round(t*k*units), so k*T = 1 masks everything.
std::optional<MaskingTrace> run_masking(const Model& model, const Tensor& input, int64_t target,
                                        MaskOrder mode, int64_t steps, double fraction,
                                        const MethodConfig& cfg);

// 1 - |a - b|_1 / (|a|_1 + |b|_1); two all-zero maps count as identical.
double attribution_similarity(const Tensor& a_init, const Tensor& a_t);

// Robustness half of local consistency: alignment between the LeRF-minus-MoRF
// output curve and the corresponding attribution-similarity curve.
double local_consistency_robustness(const MaskingTrace& trace_mo, const MaskingTrace& trace_le);

// Per-element sum of LeRF impacts minus sum of MoRF impacts.
Tensor combined_impact_map(const MaskingTrace& trace_mo, const MaskingTrace& trace_le);

// sum(a_init (.) sign(i_c)) / |a_init|_1 for a nonnegative map; 0 when the
// map is all zero.
double local_consistency_faithfulness(const Tensor& a_init, const Tensor& i_c);

// Positively clamped mean of the two halves.
double local_consistency(double lc_r, double lc_f);

// 2x2 mosaic of one positive and three negative images, each mean-pool
// downscaled by 2 so the tiling matches the model input. Classes come from
// model predictions; quadrant placement is drawn from rng.
Mosaic build_mosaic(const Model& model, const Tensor& positive,
                    const std::vector<Tensor>& negatives, Rng& rng);

// sum(a_mosaic (.) scoring) / |a_mosaic|_1, clamped at zero. a_mosaic is the
// positive-part max-normalized attribution of the mosaic for positive_class.
double contrastiveness(const Tensor& a_mosaic, const Mosaic& mosaic);

double gae_score(double lc, double c);

// Full protocol over a pool of images: per group, four distinct images are
// drawn with a group-derived rng, one becomes the positive; local consistency
// is scored on the positive and contrastiveness on the mosaic. Groups run in
// parallel up to opt.jobs; records are ordered by group index either way.
GaeReport evaluate_gae(const Model& model, const std::vector<Tensor>& images,
                       const MethodConfig& cfg, const GaeOptions& opt);

}  // namespace relprop
