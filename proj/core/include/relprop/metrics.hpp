#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "relprop/gae.hpp"
#include "relprop/methods.hpp"
#include "relprop/rng.hpp"

namespace relprop {

enum class Replacement { Uniform, Zero };

// Region-perturbation readout of the predicted logit: values[0] is the
// unperturbed output, values[k] the output after the first k regions.
struct PerturbationCurve {
    MaskOrder order = MaskOrder::MoRF;
    int64_t region = 9;
    std::vector<double> values;
};

// Region budget scaled so that regions*region^2 covers roughly 15.7% of the
// image, matching the 100-region convention on full-size inputs.
int64_t default_region_count(const std::vector<int64_t>& input_shape, int64_t region);

// Square regions ranked by summed attribution (ties to the lower index),
// selected greedily without overlap, then replaced cumulatively. Fewer than
// `regions` steps happen only if no further disjoint region fits.
PerturbationCurve perturbation_curve(const Model& model, const Tensor& input,
                                     const Tensor& attribution, int64_t regions, int64_t region,
                                     MaskOrder order, Replacement rep, Rng& rng);

// Mean drop of the predicted logit over the most-relevant-first curve.
double aopc(const Model& model, const Tensor& input, const Tensor& attribution, int64_t regions,
            int64_t region, Rng& rng, Replacement rep = Replacement::Uniform);

// Mean gap between the least-relevant-first and most-relevant-first curves.
// Both curves consume an identical replacement stream, so equal orderings
// cancel exactly.
double abpc(const Model& model, const Tensor& input, const Tensor& attribution, int64_t regions,
            int64_t region, Rng& rng, Replacement rep = Replacement::Uniform);

// Monte Carlo local Lipschitz estimate over an epsilon-ball around the input:
// max ratio of attribution-map distance to input distance. The flag switches
// the numerator to model-logit distance instead.
double lipschitz_estimate(const Model& model, const Tensor& input, const MethodConfig& cfg,
                          double epsilon, int64_t n_samples, Rng& rng,
                          bool on_model_output = false);

// Two positives and two negatives tiled into the model input size, with the
// quadrant placement drawn from rng.
struct FocusMosaic {
    Tensor image;
    std::array<bool, 4> positive{};  // quadrant order: tl, tr, bl, br
};

FocusMosaic build_focus_mosaic(const std::vector<Tensor>& positives,
                               const std::vector<Tensor>& negatives, Rng& rng);

// Share of positive relevance falling inside the positive quadrants; empty
// when the map carries no positive relevance at all.
std::optional<double> focus(const Model& model, const FocusMosaic& mosaic,
                            const MethodConfig& cfg, int64_t target);

// Two-sided paired test on a-b. Zero differences are dropped, tied absolute
// differences share their average rank. Exact sign-flip enumeration up to 25
// informative pairs, tie-corrected normal approximation with continuity
// correction beyond that.
double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace relprop
