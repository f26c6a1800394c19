#include "relprop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "relprop/error.hpp"
#include "relprop/tape.hpp"

namespace relprop {

namespace {

struct Region {
    int64_t y = 0, x = 0;
    double score = 0.0;
    int64_t index = 0;
};

// All stride-1 candidate squares scored by the channel-summed attribution
// inside them.
std::vector<Region> scored_regions(const Tensor& attribution, int64_t region) {
    int64_t c = attribution.shape[0], h = attribution.shape[1], w = attribution.shape[2];
    std::vector<Region> out;
    int64_t index = 0;
    for (int64_t y = 0; y + region <= h; ++y)
        for (int64_t x = 0; x + region <= w; ++x) {
            double s = 0.0;
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t dy = 0; dy < region; ++dy)
                    for (int64_t dx = 0; dx < region; ++dx)
                        s += attribution.at3(ci, y + dy, x + dx);
            out.push_back({y, x, s, index++});
        }
    return out;
}

bool overlaps(const Region& a, const Region& b, int64_t region) {
    return a.y < b.y + region && b.y < a.y + region && a.x < b.x + region && b.x < a.x + region;
}

void check_image_args(const Tensor& input, const Tensor& attribution, int64_t regions,
                      int64_t region) {
    if (input.rank() != 3) throw UsageError("region perturbation needs channel-height-width input");
    if (!input.same_shape(attribution))
        throw UsageError("attribution must match the input shape");
    if (region < 1 || region > input.shape[1] || region > input.shape[2])
        throw UsageError("region does not fit the input");
    if (regions < 0 || regions * region * region > input.shape[1] * input.shape[2])
        throw UsageError("regions exceed the input area");
}

}  // namespace

int64_t default_region_count(const std::vector<int64_t>& input_shape, int64_t region) {
    if (input_shape.size() != 3 || region < 1) throw UsageError("region budget needs an image shape");
    double area = static_cast<double>(input_shape[1] * input_shape[2]);
    int64_t n = std::llround(0.157 * area / static_cast<double>(region * region));
    return std::max<int64_t>(1, n);
}

PerturbationCurve perturbation_curve(const Model& model, const Tensor& input,
                                     const Tensor& attribution, int64_t regions, int64_t region,
                                     MaskOrder order, Replacement rep, Rng& rng) {
    check_image_args(input, attribution, regions, region);

    std::vector<Region> cands = scored_regions(attribution, region);
    std::sort(cands.begin(), cands.end(), [&](const Region& a, const Region& b) {
        if (a.score != b.score)
            return order == MaskOrder::MoRF ? a.score > b.score : a.score < b.score;
        return a.index < b.index;
    });
    std::vector<Region> chosen;
    for (const Region& cand : cands) {
        if (static_cast<int64_t>(chosen.size()) == regions) break;
        bool free = true;
        for (const Region& c : chosen)
            if (overlaps(cand, c, region)) {
                free = false;
                break;
            }
        if (free) chosen.push_back(cand);
    }

    Tape t0 = forward(model, input);
    int64_t target = argmax(t0.output());

    PerturbationCurve curve;
    curve.order = order;
    curve.region = region;
    curve.values.push_back(t0.output()[target]);
    Tensor x = input;
    for (const Region& r : chosen) {
        for (int64_t ci = 0; ci < input.shape[0]; ++ci)
            for (int64_t dy = 0; dy < region; ++dy)
                for (int64_t dx = 0; dx < region; ++dx)
                    x.at3(ci, r.y + dy, r.x + dx) =
                        rep == Replacement::Uniform ? rng.uniform() : 0.0;
        curve.values.push_back(forward(model, x).output()[target]);
    }
    return curve;
}

double aopc(const Model& model, const Tensor& input, const Tensor& attribution, int64_t regions,
            int64_t region, Rng& rng, Replacement rep) {
    PerturbationCurve c =
        perturbation_curve(model, input, attribution, regions, region, MaskOrder::MoRF, rep, rng);
    double acc = 0.0;
    for (size_t k = 1; k < c.values.size(); ++k) acc += c.values[0] - c.values[k];
    return acc / static_cast<double>(c.values.size());
}

double abpc(const Model& model, const Tensor& input, const Tensor& attribution, int64_t regions,
            int64_t region, Rng& rng, Replacement rep) {
    Rng le_rng = rng;  // identical stream for both orderings
    PerturbationCurve mo =
        perturbation_curve(model, input, attribution, regions, region, MaskOrder::MoRF, rep, rng);
    PerturbationCurve le = perturbation_curve(model, input, attribution, regions, region,
                                              MaskOrder::LeRF, rep, le_rng);
    size_t steps = std::min(mo.values.size(), le.values.size());
    double acc = 0.0;
    for (size_t k = 1; k < steps; ++k) acc += le.values[k] - mo.values[k];
    return acc / static_cast<double>(steps);
}

double lipschitz_estimate(const Model& model, const Tensor& input, const MethodConfig& cfg,
                          double epsilon, int64_t n_samples, Rng& rng, bool on_model_output) {
    if (epsilon <= 0.0) throw UsageError("perturbation ball must have positive radius");
    if (n_samples < 1) throw UsageError("lipschitz estimate needs at least one sample");

    Tape t0 = forward(model, input);
    int64_t target = argmax(t0.output());
    Tensor base = on_model_output ? t0.output() : attribute(model, input, target, cfg).values;

    double best = 0.0;
    int64_t d = input.numel();
    for (int64_t s = 0; s < n_samples; ++s) {
        // Uniform draw from the epsilon-ball: gaussian direction, radius via
        // the inverse-cdf power of the dimension.
        Tensor delta = zeros_like(input);
        double norm2 = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            delta[i] = rng.gaussian();
            norm2 += delta[i] * delta[i];
        }
        double norm = std::sqrt(norm2);
        if (norm == 0.0) continue;
        double radius = epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
        for (int64_t i = 0; i < d; ++i) delta[i] *= radius / norm;

        double dist = l2_norm(delta);
        if (dist == 0.0) continue;
        Tensor xp = add(input, delta);
        Tensor probe =
            on_model_output ? forward(model, xp).output() : attribute(model, xp, target, cfg).values;
        best = std::max(best, l2_norm(sub(base, probe)) / dist);
    }
    return best;
}

FocusMosaic build_focus_mosaic(const std::vector<Tensor>& positives,
                               const std::vector<Tensor>& negatives, Rng& rng) {
    if (positives.size() != 2 || negatives.size() != 2)
        throw UsageError("focus mosaic needs two positives and two negatives");
    const Tensor& ref = positives.front();
    if (ref.rank() != 3 || ref.shape[1] % 2 != 0 || ref.shape[2] % 2 != 0)
        throw UsageError("mosaic needs channel-height-width images with even sides");
    for (const Tensor* t : {&positives[1], &negatives[0], &negatives[1]})
        if (!t->same_shape(ref)) throw UsageError("mosaic images must share one shape");

    int64_t c = ref.shape[0], h = ref.shape[1], w = ref.shape[2];
    int64_t th = h / 2, tw = w / 2;
    auto half = [&](const Tensor& img) {
        Tensor out({c, th, tw}, 0.0);
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < th; ++y)
                for (int64_t x = 0; x < tw; ++x)
                    out.at3(ci, y, x) =
                        0.25 * (img.at3(ci, 2 * y, 2 * x) + img.at3(ci, 2 * y, 2 * x + 1) +
                                img.at3(ci, 2 * y + 1, 2 * x) + img.at3(ci, 2 * y + 1, 2 * x + 1));
        return out;
    };
    std::vector<Tensor> tiles = {half(positives[0]), half(positives[1]), half(negatives[0]),
                                 half(negatives[1])};
    std::vector<int> order = {0, 1, 2, 3};
    rng.shuffle(order);

    FocusMosaic mo;
    mo.image = Tensor({c, h, w}, 0.0);
    for (int q = 0; q < 4; ++q) {
        int img = order[static_cast<size_t>(q)];
        mo.positive[static_cast<size_t>(q)] = img < 2;
        int64_t oy = (q / 2) * th, ox = (q % 2) * tw;
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < th; ++y)
                for (int64_t x = 0; x < tw; ++x)
                    mo.image.at3(ci, oy + y, ox + x) = tiles[static_cast<size_t>(img)].at3(ci, y, x);
    }
    return mo;
}

std::optional<double> focus(const Model& model, const FocusMosaic& mosaic,
                            const MethodConfig& cfg, int64_t target) {
    Tensor rel = pos_part(attribute(model, mosaic.image, target, cfg).values);
    double total = sum(rel);
    if (total == 0.0) return std::nullopt;
    int64_t c = rel.shape[0], th = rel.shape[1] / 2, tw = rel.shape[2] / 2;
    double inside = 0.0;
    for (int q = 0; q < 4; ++q) {
        if (!mosaic.positive[static_cast<size_t>(q)]) continue;
        int64_t oy = (q / 2) * th, ox = (q % 2) * tw;
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < th; ++y)
                for (int64_t x = 0; x < tw; ++x) inside += rel.at3(ci, oy + y, ox + x);
    }
    return inside / total;
}

double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw UsageError("paired test needs equal, non-empty score lists");

    std::vector<double> diffs;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) diffs.push_back(a[i] - b[i]);
    size_t n = diffs.size();
    if (n == 0) return 1.0;

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](size_t l, size_t r) { return std::fabs(diffs[l]) < std::fabs(diffs[r]); });

    // Doubled average ranks stay integral through ties.
    std::vector<int64_t> rank2(n, 0);
    std::vector<size_t> tie_sizes;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && std::fabs(diffs[idx[j]]) == std::fabs(diffs[idx[i]])) ++j;
        int64_t doubled = static_cast<int64_t>(i + 1 + j);  // 2 * average of ranks i+1..j
        for (size_t t = i; t < j; ++t) rank2[idx[t]] = doubled;
        tie_sizes.push_back(j - i);
        i = j;
    }

    int64_t w2 = 0, total2 = 0;
    for (size_t t = 0; t < n; ++t) {
        total2 += rank2[t];
        if (diffs[t] > 0.0) w2 += rank2[t];
    }

    if (n <= 25) {
        // Exact sign-flip distribution of the doubled rank sum.
        std::vector<uint64_t> ways(static_cast<size_t>(total2) + 1, 0);
        ways[0] = 1;
        for (size_t t = 0; t < n; ++t)
            for (int64_t s = total2 - rank2[t]; s >= 0; --s)
                ways[static_cast<size_t>(s + rank2[t])] += ways[static_cast<size_t>(s)];
        uint64_t ge = 0, le = 0, all = uint64_t{1} << n;
        for (int64_t s = 0; s <= total2; ++s) {
            if (s >= w2) ge += ways[static_cast<size_t>(s)];
            if (s <= w2) le += ways[static_cast<size_t>(s)];
        }
        double p = 2.0 * static_cast<double>(std::min(ge, le)) / static_cast<double>(all);
        return std::min(1.0, p);
    }

    double w = 0.5 * static_cast<double>(w2);
    double dn = static_cast<double>(n);
    double mean = dn * (dn + 1.0) / 4.0;
    double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0;
    for (size_t t : tie_sizes) {
        double ts = static_cast<double>(t);
        var -= (ts * ts * ts - ts) / 48.0;
    }
    if (var <= 0.0) return 1.0;
    double z = (std::fabs(w - mean) - 0.5) / std::sqrt(var);
    if (z <= 0.0) return 1.0;
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace relprop
