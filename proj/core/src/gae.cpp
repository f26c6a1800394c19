#include "relprop/gae.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <thread>
#include <utility>

#include "relprop/error.hpp"
#include "relprop/tape.hpp"

namespace relprop {

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Selection units for masking: whole pixels for image inputs, single
// elements otherwise. Channel-summed scores rank the pixels.
struct UnitView {
    int64_t count = 0;
    int64_t channels = 1;
};

UnitView unit_view(const Tensor& input) {
    if (input.rank() == 3) return {input.shape[1] * input.shape[2], input.shape[0]};
    return {input.numel(), 1};
}

std::vector<double> unit_scores(const Tensor& impact, const UnitView& uv) {
    std::vector<double> s(static_cast<size_t>(uv.count), 0.0);
    for (int64_t c = 0; c < uv.channels; ++c)
        for (int64_t u = 0; u < uv.count; ++u) s[static_cast<size_t>(u)] += impact[c * uv.count + u];
    return s;
}

void mask_unit(Tensor& x, Tensor& mask, const UnitView& uv, int64_t unit) {
    for (int64_t c = 0; c < uv.channels; ++c) {
        x[c * uv.count + unit] = 0.0;
        mask[c * uv.count + unit] = 1.0;
    }
}

Tensor softmax_scores(const Tensor& logits) {
    double mx = logits[0];
    for (double v : logits.data) mx = std::max(mx, v);
    Tensor out = zeros_like(logits);
    double denom = 0.0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        denom += out[i];
    }
    for (double& v : out.data) v /= denom;
    return out;
}

// 2x2 mean-pool halving both spatial dimensions.
Tensor downscale_half(const Tensor& img) {
    int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
    Tensor out({c, h / 2, w / 2}, 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h / 2; ++y)
            for (int64_t x = 0; x < w / 2; ++x)
                out.at3(ci, y, x) = 0.25 * (img.at3(ci, 2 * y, 2 * x) + img.at3(ci, 2 * y, 2 * x + 1) +
                                            img.at3(ci, 2 * y + 1, 2 * x) +
                                            img.at3(ci, 2 * y + 1, 2 * x + 1));
    return out;
}

}  // namespace

Tensor impact_map(const Model& model, const Tensor& input, int64_t target) {
    if (target < 0 || target >= model.num_classes)
        throw UsageError("impact map target out of range");
    Tape tape = forward(model, input);
    Tensor seed(tape.output().shape, 0.0);
    seed[target] = sign_of(tape.output()[target]);
    Tensor g = grad(tape, seed);
    return abs(mul(input, g));
}

std::optional<MaskingTrace> run_masking(const Model& model, const Tensor& input, int64_t target,
                                        MaskOrder mode, int64_t steps, double fraction,
                                        const MethodConfig& cfg) {
    if (steps < 1) throw UsageError("masking needs at least one step");
    if (fraction <= 0.0 || fraction * static_cast<double>(steps) > 1.0 + 1e-12)
        throw UsageError("per-step fraction must be positive with fraction*steps <= 1");
    if (target < 0 || target >= model.num_classes)
        throw UsageError("masking target out of range");

    Tape t0 = forward(model, input);
    double o_init = t0.output()[target];
    if (!(o_init > 0.0)) return std::nullopt;

    MaskingTrace trace;
    trace.mode = mode;
    trace.o_init = o_init;
    trace.a_init = attribute(model, input, target, cfg).values;

    UnitView uv = unit_view(input);
    Tensor x = input;
    Tensor mask = zeros_like(input);
    std::vector<char> taken(static_cast<size_t>(uv.count), 0);
    int64_t masked = 0;

    for (int64_t t = 1; t <= steps; ++t) {
        Tensor imp = impact_map(model, x, target);
        trace.impacts.push_back(imp);

        int64_t goal = std::llround(fraction * static_cast<double>(t * uv.count));
        goal = std::min(goal, uv.count);
        int64_t want = goal - masked;

        std::vector<int64_t> free_units;
        free_units.reserve(static_cast<size_t>(uv.count - masked));
        for (int64_t u = 0; u < uv.count; ++u)
            if (!taken[static_cast<size_t>(u)]) free_units.push_back(u);
        std::vector<double> scores = unit_scores(imp, uv);
        auto better = [&](int64_t a, int64_t b) {
            double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
            if (sa != sb) return mode == MaskOrder::MoRF ? sa > sb : sa < sb;
            return a < b;
        };
        if (want > 0 && want < static_cast<int64_t>(free_units.size()))
            std::partial_sort(free_units.begin(), free_units.begin() + want, free_units.end(),
                              better);
        for (int64_t i = 0; i < want && i < static_cast<int64_t>(free_units.size()); ++i) {
            mask_unit(x, mask, uv, free_units[static_cast<size_t>(i)]);
            taken[static_cast<size_t>(free_units[static_cast<size_t>(i)])] = 1;
            ++masked;
        }

        Tape tt = forward(model, x);
        trace.outputs.push_back(tt.output()[target] / o_init);
        trace.attributions.push_back(attribute(model, x, target, cfg).values);
        trace.masks.push_back(mask);
    }
    return trace;
}

double attribution_similarity(const Tensor& a_init, const Tensor& a_t) {
    if (!a_init.same_shape(a_t)) throw UsageError("similarity needs equal shapes");
    double denom = l1_norm(a_init) + l1_norm(a_t);
    if (denom == 0.0) return 1.0;
    return 1.0 - l1_norm(sub(a_init, a_t)) / denom;
}

double local_consistency_robustness(const MaskingTrace& trace_mo, const MaskingTrace& trace_le) {
    if (trace_mo.mode != MaskOrder::MoRF || trace_le.mode != MaskOrder::LeRF)
        throw UsageError("robustness expects one MoRF and one LeRF trace, in that order");
    size_t t = trace_mo.outputs.size();
    if (t != trace_le.outputs.size() || t == 0)
        throw UsageError("robustness expects traces of equal positive length");

    Tensor a0 = normalize_positive(trace_mo.a_init);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < t; ++i) {
        double d_o = trace_le.outputs[i] - trace_mo.outputs[i];
        double d_a = attribution_similarity(a0, normalize_positive(trace_le.attributions[i])) -
                     attribution_similarity(a0, normalize_positive(trace_mo.attributions[i]));
        num += std::fabs(d_o - d_a);
        den += std::fabs(d_o) + std::fabs(d_a);
    }
    if (den == 0.0) return 1.0;
    return 1.0 - 2.0 * num / den;
}

Tensor combined_impact_map(const MaskingTrace& trace_mo, const MaskingTrace& trace_le) {
    if (trace_mo.impacts.empty() || trace_mo.impacts.size() != trace_le.impacts.size())
        throw UsageError("combined impact expects traces of equal positive length");
    Tensor out = zeros_like(trace_mo.impacts.front());
    for (const Tensor& m : trace_le.impacts) out = add(out, m);
    for (const Tensor& m : trace_mo.impacts) out = sub(out, m);
    return out;
}

double local_consistency_faithfulness(const Tensor& a_init, const Tensor& i_c) {
    if (!a_init.same_shape(i_c)) throw UsageError("faithfulness needs equal shapes");
    double norm = l1_norm(a_init);
    if (norm == 0.0) return 0.0;
    double acc = 0.0;
    for (int64_t i = 0; i < a_init.numel(); ++i) acc += a_init[i] * sign_of(i_c[i]);
    return acc / norm;
}

double local_consistency(double lc_r, double lc_f) {
    return std::max(0.0, 0.5 * (lc_r + lc_f));
}

Mosaic build_mosaic(const Model& model, const Tensor& positive,
                    const std::vector<Tensor>& negatives, Rng& rng) {
    if (negatives.size() != 3) throw UsageError("mosaic needs exactly three negatives");
    if (positive.rank() != 3 || positive.shape[1] % 2 != 0 || positive.shape[2] % 2 != 0)
        throw UsageError("mosaic needs channel-height-width images with even sides");
    for (const Tensor& n : negatives)
        if (!n.same_shape(positive)) throw UsageError("mosaic images must share one shape");

    Mosaic mo;
    Tape tp = forward(model, positive);
    mo.positive_class = argmax(tp.output());
    Tensor sm = softmax_scores(tp.output());
    mo.scores.assign(sm.data.begin(), sm.data.end());
    double sp = mo.scores[static_cast<size_t>(mo.positive_class)];
    if (!(sp > 0.0)) throw NumericError("positive image has zero softmax score");
    for (const Tensor& n : negatives)
        mo.negative_classes.push_back(argmax(forward(model, n).output()));

    // order[q] is the image placed in quadrant q; image 0 is the positive.
    std::vector<int> order = {0, 1, 2, 3};
    rng.shuffle(order);
    for (int q = 0; q < 4; ++q)
        if (order[static_cast<size_t>(q)] == 0) mo.positive_quadrant = q;

    int64_t c = positive.shape[0], h = positive.shape[1], w = positive.shape[2];
    int64_t th = h / 2, tw = w / 2;
    std::vector<Tensor> tiles;
    tiles.push_back(downscale_half(positive));
    for (const Tensor& n : negatives) tiles.push_back(downscale_half(n));

    mo.image = Tensor({c, h, w}, 0.0);
    mo.scoring = Tensor({h, w}, 0.0);
    for (int q = 0; q < 4; ++q) {
        int img = order[static_cast<size_t>(q)];
        int64_t oy = (q / 2) * th, ox = (q % 2) * tw;
        const Tensor& tile = tiles[static_cast<size_t>(img)];
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < th; ++y)
                for (int64_t x = 0; x < tw; ++x)
                    mo.image.at3(ci, oy + y, ox + x) = tile.at3(ci, y, x);
        double value =
            img == 0
                ? 1.0
                : 2.0 * mo.scores[static_cast<size_t>(mo.negative_classes[static_cast<size_t>(
                      img - 1)])] / sp - 1.0;
        for (int64_t y = 0; y < th; ++y)
            for (int64_t x = 0; x < tw; ++x) mo.scoring.at2(oy + y, ox + x) = value;
    }
    return mo;
}

double contrastiveness(const Tensor& a_mosaic, const Mosaic& mosaic) {
    if (a_mosaic.rank() != 3 || a_mosaic.shape[1] != mosaic.scoring.shape[0] ||
        a_mosaic.shape[2] != mosaic.scoring.shape[1])
        throw UsageError("attribution does not match the mosaic shape");
    double norm = l1_norm(a_mosaic);
    if (norm == 0.0) return 0.0;
    int64_t c = a_mosaic.shape[0], h = a_mosaic.shape[1], w = a_mosaic.shape[2];
    double acc = 0.0;
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) acc += a_mosaic.at3(ci, y, x) * mosaic.scoring.at2(y, x);
    return std::max(0.0, acc / norm);
}

double gae_score(double lc, double c) { return lc * c; }

namespace {

GaeRecord evaluate_group(const Model& model, const std::vector<Tensor>& images,
                         const MethodConfig& cfg, const GaeOptions& opt, int64_t group) {
    GaeRecord rec;
    rec.group = group;
    Rng rng(derive_seed(opt.seed, static_cast<uint64_t>(group)));

    int64_t n = static_cast<int64_t>(images.size());
    std::vector<int64_t> picks;
    while (static_cast<int64_t>(picks.size()) < 4) {
        int64_t c = rng.uniform_int(n);
        if (std::find(picks.begin(), picks.end(), c) == picks.end()) picks.push_back(c);
    }
    std::swap(picks[0], picks[static_cast<size_t>(rng.uniform_int(4))]);
    const Tensor& positive = images[static_cast<size_t>(picks[0])];
    std::vector<Tensor> negatives = {images[static_cast<size_t>(picks[1])],
                                     images[static_cast<size_t>(picks[2])],
                                     images[static_cast<size_t>(picks[3])]};

    int64_t target = argmax(forward(model, positive).output());
    auto mo = run_masking(model, positive, target, MaskOrder::MoRF, opt.steps, opt.fraction, cfg);
    if (!mo) {
        rec.skipped = true;
        rec.reason = "non-positive initial output";
        return rec;
    }
    auto le = run_masking(model, positive, target, MaskOrder::LeRF, opt.steps, opt.fraction, cfg);

    rec.lc_r = local_consistency_robustness(*mo, *le);
    Tensor i_c = combined_impact_map(*mo, *le);
    rec.lc_f = local_consistency_faithfulness(normalize_positive(mo->a_init), i_c);
    rec.lc = local_consistency(rec.lc_r, rec.lc_f);

    Mosaic mosaic = build_mosaic(model, positive, negatives, rng);
    Tensor a_mos =
        normalize_positive(attribute(model, mosaic.image, mosaic.positive_class, cfg).values);
    rec.c = contrastiveness(a_mos, mosaic);
    rec.total = gae_score(rec.lc, rec.c);
    return rec;
}

}  // namespace

GaeReport evaluate_gae(const Model& model, const std::vector<Tensor>& images,
                       const MethodConfig& cfg, const GaeOptions& opt) {
    if (images.size() < 4) throw UsageError("evaluation needs at least four images");
    if (opt.groups < 1) throw UsageError("evaluation needs at least one group");
    if (opt.jobs < 1) throw UsageError("job count must be positive");

    GaeReport report;
    report.records.resize(static_cast<size_t>(opt.groups));

    int jobs = static_cast<int>(std::min<int64_t>(opt.jobs, opt.groups));
    std::atomic<int64_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_lock;
    auto worker = [&] {
        for (;;) {
            int64_t g = next.fetch_add(1);
            if (g >= opt.groups) return;
            try {
                report.records[static_cast<size_t>(g)] =
                    evaluate_group(model, images, cfg, opt, g);
            } catch (...) {
                std::lock_guard<std::mutex> hold(error_lock);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (std::thread& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    GaeSummary& s = report.summary;
    std::vector<double> totals;
    for (const GaeRecord& r : report.records) {
        if (r.skipped) {
            ++s.skipped;
            continue;
        }
        ++s.evaluated;
        s.mean_lc_r += r.lc_r;
        s.mean_lc_f += r.lc_f;
        s.mean_lc += r.lc;
        s.mean_c += r.c;
        s.mean_total += r.total;
        totals.push_back(r.total);
    }
    if (s.evaluated > 0) {
        double n = static_cast<double>(s.evaluated);
        s.mean_lc_r /= n;
        s.mean_lc_f /= n;
        s.mean_lc /= n;
        s.mean_c /= n;
        s.mean_total /= n;
        s.product_of_means = s.mean_lc * s.mean_c;
        std::sort(totals.begin(), totals.end());
        size_t m = totals.size();
        s.median_total = m % 2 ? totals[m / 2] : 0.5 * (totals[m / 2 - 1] + totals[m / 2]);
    }
    return report;
}

}  // namespace relprop
