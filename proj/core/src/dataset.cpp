#include "relprop/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "relprop/error.hpp"
#include "relprop/image.hpp"

namespace relprop {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool shape_matches(const Tensor& t, const std::vector<int64_t>& shape) {
    return shape.empty() || t.shape == shape;
}

// Default split rule when no manifest pins one.
bool held_out(int64_t index_in_class) { return index_in_class % 5 == 4; }

std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (dirs ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return out;
}

void snap_to_bytes(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = std::clamp(t.data[i], 0.0, 1.0);
        t.data[i] = static_cast<double>(std::llround(255.0 * v)) / 255.0;
    }
}

// Seven-segment layout on a 28x28 canvas.  Each segment is a filled
// rectangle {row0, row1, col0, col1}, bounds inclusive.
struct SegRect {
    int r0, r1, c0, c1;
};
constexpr SegRect kSegments[7] = {
    {4, 6, 7, 20},     // A  top bar
    {5, 14, 19, 21},   // B  upper right
    {14, 23, 19, 21},  // C  lower right
    {22, 24, 7, 20},   // D  bottom bar
    {14, 23, 6, 8},    // E  lower left
    {5, 14, 6, 8},     // F  upper left
    {13, 15, 7, 20},   // G  middle bar
};
// Segment membership per digit, as a bitmask over ABCDEFG.
constexpr unsigned kDigitSegs[10] = {
    0b1111110,  // 0: ABCDEF
    0b0110000,  // 1: BC
    0b1101101,  // 2: ABDEG
    0b1111001,  // 3: ABCDG
    0b0110011,  // 4: BCFG
    0b1011011,  // 5: ACDFG
    0b1011111,  // 6: ACDEFG
    0b1110000,  // 7: ABC
    0b1111111,  // 8
    0b1111011,  // 9: ABCDFG
};

void paint_glyph(Tensor& img, int digit, int dy, int dx, double fg) {
    const unsigned mask = kDigitSegs[digit];
    for (int s = 0; s < 7; ++s) {
        if (!(mask & (1u << (6 - s)))) continue;
        const SegRect& seg = kSegments[s];
        for (int y = seg.r0 + dy; y <= seg.r1 + dy; ++y) {
            for (int x = seg.c0 + dx; x <= seg.c1 + dx; ++x) {
                if (y >= 0 && y < 28 && x >= 0 && x < 28) img.at3(0, y, x) = fg;
            }
        }
    }
}

Tensor render_digit(int digit, Rng& rng, const StrokeOptions& opt) {
    // Draw order is part of the generator's contract; reordering would shift
    // every later example produced from the same seed.
    const bool half =
        opt.half_scale_fraction > 0.0 && rng.uniform() < opt.half_scale_fraction;

    Tensor img({1, 28, 28});
    for (int64_t i = 0; i < img.numel(); ++i) img.data[i] = opt.noise * rng.uniform();

    const int dy = static_cast<int>(rng.uniform_int(5)) - 2;
    const int dx = static_cast<int>(rng.uniform_int(5)) - 2;
    const double fg = opt.fg_min + (1.0 - opt.fg_min) * rng.uniform();

    if (!half) {
        paint_glyph(img, digit, dy, dx, fg);
    } else {
        // Full-size glyph reduced by 2x2 mean pooling, pasted into one
        // quadrant; the reduction matches the one evaluation mosaics apply.
        const int64_t q = rng.uniform_int(4);
        Tensor glyph({1, 28, 28}, 0.0);
        paint_glyph(glyph, digit, dy, dx, fg);
        const int64_t oy = (q / 2) * 14, ox = (q % 2) * 14;
        for (int64_t y = 0; y < 14; ++y) {
            for (int64_t x = 0; x < 14; ++x) {
                const double v = 0.25 * (glyph.at3(0, 2 * y, 2 * x) +
                                         glyph.at3(0, 2 * y, 2 * x + 1) +
                                         glyph.at3(0, 2 * y + 1, 2 * x) +
                                         glyph.at3(0, 2 * y + 1, 2 * x + 1));
                double& dst = img.at3(0, oy + y, ox + x);
                dst = std::max(dst, v);
            }
        }
    }
    snap_to_bytes(img);
    return img;
}

}  // namespace

Dataset load_dataset(const std::string& dir, const std::vector<int64_t>& expected_shape) {
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw IoError("dataset directory '" + dir + "' does not exist");

    // Optional manifest pins split membership by root-relative path.
    std::map<std::string, bool> listed;  // path -> goes to eval
    bool have_manifest = false;
    if (fs::is_regular_file(root / "manifest.json")) {
        std::ifstream ms(root / "manifest.json");
        json mj;
        try {
            ms >> mj;
            for (const auto& p : mj.at("split").at("train")) listed[p.get<std::string>()] = false;
            for (const auto& p : mj.at("split").at("eval")) listed[p.get<std::string>()] = true;
        } catch (const json::exception& e) {
            throw IoError(std::string("malformed dataset manifest: ") + e.what());
        }
        have_manifest = true;
    }

    Dataset d;
    std::vector<int64_t> shape = expected_shape;
    int64_t label = 0;
    for (const auto& class_dir : sorted_entries(root, true)) {
        d.classes.push_back(class_dir.filename().string());
        int64_t index_in_class = 0;
        for (const auto& file : sorted_entries(class_dir, false)) {
            const std::string rel = class_dir.filename().string() + "/" + file.filename().string();
            bool to_eval;
            if (have_manifest) {
                auto it = listed.find(rel);
                if (it == listed.end()) continue;
                to_eval = it->second;
            } else {
                to_eval = held_out(index_in_class);
            }
            ++index_in_class;

            Tensor img;
            try {
                img = read_pnm(file.string());
            } catch (const IoError&) {
                ++d.skipped;
                continue;
            }
            if (shape.empty()) shape = img.shape;
            if (!shape_matches(img, shape)) {
                ++d.skipped;
                continue;
            }
            (to_eval ? d.eval : d.train).push_back({std::move(img), label});
        }
        ++label;
    }
    return d;
}

void save_dataset(const Dataset& d, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root);

    json train_list = json::array();
    json eval_list = json::array();
    std::vector<int64_t> counter(d.classes.size(), 0);

    auto write_split = [&](const std::vector<Example>& split, json& list) {
        for (const auto& ex : split) {
            if (ex.label < 0 || ex.label >= static_cast<int64_t>(d.classes.size()))
                throw UsageError("example label outside the class list");
            if (ex.image.rank() != 3)
                throw UsageError("save_dataset can only write rank-3 image examples");
            const std::string cls = d.classes[ex.label];
            fs::create_directories(root / cls);
            char name[32];
            std::snprintf(name, sizeof(name), "%04lld.%s",
                          static_cast<long long>(counter[ex.label]++),
                          ex.image.shape[0] == 1 ? "pgm" : "ppm");
            write_pnm(ex.image, (root / cls / name).string());
            list.push_back(cls + "/" + name);
        }
    };
    write_split(d.train, train_list);
    write_split(d.eval, eval_list);

    json manifest{{"split", {{"train", train_list}, {"eval", eval_list}}}};
    std::ofstream ms(root / "manifest.json");
    ms << manifest.dump(2) << "\n";
    if (!ms) throw IoError("cannot write dataset manifest under '" + dir + "'");
}

Dataset make_blob_dataset(int64_t classes, int64_t per_class, int64_t dim, uint64_t seed) {
    if (classes < 2 || per_class < 1) throw UsageError("need at least two classes with one example");
    if (dim < classes) throw UsageError("blob dimension must be at least the class count");
    Rng rng(seed);
    Dataset d;
    for (int64_t c = 0; c < classes; ++c) {
        d.classes.push_back(std::to_string(c));
        for (int64_t i = 0; i < per_class; ++i) {
            Tensor x({dim});
            for (int64_t k = 0; k < dim; ++k) x.data[k] = 0.5 * rng.gaussian();
            x.data[c] += 3.0;
            (held_out(i) ? d.eval : d.train).push_back({std::move(x), c});
        }
    }
    return d;
}

Dataset make_stroke_dataset(int64_t per_class, uint64_t seed, const StrokeOptions& opt) {
    if (per_class < 1) throw UsageError("need at least one example per class");
    if (opt.noise < 0.0 || opt.noise >= 1.0 || opt.fg_min <= 0.0 || opt.fg_min > 1.0 ||
        opt.half_scale_fraction < 0.0 || opt.half_scale_fraction > 1.0)
        throw UsageError("stroke rendering options out of range");
    Rng rng(seed);
    Dataset d;
    for (int64_t c = 0; c < 10; ++c) {
        d.classes.push_back(std::to_string(c));
        for (int64_t i = 0; i < per_class; ++i) {
            Tensor img = render_digit(static_cast<int>(c), rng, opt);
            (held_out(i) ? d.eval : d.train).push_back({std::move(img), c});
        }
    }
    return d;
}

}  // namespace relprop
