#include "relprop/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <vector>

#include "relprop/error.hpp"

namespace relprop {
namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pnm_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw IoError("image header ended unexpectedly");
    return tok;
}

int64_t pnm_int(std::istream& is, const char* what) {
    const std::string tok = pnm_token(is);
    try {
        size_t pos = 0;
        int64_t v = std::stoll(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw IoError(std::string("image header has a malformed ") + what + ": '" + tok + "'");
    }
}

unsigned char quantize(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::llround(255.0 * v));
}

}  // namespace

Tensor read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image '" + path + "'");

    const std::string magic = pnm_token(is);
    int64_t channels;
    if (magic == "P5") {
        channels = 1;
    } else if (magic == "P6") {
        channels = 3;
    } else {
        throw IoError("'" + path + "' is not a binary PGM or PPM image (magic '" + magic + "')");
    }

    const int64_t w = pnm_int(is, "width");
    const int64_t h = pnm_int(is, "height");
    const int64_t maxval = pnm_int(is, "maxval");
    if (w < 1 || h < 1) throw IoError("image '" + path + "' declares an empty size");
    if (maxval < 1 || maxval > 255)
        throw IoError("image '" + path + "' has maxval " + std::to_string(maxval) +
                      "; only 8-bit images are supported");
    // The single whitespace byte after maxval was consumed as the token
    // terminator, so pixel data starts here.
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * channels);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw IoError("image '" + path + "' is truncated");

    Tensor t({channels, h, w});
    // Divide rather than multiply by a reciprocal so k/255.0 written
    // elsewhere round-trips bit for bit.
    const double den = static_cast<double>(maxval);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < channels; ++c)
                t.at3(c, y, x) =
                    static_cast<double>(raw[static_cast<size_t>((y * w + x) * channels + c)]) / den;
    return t;
}

void write_pnm(const Tensor& image, const std::string& path) {
    if (image.rank() != 3 || (image.shape[0] != 1 && image.shape[0] != 3))
        throw UsageError("write_pnm wants a (1,H,W) or (3,H,W) tensor");
    const int64_t c = image.shape[0], h = image.shape[1], w = image.shape[2];

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * c);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < c; ++ch)
                raw[static_cast<size_t>((y * w + x) * c + ch)] = quantize(image.at3(ch, y, x));
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    os.flush();
    if (!os) throw IoError("write to '" + path + "' failed");
}

void export_heatmap(const Tensor& attribution, const Tensor& underlay,
                    const std::string& path) {
    if (attribution.rank() != 3 || underlay.rank() != 3)
        throw UsageError("export_heatmap wants rank-3 attribution and underlay");
    const int64_t h = underlay.shape[1], w = underlay.shape[2];
    if (attribution.shape[1] != h || attribution.shape[2] != w)
        throw UsageError("attribution and underlay disagree on height or width");

    // Per-pixel signed value, then scale so the largest magnitude is 1.
    Tensor v({h, w});
    double peak = 0.0;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int64_t c = 0; c < attribution.shape[0]; ++c) s += attribution.at3(c, y, x);
            v.at2(y, x) = s;
            peak = std::max(peak, std::abs(s));
        }
    }

    Tensor out({int64_t{3}, h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double gray = 0.0;
            for (int64_t c = 0; c < underlay.shape[0]; ++c) gray += underlay.at3(c, y, x);
            gray = std::clamp(gray / static_cast<double>(underlay.shape[0]), 0.0, 1.0);

            const double s = peak > 0.0 ? v.at2(y, x) / peak : 0.0;
            // Colour ramp: white at 0, saturating to red (+) or blue (-).
            double r = 1.0, g = 1.0, b = 1.0;
            if (s >= 0.0) {
                g -= s;
                b -= s;
            } else {
                r += s;
                g += s;
            }
            const double a = std::abs(s);
            out.at3(0, y, x) = a * r + (1.0 - a) * gray;
            out.at3(1, y, x) = a * g + (1.0 - a) * gray;
            out.at3(2, y, x) = a * b + (1.0 - a) * gray;
        }
    }
    write_pnm(out, path);
}

}  // namespace relprop
