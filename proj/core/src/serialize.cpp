#include "relprop/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "relprop/error.hpp"

namespace relprop {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'R', 'P', 'M', 'O', 'D', 'E', 'L', '\n'};
constexpr uint64_t kFormatVersion = 1;

// All multi-byte fields are little-endian regardless of host order.
void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("model file truncated while reading " + what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_f64_block(std::ostream& os, const Tensor& t) {
    put_u64(os, static_cast<uint64_t>(t.numel()) * 8);
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint64_t bits;
        double d = t.data[i];
        std::memcpy(&bits, &d, 8);
        put_u64(os, bits);
    }
}

json header_json(const Model& m) {
    json layers = json::array();
    for (const auto& l : m.layers) {
        json jl;
        jl["kind"] = kind_name(l.kind);
        jl["stride"] = l.stride;
        jl["padding"] = l.padding;
        jl["pool"] = l.pool;
        jl["heads"] = l.heads;
        jl["patch"] = l.patch;
        jl["norm_eps"] = l.norm_eps;
        json params = json::array();
        for (const auto& p : l.params) {
            params.push_back({{"name", p.name}, {"shape", p.value.shape}});
        }
        jl["params"] = params;
        layers.push_back(jl);
    }
    return json{{"version", kFormatVersion},
                {"classes", m.num_classes},
                {"input_shape", m.input_shape},
                {"layers", layers}};
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
    validate_model(m);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    const std::string header = header_json(m).dump();
    os.write(kMagic, 8);
    put_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& l : m.layers) {
        for (const auto& p : l.params) put_f64_block(os, p.value);
    }
    os.flush();
    if (!os) throw IoError("write to '" + path + "' failed");
}

Model load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");

    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("'" + path + "' is not a model file");

    const uint64_t header_len = get_u64(is, "header length");
    std::string header(header_len, '\0');
    is.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw IoError("model file truncated inside the header");

    json h;
    try {
        h = json::parse(header);
    } catch (const json::exception& e) {
        throw IoError(std::string("model header is not valid JSON: ") + e.what());
    }

    uint64_t version = h.value("version", uint64_t{0});
    if (version != kFormatVersion)
        throw IoError("unsupported model format version " + std::to_string(version) +
                      " (expected " + std::to_string(kFormatVersion) + ")");

    Model m;
    try {
        m.num_classes = h.at("classes").get<int64_t>();
        m.input_shape = h.at("input_shape").get<std::vector<int64_t>>();
        for (const auto& jl : h.at("layers")) {
            LayerSpec l;
            l.kind = kind_from_name(jl.at("kind").get<std::string>());
            l.stride = jl.value("stride", int64_t{1});
            l.padding = jl.value("padding", int64_t{0});
            l.pool = jl.value("pool", int64_t{2});
            l.heads = jl.value("heads", int64_t{1});
            l.patch = jl.value("patch", int64_t{4});
            l.norm_eps = jl.value("norm_eps", 1e-5);
            for (const auto& jp : jl.at("params")) {
                NamedTensor p;
                p.name = jp.at("name").get<std::string>();
                p.value = Tensor(jp.at("shape").get<std::vector<int64_t>>());
                l.params.push_back(std::move(p));
            }
            m.layers.push_back(std::move(l));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed model header: ") + e.what());
    }
    if (m.num_classes < 1) throw IoError("model header declares a non-positive class count");

    for (size_t li = 0; li < m.layers.size(); ++li) {
        for (auto& p : m.layers[li].params) {
            const std::string where =
                "parameter '" + p.name + "' of layer " + std::to_string(li);
            const uint64_t bytes = get_u64(is, "size of " + where);
            if (bytes != static_cast<uint64_t>(p.value.numel()) * 8)
                throw IoError("block size for " + where + " disagrees with the declared shape");
            for (int64_t i = 0; i < p.value.numel(); ++i) {
                uint64_t bits = get_u64(is, where);
                double d;
                std::memcpy(&d, &bits, 8);
                p.value.data[i] = d;
            }
        }
    }
    if (is.peek() != std::ifstream::traits_type::eof())
        throw IoError("model file has trailing data after the last parameter block");

    try {
        validate_model(m);
    } catch (const std::exception& e) {
        throw IoError(std::string("loaded model failed validation: ") + e.what());
    }
    return m;
}

}  // namespace relprop
