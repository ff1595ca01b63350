#include <bit>
#include <fstream>

#include "json.hpp"
#include "lvseg/autodiff.hpp"

namespace lvseg::ad {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

std::uint64_t get_u64(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

struct Loaded {
    json header;
    std::vector<unsigned char> payload;
};

Loaded read_file(const fs::path& path, bool with_payload) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    unsigned char len[8];
    in.read(reinterpret_cast<char*>(len), 8);
    if (!in) throw Error("truncated checkpoint " + path.string());
    const std::uint64_t n = get_u64(len);
    if (n > (1u << 26)) throw Error("implausible checkpoint header in " + path.string());
    std::string text(n, '\0');
    in.read(text.data(), static_cast<std::streamsize>(n));
    if (!in) throw Error("truncated checkpoint header in " + path.string());
    Loaded out;
    try {
        out.header = json::parse(text);
    } catch (const json::exception& e) {
        throw Error("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    if (out.header.value("format", std::string{}) != "lvseg-checkpoint")
        throw Error("not an lvseg checkpoint: " + path.string());
    if (with_payload) out.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return out;
}

}  // namespace

void save_checkpoint(const fs::path& path, const ParameterStore& store, const std::string& meta_json) {
    json header;
    header["format"] = "lvseg-checkpoint";
    header["version"] = 1;
    header["meta"] = json::parse(meta_json);
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto& p : store.all()) {
        tensors.push_back({{"name", p.name},
                           {"shape", p.value.shape()},
                           {"offset", offset},
                           {"count", p.value.size()},
                           {"trainable", p.trainable}});
        offset += 8 * p.value.size();
    }
    header["tensors"] = tensors;
    const std::string text = header.dump();
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : store.all())
        for (double v : p.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    if (!out) throw Error("write failed: " + path.string());
}

std::string load_checkpoint(const fs::path& path, ParameterStore& store) {
    const Loaded file = read_file(path, true);
    for (auto& p : store.all()) {
        const json* entry = nullptr;
        for (const auto& t : file.header.at("tensors"))
            if (t.at("name").get<std::string>() == p.name) entry = &t;
        if (!entry) throw Error("checkpoint " + path.string() + " lacks tensor '" + p.name + "'");
        if (entry->at("shape").get<Shape>() != p.value.shape())
            throw Error("checkpoint tensor '" + p.name + "' has shape " +
                        shape_string(entry->at("shape").get<Shape>()) + ", expected " + shape_string(p.value.shape()));
        const auto offset = entry->at("offset").get<std::uint64_t>();
        if (offset + 8 * p.value.size() > file.payload.size())
            throw Error("checkpoint payload truncated at '" + p.name + "'");
        for (std::size_t i = 0; i < p.value.size(); ++i)
            p.value[i] = std::bit_cast<double>(get_u64(&file.payload[offset + 8 * i]));
    }
    return file.header.at("meta").dump();
}

std::string read_checkpoint_meta(const fs::path& path) { return read_file(path, false).header.at("meta").dump(); }

}  // namespace lvseg::ad
