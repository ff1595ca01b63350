#include "lvseg/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"

namespace lvseg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RawPgm {
    int width = 0;
    int height = 0;
    int maxval = 0;
    std::vector<int> samples;
};

int read_header_int(std::istream& in, const fs::path& path) {
    // Skip whitespace and '#' comments, then read a decimal integer.
    for (;;) {
        int ch = in.peek();
        if (ch == EOF) throw Error("truncated PGM header: " + path.string());
        if (std::isspace(ch)) {
            in.get();
        } else if (ch == '#') {
            std::string dummy;
            std::getline(in, dummy);
        } else {
            break;
        }
    }
    long value = 0;
    int digits = 0;
    while (std::isdigit(in.peek())) {
        value = value * 10 + (in.get() - '0');
        if (value > 1 << 24) throw Error("PGM header value too large: " + path.string());
        ++digits;
    }
    if (digits == 0) throw Error("malformed PGM header: " + path.string());
    return static_cast<int>(value);
}

RawPgm read_raw_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5') throw Error("not a binary PGM (P5): " + path.string());
    RawPgm raw;
    raw.width = read_header_int(in, path);
    raw.height = read_header_int(in, path);
    raw.maxval = read_header_int(in, path);
    if (raw.width <= 0 || raw.height <= 0) throw Error("PGM has zero extent: " + path.string());
    if (raw.maxval <= 0 || raw.maxval > 65535) throw Error("PGM maxval out of range: " + path.string());
    if (!std::isspace(in.get())) throw Error("malformed PGM header: " + path.string());
    const std::size_t n = static_cast<std::size_t>(raw.width) * static_cast<std::size_t>(raw.height);
    const std::size_t bytes_per = raw.maxval < 256 ? 1 : 2;
    std::vector<unsigned char> buf(n * bytes_per);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw Error("truncated PGM raster: " + path.string());
    raw.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int v = bytes_per == 1 ? buf[i] : (buf[2 * i] << 8) | buf[2 * i + 1];
        if (v > raw.maxval) throw Error("PGM sample exceeds maxval: " + path.string());
        raw.samples[i] = v;
    }
    return raw;
}

void write_raw_pgm(const fs::path& path, int width, int height, int maxval, const std::vector<int>& samples) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << '\n' << maxval << '\n';
    std::vector<unsigned char> buf;
    buf.reserve(samples.size() * 2);
    for (int v : samples) {
        if (maxval < 256) {
            buf.push_back(static_cast<unsigned char>(v));
        } else {
            buf.push_back(static_cast<unsigned char>(v >> 8));
            buf.push_back(static_cast<unsigned char>(v & 0xff));
        }
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write failed: " + path.string());
}

void put_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

Image read_pgm(const fs::path& path) {
    const RawPgm raw = read_raw_pgm(path);
    Image img(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.samples.size(); ++i) img[i] = static_cast<double>(raw.samples[i]) / raw.maxval;
    return img;
}

void write_pgm(const fs::path& path, const Image& img, int maxval) {
    if (maxval <= 0 || maxval > 65535) throw Error("PGM maxval out of range");
    std::vector<int> samples(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(img[i], 0.0, 1.0);
        samples[i] = static_cast<int>(std::lround(v * maxval));
    }
    write_raw_pgm(path, img.cols(), img.rows(), maxval, samples);
}

Mask read_mask_pgm(const fs::path& path) {
    const RawPgm raw = read_raw_pgm(path);
    Mask m(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.samples.size(); ++i) {
        const int v = raw.samples[i];
        if (v != 0 && v != raw.maxval) throw Error("non-binary mask value " + std::to_string(v) + " in " + path.string());
        m[i] = v == 0 ? 0 : 1;
    }
    return m;
}

void write_mask_pgm(const fs::path& path, const Mask& mask) {
    std::vector<int> samples(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) samples[i] = mask[i] ? 255 : 0;
    write_raw_pgm(path, mask.cols(), mask.rows(), 255, samples);
}

void write_ppm(const fs::path& path, int rows, int cols, const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != static_cast<std::size_t>(rows) * cols * 3) throw Error("PPM buffer size mismatch");
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "P6\n" << cols << ' ' << rows << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

std::size_t Dataset::index_of(const std::string& subject_id) const {
    for (std::size_t i = 0; i < sequences.size(); ++i)
        if (sequences[i].subject_id == subject_id) return i;
    throw Error("unknown subject '" + subject_id + "'");
}

Dataset load_dataset(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw Error("cannot open manifest " + manifest_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    const fs::path base = manifest_path.parent_path();
    Dataset data;
    std::vector<std::string> ids;
    try {
        for (const auto& s : doc.at("subjects")) {
            CineSequence seq;
            seq.subject_id = s.at("id").get<std::string>();
            const auto spacing = s.at("spacing_mm").get<std::vector<double>>();
            if (spacing.size() != 2) throw Error("spacing_mm must have two entries for '" + seq.subject_id + "'");
            seq.spacing = {spacing[0], spacing[1]};
            data.split.twin_pair[seq.subject_id] = s.value("twin_pair", std::string{});
            const auto frames = s.at("frames").get<std::vector<std::string>>();
            const auto masks = s.at("masks").get<std::vector<std::string>>();
            if (frames.size() != masks.size())
                throw Error("subject '" + seq.subject_id + "' lists " + std::to_string(frames.size()) + " frames but " +
                            std::to_string(masks.size()) + " masks");
            MaskSequence ms;
            for (std::size_t t = 0; t < frames.size(); ++t) {
                const fs::path fp = base / frames[t];
                const fs::path mp = base / masks[t];
                seq.frames.push_back(read_pgm(fp));
                ms.masks.push_back(read_mask_pgm(mp));
                if (!seq.frames.back().same_shape(seq.frames.front()))
                    throw Error("frame size mismatch in " + fp.string());
                if (!ms.masks.back().same_shape(seq.frames.back()))
                    throw Error("mask size mismatch in " + mp.string());
            }
            validate(seq);
            validate(ms, seq);
            ids.push_back(seq.subject_id);
            data.sequences.push_back(std::move(seq));
            data.masks.push_back(std::move(ms));
        }
        if (doc.contains("split")) {
            const auto& sp = doc.at("split");
            data.split.train = sp.value("train", std::vector<std::string>{});
            data.split.validation = sp.value("validation", std::vector<std::string>{});
            data.split.test = sp.value("test", std::vector<std::string>{});
            for (const auto* part : {&data.split.train, &data.split.validation, &data.split.test})
                for (const auto& id : *part) data.index_of(id);
        } else {
            DatasetSplit s = make_split(ids, data.split.twin_pair, 0);
            data.split.train = std::move(s.train);
            data.split.validation = std::move(s.validation);
            data.split.test = std::move(s.test);
        }
    } catch (const json::exception& e) {
        throw Error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    validate(data.split);
    return data;
}

void write_dataset(const fs::path& dir, const Dataset& data) {
    fs::create_directories(dir);
    json subjects = json::array();
    for (std::size_t i = 0; i < data.sequences.size(); ++i) {
        const auto& seq = data.sequences[i];
        json frames = json::array();
        json masks = json::array();
        for (int t = 0; t < seq.length(); ++t) {
            char name[64];
            std::snprintf(name, sizeof name, "t%03d.pgm", t);
            const std::string f = "frames/" + seq.subject_id + "/" + name;
            const std::string m = "masks/" + seq.subject_id + "/" + name;
            write_pgm(dir / f, seq.frames[static_cast<std::size_t>(t)]);
            write_mask_pgm(dir / m, data.masks[i].masks[static_cast<std::size_t>(t)]);
            frames.push_back(f);
            masks.push_back(m);
        }
        auto pair = data.split.twin_pair.find(seq.subject_id);
        subjects.push_back({{"id", seq.subject_id},
                            {"twin_pair", pair == data.split.twin_pair.end() ? "" : pair->second},
                            {"spacing_mm", {seq.spacing.row_mm, seq.spacing.col_mm}},
                            {"frames", frames},
                            {"masks", masks}});
    }
    json doc = {{"subjects", subjects},
                {"split", {{"train", data.split.train}, {"validation", data.split.validation}, {"test", data.split.test}}}};
    std::ofstream out(dir / "manifest.json");
    out << doc.dump(2) << '\n';
    if (!out) throw Error("cannot write manifest in " + dir.string());
}

DatasetSplit make_split(const std::vector<std::string>& subject_ids, const std::map<std::string, std::string>& twin_pair,
                        unsigned long long seed) {
    // Group subjects by pair; an unpaired subject forms its own group.
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& id : subject_ids) {
        auto it = twin_pair.find(id);
        const std::string key = (it == twin_pair.end() || it->second.empty()) ? "solo:" + id : "pair:" + it->second;
        groups[key].push_back(id);
    }
    std::vector<std::vector<std::string>> order;
    for (auto& [key, members] : groups) order.push_back(members);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n = order.size();
    std::size_t n_val = 0;
    std::size_t n_test = 0;
    if (n >= 3) {
        n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(0.15 * static_cast<double>(n))));
        n_test = n_val;
    }
    DatasetSplit split;
    split.twin_pair = twin_pair;
    for (std::size_t g = 0; g < n; ++g) {
        auto& dst = g < n_test ? split.test : (g < n_test + n_val ? split.validation : split.train);
        dst.insert(dst.end(), order[g].begin(), order[g].end());
    }
    for (auto* part : {&split.train, &split.validation, &split.test}) std::sort(part->begin(), part->end());
    return split;
}

void write_planes(const fs::path& path, const std::vector<std::size_t>& shape, const std::vector<double>& values,
                  const std::string& extra_json) {
    std::size_t count = 1;
    for (auto s : shape) count *= s;
    if (count != values.size()) throw Error("plane shape does not match value count");
    json header = json::parse(extra_json);
    header["shape"] = shape;
    header["dtype"] = "<f8";
    const std::string text = header.dump();
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    put_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (double v : values) put_u64_le(out, std::bit_cast<std::uint64_t>(v));
    if (!out) throw Error("write failed: " + path.string());
}

std::vector<double> read_planes(const fs::path& path, std::vector<std::size_t>* shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    unsigned char len_buf[8];
    in.read(reinterpret_cast<char*>(len_buf), 8);
    if (!in) throw Error("truncated plane file " + path.string());
    const std::uint64_t len = get_u64_le(len_buf);
    if (len > (1u << 24)) throw Error("implausible plane header in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception&) {
        throw Error("malformed plane header in " + path.string());
    }
    if (header.value("dtype", std::string{}) != "<f8") throw Error("unsupported dtype in " + path.string());
    const auto dims = header.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = 1;
    for (auto d : dims) count *= d;
    std::vector<unsigned char> raw(count * 8);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw Error("truncated plane data in " + path.string());
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(get_u64_le(&raw[8 * i]));
    if (shape) *shape = dims;
    return values;
}

ProbSequence read_probs(const fs::path& path) {
    std::vector<std::size_t> shape;
    const auto values = read_planes(path, &shape);
    if (shape.size() != 3) throw Error("probability planes must be 3-D in " + path.string());
    ProbSequence probs;
    const int rows = static_cast<int>(shape[1]);
    const int cols = static_cast<int>(shape[2]);
    std::size_t k = 0;
    for (std::size_t t = 0; t < shape[0]; ++t) {
        Image img(rows, cols);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = values[k++];
        probs.probs.push_back(std::move(img));
    }
    return probs;
}

void write_probs(const fs::path& path, const ProbSequence& probs) {
    if (probs.probs.empty()) throw Error("no probability maps to write");
    const auto& f = probs.probs.front();
    std::vector<double> values;
    values.reserve(probs.probs.size() * f.size());
    for (const auto& p : probs.probs) values.insert(values.end(), p.values().begin(), p.values().end());
    write_planes(path, {probs.probs.size(), static_cast<std::size_t>(f.rows()), static_cast<std::size_t>(f.cols())},
                 values);
}

}  // namespace lvseg
