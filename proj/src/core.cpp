#include "lvseg/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace lvseg {

void validate(const CineSequence& seq) {
    if (seq.frames.empty()) throw Error("sequence '" + seq.subject_id + "' has no frames");
    if (!(seq.spacing.row_mm > 0.0) || !(seq.spacing.col_mm > 0.0))
        throw Error("sequence '" + seq.subject_id + "' has non-positive pixel spacing");
    const Image& first = seq.frames.front();
    if (first.empty()) throw Error("sequence '" + seq.subject_id + "' has empty frames");
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        const Image& f = seq.frames[t];
        if (!f.same_shape(first))
            throw Error("sequence '" + seq.subject_id + "' frame " + std::to_string(t) + " size mismatch");
        for (double v : f.values()) {
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw Error("sequence '" + seq.subject_id + "' frame " + std::to_string(t) +
                            " intensity outside [0,1]");
        }
    }
}

void validate(const MaskSequence& masks, const CineSequence& seq) {
    if (masks.length() != seq.length())
        throw Error("mask sequence length " + std::to_string(masks.length()) + " != frame count " +
                    std::to_string(seq.length()));
    for (std::size_t t = 0; t < masks.masks.size(); ++t) {
        const Mask& m = masks.masks[t];
        if (!m.same_shape(seq.frames[t])) throw Error("mask " + std::to_string(t) + " size mismatch");
        for (auto v : m.values())
            if (v > 1) throw Error("non-binary mask value in mask " + std::to_string(t));
    }
}

void validate(const ProbSequence& probs, const CineSequence& seq) {
    if (probs.length() != seq.length()) throw Error("probability sequence length mismatch");
    for (std::size_t t = 0; t < probs.probs.size(); ++t) {
        if (!probs.probs[t].same_shape(seq.frames[t]))
            throw Error("probability map " + std::to_string(t) + " size mismatch");
        for (double v : probs.probs[t].values())
            if (!(v >= 0.0 && v <= 1.0)) throw Error("probability outside [0,1] in frame " + std::to_string(t));
    }
}

void validate(const DatasetSplit& split) {
    std::map<std::string, int> where;
    const std::vector<std::string>* parts[3] = {&split.train, &split.validation, &split.test};
    for (int p = 0; p < 3; ++p) {
        for (const auto& id : *parts[p]) {
            if (!where.emplace(id, p).second) throw Error("subject '" + id + "' appears in more than one split");
        }
    }
    std::map<std::string, int> pair_part;
    for (const auto& [id, part] : where) {
        auto it = split.twin_pair.find(id);
        if (it == split.twin_pair.end() || it->second.empty()) continue;
        auto [pos, inserted] = pair_part.emplace(it->second, part);
        if (!inserted && pos->second != part) throw Error("twin pair separated: '" + it->second + "'");
    }
}

Mask threshold(const Image& prob, double level) {
    Mask out(prob.rows(), prob.cols());
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= level ? 1 : 0;
    return out;
}

MaskSequence threshold(const ProbSequence& probs, double level) {
    MaskSequence out;
    out.masks.reserve(probs.probs.size());
    for (const auto& p : probs.probs) out.masks.push_back(threshold(p, level));
    return out;
}

BoundingBox mask_bounds(const Mask& mask) {
    BoundingBox b{mask.cols(), mask.rows(), -1, -1};
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < mask.cols(); ++c) {
            if (!mask(r, c)) continue;
            b.x0 = std::min(b.x0, c);
            b.y0 = std::min(b.y0, r);
            b.x1 = std::max(b.x1, c + 1);
            b.y1 = std::max(b.y1, r + 1);
        }
    }
    if (b.x1 < 0) throw Error("bounds of an empty mask");
    return b;
}

long mask_area(const Mask& mask) {
    long n = 0;
    for (auto v : mask.values()) n += v ? 1 : 0;
    return n;
}

}  // namespace lvseg
