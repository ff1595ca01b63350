#include "lvseg/image_ops.hpp"

#include <algorithm>
#include <cmath>

namespace lvseg {
namespace {

struct Tap {
    int lo;
    int hi;
    double frac;
};

// Half-pixel-centred source taps for each destination index.
std::vector<Tap> taps(int src, int dst) {
    std::vector<Tap> out(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int lo = static_cast<int>(std::floor(s));
        const int hi = std::min(lo + 1, src - 1);
        out[static_cast<std::size_t>(i)] = {lo, hi, s - lo};
    }
    return out;
}

void check_target(int rows, int cols) {
    if (rows < 2 || cols < 2) throw Error("resize target must be at least 2x2");
}

}  // namespace

Image resize(const Image& src, int rows, int cols) {
    check_target(rows, cols);
    if (src.empty()) throw Error("resize of an empty image");
    if (src.rows() == rows && src.cols() == cols) return src;
    const auto ty = taps(src.rows(), rows);
    const auto tx = taps(src.cols(), cols);
    Image out(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const Tap& a = ty[static_cast<std::size_t>(r)];
        for (int c = 0; c < cols; ++c) {
            const Tap& b = tx[static_cast<std::size_t>(c)];
            const double top = src(a.lo, b.lo) + b.frac * (src(a.lo, b.hi) - src(a.lo, b.lo));
            const double bot = src(a.hi, b.lo) + b.frac * (src(a.hi, b.hi) - src(a.hi, b.lo));
            out(r, c) = top + a.frac * (bot - top);
        }
    }
    return out;
}

Mask resize(const Mask& src, int rows, int cols) {
    Image tmp(src.rows(), src.cols());
    for (std::size_t i = 0; i < src.size(); ++i) tmp[i] = src[i] ? 1.0 : 0.0;
    return threshold(resize(tmp, rows, cols), 0.5);
}

CineSequence resize_sequence(const CineSequence& seq, int rows, int cols) {
    check_target(rows, cols);
    CineSequence out;
    out.subject_id = seq.subject_id;
    out.spacing.row_mm = seq.spacing.row_mm * seq.rows() / rows;
    out.spacing.col_mm = seq.spacing.col_mm * seq.cols() / cols;
    out.frames.reserve(seq.frames.size());
    for (const auto& f : seq.frames) out.frames.push_back(resize(f, rows, cols));
    return out;
}

MaskSequence resize_sequence(const MaskSequence& masks, int rows, int cols) {
    MaskSequence out;
    for (const auto& m : masks.masks) out.masks.push_back(resize(m, rows, cols));
    return out;
}

ProbSequence resize_sequence(const ProbSequence& probs, int rows, int cols) {
    ProbSequence out;
    for (const auto& p : probs.probs) out.probs.push_back(resize(p, rows, cols));
    return out;
}

Mask pad_mask(const Mask& mask, int pad) {
    if (pad < 0) throw Error("negative padding");
    Mask out(mask.rows() + 2 * pad, mask.cols() + 2 * pad, 0);
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c) out(r + pad, c + pad) = mask(r, c);
    return out;
}

BoundingBox dilate_box(const BoundingBox& box, int margin, int rows, int cols) {
    if (!box.valid_for(rows, cols)) throw Error("bounding box does not fit the image");
    if (margin < 0) throw Error("negative crop margin");
    BoundingBox out{std::max(0, box.x0 - margin), std::max(0, box.y0 - margin), std::min(cols, box.x1 + margin),
                    std::min(rows, box.y1 + margin)};
    if (out.width() <= 0 || out.height() <= 0) throw Error("crop window does not intersect the image");
    return out;
}

Image crop(const Image& img, const BoundingBox& box) {
    if (!box.valid_for(img.rows(), img.cols())) throw Error("crop window outside the image");
    Image out(box.height(), box.width());
    for (int r = 0; r < box.height(); ++r)
        for (int c = 0; c < box.width(); ++c) out(r, c) = img(box.y0 + r, box.x0 + c);
    return out;
}

Mask crop(const Mask& mask, const BoundingBox& box) {
    if (!box.valid_for(mask.rows(), mask.cols())) throw Error("crop window outside the mask");
    Mask out(box.height(), box.width());
    for (int r = 0; r < box.height(); ++r)
        for (int c = 0; c < box.width(); ++c) out(r, c) = mask(box.y0 + r, box.x0 + c);
    return out;
}

CineSequence crop_to_bbox(const CineSequence& seq, const BoundingBox& box, int margin) {
    const BoundingBox window = dilate_box(box, margin, seq.rows(), seq.cols());
    CineSequence out;
    out.subject_id = seq.subject_id;
    out.spacing = seq.spacing;
    out.frames.reserve(seq.frames.size());
    for (const auto& f : seq.frames) out.frames.push_back(crop(f, window));
    return out;
}

MaskSequence crop_to_bbox(const MaskSequence& masks, const BoundingBox& box, int margin) {
    if (masks.masks.empty()) return {};
    const Mask& first = masks.masks.front();
    const BoundingBox window = dilate_box(box, margin, first.rows(), first.cols());
    MaskSequence out;
    for (const auto& m : masks.masks) out.masks.push_back(crop(m, window));
    return out;
}

Mask uncrop(const Mask& mask, const BoundingBox& window, int rows, int cols) {
    if (!window.valid_for(rows, cols) || window.height() != mask.rows() || window.width() != mask.cols())
        throw Error("uncrop window does not match the mask");
    Mask out(rows, cols, 0);
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c) out(window.y0 + r, window.x0 + c) = mask(r, c);
    return out;
}

}  // namespace lvseg
