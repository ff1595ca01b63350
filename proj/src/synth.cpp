#include "lvseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace lvseg {
namespace {

struct Speckle {
    double angle;      // polar angle in the ellipse frame
    double radial;     // centre position as a fraction of the local radius
    double size;       // radius in pixels
};

struct Anatomy {
    double semi_a;     // diastolic semi-axes, pixels
    double semi_b;
    double orientation;
    double cy;
    double cx;
    double drift_angle;
    double texture_phase_r;
    double texture_phase_c;
    std::vector<Speckle> speckles;
};

double systolic_phase(int t, int frames) {
    if (frames <= 1) return 0.0;
    return 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * t / frames));
}

double outer_extent(const SynthConfig& cfg, double semi) {
    return semi + cfg.ring_width + cfg.drift + 1.0;
}

Anatomy draw_anatomy(const SynthConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Anatomy a{};
    a.semi_a = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * unit(rng);
    a.semi_b = a.semi_a * (1.0 - cfg.aspect_jitter + 2.0 * cfg.aspect_jitter * unit(rng));
    a.orientation = std::numbers::pi * unit(rng);
    a.drift_angle = 2.0 * std::numbers::pi * unit(rng);
    a.texture_phase_r = 2.0 * std::numbers::pi * unit(rng);
    a.texture_phase_c = 2.0 * std::numbers::pi * unit(rng);
    const double reach = outer_extent(cfg, std::max(a.semi_a, a.semi_b));
    const double lo_r = reach;
    const double hi_r = cfg.rows - 1 - reach;
    const double lo_c = reach;
    const double hi_c = cfg.cols - 1 - reach;
    if (lo_r > hi_r || lo_c > hi_c) throw Error("synthetic ellipse does not fit inside the frame");
    a.cy = lo_r + (hi_r - lo_r) * unit(rng);
    a.cx = lo_c + (hi_c - lo_c) * unit(rng);
    for (int k = 0; k < cfg.distractors; ++k) {
        Speckle s{};
        s.angle = 2.0 * std::numbers::pi * unit(rng);
        s.radial = 0.72 + 0.22 * unit(rng);
        s.size = cfg.distractor_radius * (0.8 + 0.4 * unit(rng));
        a.speckles.push_back(s);
    }
    return a;
}

SynthSample render(const SynthConfig& cfg, const Anatomy& an, std::mt19937_64& rng) {
    if (cfg.frames < 1 || cfg.rows < 4 || cfg.cols < 4) throw Error("synthetic sequence needs T >= 1 and frames >= 4x4");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SynthSample out;
    out.sequence.spacing = {cfg.spacing_mm, cfg.spacing_mm};
    const double co = std::cos(an.orientation);
    const double si = std::sin(an.orientation);

    for (int t = 0; t < cfg.frames; ++t) {
        const double phase = systolic_phase(t, cfg.frames);
        const double f = contraction_factor(cfg, t);
        const double A = an.semi_a * f;
        const double B = an.semi_b * f;
        const double cy = an.cy + cfg.drift * phase * std::sin(an.drift_angle);
        const double cx = an.cx + cfg.drift * phase * std::cos(an.drift_angle);
        const bool dropout = unit(rng) < cfg.dropout_probability;
        const double blood = dropout ? cfg.background + 0.35 * (cfg.blood - cfg.background) : cfg.blood;

        std::vector<bool> visible(an.speckles.size());
        for (std::size_t k = 0; k < visible.size(); ++k) visible[k] = unit(rng) < cfg.distractor_presence;

        Image img(cfg.rows, cfg.cols);
        Mask mask(cfg.rows, cfg.cols);
        for (int r = 0; r < cfg.rows; ++r) {
            for (int c = 0; c < cfg.cols; ++c) {
                const double dy = r - cy;
                const double dx = c - cx;
                const double u = dx * co + dy * si;
                const double v = -dx * si + dy * co;
                const double inner = (u / A) * (u / A) + (v / B) * (v / B);
                const double Ao = A + cfg.ring_width;
                const double Bo = B + cfg.ring_width;
                const double outer = (u / Ao) * (u / Ao) + (v / Bo) * (v / Bo);
                double value;
                if (inner <= 1.0) {
                    mask(r, c) = 1;
                    value = blood;
                    for (std::size_t k = 0; k < an.speckles.size(); ++k) {
                        if (!visible[k]) continue;
                        const Speckle& s = an.speckles[k];
                        const double su = s.radial * A * std::cos(s.angle);
                        const double sv = s.radial * B * std::sin(s.angle);
                        const double du = u - su;
                        const double dv = v - sv;
                        if (du * du + dv * dv <= s.size * s.size) value = cfg.speckle;
                    }
                } else if (outer <= 1.0) {
                    value = cfg.myocardium;
                } else {
                    value = cfg.background + 0.08 * std::sin(0.21 * r + an.texture_phase_r) *
                                                 std::cos(0.17 * c + an.texture_phase_c);
                }
                if (cfg.noise > 0.0) value += cfg.noise * gauss(rng);
                // 8-bit quantisation keeps PGM round-trips exact.
                img(r, c) = std::round(std::clamp(value, 0.0, 1.0) * 255.0) / 255.0;
            }
        }
        out.boxes.push_back(mask_bounds(mask));
        out.sequence.frames.push_back(std::move(img));
        out.masks.masks.push_back(std::move(mask));
    }
    return out;
}

}  // namespace

double contraction_factor(const SynthConfig& cfg, int t) {
    return 1.0 - cfg.contraction * systolic_phase(t, cfg.frames);
}

SynthSample synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 anatomy_rng(seed);
    const Anatomy an = draw_anatomy(cfg, anatomy_rng);
    std::mt19937_64 detail_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    SynthSample s = render(cfg, an, detail_rng);
    s.sequence.subject_id = "synth-" + std::to_string(seed);
    return s;
}

Dataset synth_dataset(const SynthConfig& cfg, int subjects, std::uint64_t seed,
                      std::vector<std::vector<BoundingBox>>* boxes) {
    if (subjects < 1) throw Error("synthetic dataset needs at least one subject");
    Dataset data;
    std::vector<std::string> ids;
    std::mt19937_64 seeds(seed);
    const int pairs = (subjects + 1) / 2;
    int made = 0;
    for (int p = 0; p < pairs; ++p) {
        std::mt19937_64 anatomy_rng(seeds());
        const Anatomy shared = draw_anatomy(cfg, anatomy_rng);
        std::uniform_real_distribution<double> jitter(-0.05, 0.05);
        const std::string pair_id = "pair" + std::to_string(p);
        for (int twin = 0; twin < 2 && made < subjects; ++twin, ++made) {
            std::mt19937_64 detail_rng(seeds());
            Anatomy an = shared;
            if (twin == 1) {
                an.semi_a *= 1.0 + jitter(detail_rng);
                an.semi_b *= 1.0 + jitter(detail_rng);
                an.orientation += jitter(detail_rng);
                // Re-draw speckle placement; twins share shape, not papillary layout.
                std::uniform_real_distribution<double> unit(0.0, 1.0);
                for (auto& s : an.speckles) {
                    s.angle = 2.0 * std::numbers::pi * unit(detail_rng);
                    s.radial = 0.72 + 0.22 * unit(detail_rng);
                }
                const double reach = outer_extent(cfg, std::max(an.semi_a, an.semi_b));
                if (reach > cfg.rows - 1 - reach || reach > cfg.cols - 1 - reach)
                    throw Error("synthetic ellipse does not fit inside the frame");
                an.cy = std::clamp(an.cy, reach, cfg.rows - 1 - reach);
                an.cx = std::clamp(an.cx, reach, cfg.cols - 1 - reach);
            }
            SynthSample s = render(cfg, an, detail_rng);
            char id[32];
            std::snprintf(id, sizeof id, "s%03d", made);
            s.sequence.subject_id = id;
            data.split.twin_pair[id] = subjects - made == 1 && twin == 0 ? std::string{} : pair_id;
            ids.push_back(id);
            data.sequences.push_back(std::move(s.sequence));
            data.masks.push_back(std::move(s.masks));
            if (boxes) boxes->push_back(std::move(s.boxes));
        }
    }
    DatasetSplit split = make_split(ids, data.split.twin_pair, seed);
    data.split.train = std::move(split.train);
    data.split.validation = std::move(split.validation);
    data.split.test = std::move(split.test);
    return data;
}

}  // namespace lvseg
