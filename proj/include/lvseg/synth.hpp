#pragma once

#include <cstdint>
#include <vector>

#include "lvseg/core.hpp"
#include "lvseg/io.hpp"

namespace lvseg {

// Synthetic short-axis CINE: a bright blood pool that contracts and relaxes
// once per sequence, wrapped in a dark myocardial ring, with dark papillary
// speckles hugging the endocardial border.
struct SynthConfig {
    int frames = 30;
    int rows = 64;
    int cols = 64;
    double radius_min = 9.0;        // diastolic semi-axis range, pixels
    double radius_max = 15.0;
    double aspect_jitter = 0.15;    // semi-axis ratio in [1 - j, 1 + j]
    double contraction = 0.35;      // fractional radius loss at end-systole
    double ring_width = 3.5;        // myocardium thickness, pixels
    double drift = 1.5;             // centre excursion at end-systole, pixels
    double noise = 0.05;            // additive Gaussian sigma
    int distractors = 3;            // papillary speckles per sequence
    double distractor_radius = 2.2;
    double distractor_presence = 0.55;  // per-frame visibility probability
    double dropout_probability = 0.2;   // frames with a washed-out blood pool
    double spacing_mm = 1.5;

    double blood = 0.85;
    double myocardium = 0.25;
    double background = 0.45;
    double speckle = 0.3;
};

struct SynthSample {
    CineSequence sequence;
    MaskSequence masks;
    std::vector<BoundingBox> boxes;  // tight mask bounds per frame
};

// Deterministic in (cfg, seed). Throws when the largest ellipse plus ring and
// drift cannot fit in the frame.
SynthSample synth_generate(const SynthConfig& cfg, std::uint64_t seed);

// `subjects` sequences in twin pairs (the last one unpaired when odd) with a
// 70/15/15 split. Twins share anatomy up to small jitter.
Dataset synth_dataset(const SynthConfig& cfg, int subjects, std::uint64_t seed,
                      std::vector<std::vector<BoundingBox>>* boxes = nullptr);

// Diastolic-to-systolic radius factor at frame t: 1 - a * (1 - cos(2 pi t / T)) / 2.
double contraction_factor(const SynthConfig& cfg, int t);

}  // namespace lvseg
