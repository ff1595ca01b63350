#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "lvseg/core.hpp"

namespace lvseg::sf {

// Region indices stored in a labeling.
inline constexpr std::uint8_t kLv = 1;
inline constexpr std::uint8_t kBackground = 2;

struct Lambdas {
    double motion = 0.5;    // lambda_m
    double time = 1.0;      // lambda_t
    double space = 0.5;     // lambda_s
    double coupling = 2.0;  // lambda_c

    void validate() const;
    std::string to_json() const;
    // Keys: lambda_m, lambda_t, lambda_s, lambda_c. Missing keys keep defaults.
    static Lambdas from_json(const std::string& text);
};

struct SfParams {
    Lambdas lambdas;
    double eps = 1e-3;                 // Charbonnier
    std::optional<double> flow_cap;    // default rows / 4
    int warps = 3;
    int steps = 20;
    double theta_damping = 1e-8;
    int icm_sweeps = 10;
    int outer_iters = 5;

    void validate() const;
    double cap_for(int rows) const { return flow_cap ? *flow_cap : rows / 4.0; }
    std::string to_json() const;
    static SfParams from_json(const std::string& text);
};

// Displacements from frame t to t + 1, one plane pair per frame pair.
struct FlowField {
    std::vector<Image> u;  // columns
    std::vector<Image> v;  // rows

    int pairs() const { return static_cast<int>(u.size()); }
    static FlowField zeros(int pairs, int rows, int cols);
};

// Region index per pixel per frame (kLv or kBackground).
using Labeling = std::vector<Mask>;

// Affine motion per region: u = a0 + a1 x + a2 y, v = a3 + a4 x + a5 y with
// x the column and y the row in pixels. Index [pair][region - 1].
using Affine = std::array<double, 6>;
using MotionParams = std::vector<std::array<Affine, 2>>;

MotionParams zero_motion(int pairs);
Labeling to_labeling(const MaskSequence& masks);
MaskSequence to_masks(const Labeling& g);

// Bilinear sample of `image` at (row + v, col + u), clamped to the border.
Image warp(const Image& image, const Image& u, const Image& v);
double sample(const Image& image, double row, double col);

struct EnergyTerms {
    double data = 0.0;
    double motion = 0.0;
    double time = 0.0;
    double space = 0.0;
    double coupling = 0.0;
    double total = 0.0;
};

EnergyTerms energy_terms(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                         const MaskSequence& y, const SfParams& params);

FlowField update_flow(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                      const SfParams& params);
MotionParams update_theta(const FlowField& w, const Labeling& g, const MotionParams& theta, const SfParams& params);
Labeling update_regions(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                        const MaskSequence& y, const SfParams& params);

struct SfResult {
    MaskSequence masks;
    FlowField flow;
    MotionParams theta;
    std::vector<double> trace;  // total energy at start and after each outer iteration
};

SfResult refine_sf(const CineSequence& x, const MaskSequence& y, const SfParams& params);

}  // namespace lvseg::sf
