#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lvseg/core.hpp"

namespace lvseg::metrics {

// 2|a & b| / (|a| + |b|); 1 when both masks are empty.
double dice(const Mask& a, const Mask& b);

struct Point {
    int row = 0;
    int col = 0;
    friend bool operator==(const Point&, const Point&) = default;
};
using Contour = std::vector<Point>;

// Foreground pixels with a background or out-of-image 8-neighbour, raster order.
Contour extract_contour(const Mask& mask);

struct ApdOptions {
    bool one_directional = false;             // prediction -> reference only
    std::optional<double> empty_penalty_mm;   // default: image diagonal in mm
};

// Average perpendicular distance in mm between the contours of `pred` and
// `truth`: the mean nearest-point distance from each contour to the other,
// averaged over both directions.
double apd(const Mask& pred, const Mask& truth, const PixelSpacing& spacing, const ApdOptions& opts = {});

// Squared distance in mm^2 from every pixel to the nearest contour point;
// +inf everywhere when the contour is empty.
Image squared_distance_map(const Contour& contour, int rows, int cols, const PixelSpacing& spacing);

// (3d - 2) / d; -inf at d = 0.
double conformity(double dice_value);

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
};
Summary summarize(const std::vector<double>& values);
// Table cell "mean(std)" with four decimals, e.g. "0.9745(0.0163)".
std::string format_cell(const Summary& s);

struct MetricReport {
    std::string subject_id;
    std::vector<double> dice;
    std::vector<double> apd_mm;
    std::vector<double> conformity;
    Summary dice_summary;
    Summary apd_summary;
    Summary conformity_summary;
};

MetricReport evaluate_sequence(const MaskSequence& pred, const MaskSequence& truth, const PixelSpacing& spacing,
                               const ApdOptions& opts = {});

// One table row: pooled per-frame statistics plus the per-subject roll-up
// (statistics of the subjects' mean values).
struct AggregateReport {
    std::string label;
    int subjects = 0;
    int frames = 0;
    Summary dice;
    Summary apd_mm;
    Summary conformity;
    Summary subject_dice;
    Summary subject_apd_mm;
    Summary subject_conformity;
};

AggregateReport aggregate(const std::string& label, const std::vector<MetricReport>& reports);

// Aligned text table with the columns Algorithms | DICE (%) | APD (mm) | C(%).
std::string format_table(const std::vector<AggregateReport>& rows);

std::string to_json(const MetricReport& report);
std::string to_json(const AggregateReport& report);
AggregateReport aggregate_from_json(const std::string& text);

}  // namespace lvseg::metrics
