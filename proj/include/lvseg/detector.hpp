#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "lvseg/autodiff.hpp"
#include "lvseg/core.hpp"

namespace lvseg::det {

struct DetectorConfig {
    int input_rows = 64;
    int input_cols = 64;
    int base_channels = 8;  // trunk widths base, 2 base, 4 base
    int hidden = 64;        // units of the ReLU layer before the output; 0 removes it
    int epochs = 40;
    int batch = 8;          // frames per Adadelta update
    double lr = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
    std::string to_json() const;
    static DetectorConfig from_json(const std::string& text);
};

struct BoxSample {
    Image frame;
    BoundingBox box;  // pixel units of `frame`
};

// Three conv3+ReLU+maxpool blocks, an optional hidden ReLU layer and a linear
// layer to four normalised coordinates (x0, y0, x1, y1) / (cols, rows, cols, rows).
class BoxRegressor {
public:
    explicit BoxRegressor(const DetectorConfig& cfg);
    BoxRegressor(const BoxRegressor&) = delete;
    BoxRegressor& operator=(const BoxRegressor&) = delete;
    BoxRegressor(BoxRegressor&&) = default;
    BoxRegressor& operator=(BoxRegressor&&) = default;

    const DetectorConfig& config() const { return cfg_; }
    ad::ParameterStore& params() { return store_; }
    const ad::ParameterStore& params() const { return store_; }

    // Raw regression output [4] for a frame already at the input size.
    ad::Var forward(ad::Graph& g, ad::Var frame);

private:
    DetectorConfig cfg_;
    ad::ParameterStore store_;
    std::vector<std::pair<ad::Parameter*, ad::Parameter*>> trunk_;
    ad::Parameter* hidden_w_ = nullptr;
    ad::Parameter* hidden_b_ = nullptr;
    ad::Parameter* fc_w_ = nullptr;
    ad::Parameter* fc_b_ = nullptr;
};

// Normalised target for a box inside a rows x cols frame.
ad::Tensor normalized_box(const BoundingBox& box, int rows, int cols);
// Clamps to [0,1], orders each coordinate pair, scales to pixels and rounds;
// the result is always a valid box of at least one pixel.
BoundingBox denormalize_box(std::span<const double> coords, int rows, int cols);

// Frames of any size are resized to the network input first.
BoundingBox detect(BoxRegressor& reg, const Image& frame);
std::vector<BoundingBox> detect_sequence(BoxRegressor& reg, const CineSequence& seq);

// Mean squared error of normalised coordinates, minimised with Adadelta.
// Returns the mean training loss per epoch; one JSON line per epoch to `log`.
std::vector<double> train_detector(BoxRegressor& reg, const std::vector<BoxSample>& data, std::ostream* log = nullptr);

// Pixel-area intersection over union of half-open boxes.
double iou(const BoundingBox& a, const BoundingBox& b);
// Bounding hull of per-frame boxes.
BoundingBox sequence_box(std::span<const BoundingBox> boxes);

void save(const BoxRegressor& reg, const std::filesystem::path& path);
BoxRegressor load_detector(const std::filesystem::path& path);

}  // namespace lvseg::det
