#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace lvseg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Row-major 2D raster.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill) {
        if (rows < 0 || cols < 0) throw Error("grid extents must be non-negative");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }

    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    template <typename U>
    bool same_shape(const Grid<U>& o) const { return rows_ == o.rows() && cols_ == o.cols(); }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;

struct PixelSpacing {
    double row_mm = 1.0;
    double col_mm = 1.0;
};

struct CineSequence {
    std::string subject_id;
    PixelSpacing spacing;
    std::vector<Image> frames;

    int length() const { return static_cast<int>(frames.size()); }
    int rows() const { return frames.empty() ? 0 : frames.front().rows(); }
    int cols() const { return frames.empty() ? 0 : frames.front().cols(); }
};

struct MaskSequence {
    std::vector<Mask> masks;

    int length() const { return static_cast<int>(masks.size()); }
};

// Foreground probability per pixel per frame.
struct ProbSequence {
    std::vector<Image> probs;

    int length() const { return static_cast<int>(probs.size()); }
};

// Half-open pixel box: columns [x0, x1), rows [y0, y1).
struct BoundingBox {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }
    bool valid_for(int rows, int cols) const {
        return 0 <= x0 && x0 < x1 && x1 <= cols && 0 <= y0 && y0 < y1 && y1 <= rows;
    }
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;
    std::map<std::string, std::string> twin_pair;  // subject id -> pair id
};

// Throws Error when the sequence breaks its invariants.
void validate(const CineSequence& seq);
void validate(const MaskSequence& masks, const CineSequence& seq);
void validate(const ProbSequence& probs, const CineSequence& seq);
// Disjoint splits, each twin pair kept together.
void validate(const DatasetSplit& split);

Mask threshold(const Image& prob, double level = 0.5);
MaskSequence threshold(const ProbSequence& probs, double level = 0.5);

// Tight bounds of the foreground; throws on an empty mask.
BoundingBox mask_bounds(const Mask& mask);

long mask_area(const Mask& mask);

}  // namespace lvseg
