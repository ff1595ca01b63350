#pragma once

#include "lvseg/core.hpp"

namespace lvseg {

// Bilinear resampling with half-pixel-centred sample positions.
Image resize(const Image& src, int rows, int cols);
// Bilinear resample of the 0/1 indicator, thresholded at 0.5.
Mask resize(const Mask& src, int rows, int cols);

// Resizes every frame; pixel spacing scales by the size ratio.
CineSequence resize_sequence(const CineSequence& seq, int rows, int cols);
MaskSequence resize_sequence(const MaskSequence& masks, int rows, int cols);
ProbSequence resize_sequence(const ProbSequence& probs, int rows, int cols);

// Zero border of `pad` pixels on every side.
Mask pad_mask(const Mask& mask, int pad);

// `box` dilated by `margin` and clamped to a rows x cols image.
BoundingBox dilate_box(const BoundingBox& box, int margin, int rows, int cols);

Image crop(const Image& img, const BoundingBox& box);
Mask crop(const Mask& mask, const BoundingBox& box);

// Same window for every frame: `box` grown by `margin`, clamped to the image.
CineSequence crop_to_bbox(const CineSequence& seq, const BoundingBox& box, int margin);
MaskSequence crop_to_bbox(const MaskSequence& masks, const BoundingBox& box, int margin);

// Writes `mask` (in crop space) back into a full-size canvas at `window`.
Mask uncrop(const Mask& mask, const BoundingBox& window, int rows, int cols);

}  // namespace lvseg
