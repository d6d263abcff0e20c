#pragma once

#include <optional>

#include "foamqc/dataset.hpp"
#include "foamqc/image.hpp"

namespace foamqc {

struct Circle {
  int cx = 0;  // column
  int cy = 0;  // row
  int r = 0;
  friend bool operator==(const Circle&, const Circle&) = default;
};

struct CircleFit {
  Circle circle;
  long long score = 0;  // dark-minus-bright pixel count inside the circle
};

struct CircleSearchParams {
  int bright_threshold = 128;
  double radius_lo = 0.30;  // fractions of min(H, W)
  double radius_hi = 0.48;
  double center_window = 0.05;
  int step = 2;

  void validate() const;
};

// ITU-R 601 luma, rounded.
GrayImage to_grayscale(const RgbImage& rgb, ViewKind kind = ViewKind::top);

// Maps every value to the centre of its bin out of `bins` equal bins over
// [0, 256). Idempotent.
GrayImage quantize(const GrayImage& img, int bins = 10);
std::uint8_t quantize_value(std::uint8_t v, int bins = 10);

// Candidate centres lie on a grid of `step` around the image centre (within
// center_window * min(H, W)), radii on [radius_lo, radius_hi] * min(H, W), and
// only circles fully inside the image are admitted. Maximises dark minus
// bright pixel count; ties prefer the larger radius, then the centre closest
// to the image centre, then smaller (cy, cx).
CircleFit find_circle(const GrayImage& img, const CircleSearchParams& params = {});

// Pixels farther than r from the centre are set to 0.
GrayImage mask_outside(const GrayImage& img, const Circle& c);

// Square crop [cy - r, cy + r] x [cx - r, cx + r] clipped to the image.
GrayImage bound_circle(const GrayImage& img, const Circle& c);

// Moves the foreground bounding box (pixels > background_level) to the centre
// of a zero canvas of the target size, centre-cropping if it does not fit.
GrayImage center_profile(const GrayImage& img, Size2 target, std::uint8_t background_level = 0);

struct PlanResult {
  GrayImage image;
  Circle circle;
};

PlanResult preprocess_plan_view(const GrayImage& img, const CircleSearchParams& params, Size2 target, int bins = 10);
GrayImage preprocess_profile_view(const GrayImage& img, Size2 target, const std::optional<CropRect>& crop = {},
                                  int bins = 10);

// Maps a plan-view raster (for example a defect mask) through the same
// geometry as preprocess_plan_view: mask, crop, nearest resize.
PixelMatrix transform_plan_mask(const PixelMatrix& mask, const Circle& c, Size2 target);

// Runs every step on every view. Errors are rethrown as ValidationError
// naming the group and view.
ExampleGroup preprocess_group(const ExampleGroup& g, const CircleSearchParams& params = {}, Size2 target = {});

}  // namespace foamqc
