#pragma once

#include <cstdint>
#include <vector>

#include "foamqc/dataset.hpp"
#include "foamqc/rng.hpp"

namespace foamqc {

struct AugmentSpec {
  std::vector<double> profile_angles{-10.0, -5.0, 0.0, 5.0, 10.0};  // degrees
  std::vector<double> plan_angles{0.0, 90.0, 180.0, 270.0};
  double noise_sigma = 5.0;         // gray levels
  double brightness_delta = 0.10;   // drawn from [-delta, +delta], fraction of 255
  double contrast_lo = 0.90;
  double contrast_hi = 1.10;
  std::uint64_t seed = 0;

  void validate() const;
  // lcm(|plan_angles|, |profile_angles|)
  int combinations() const;
};

// Counter-clockwise rotation about the image centre, same canvas, exposed
// area filled with 0. Multiples of 90 degrees on square images (and 180 on
// any image) are exact pixel permutations; other angles use bilinear
// sampling.
GrayImage rotate(const GrayImage& img, double angle_degrees);

// v' = clamp(round(v + N(0, sigma))); pixels equal to 0 stay 0.
GrayImage add_gaussian_noise(const GrayImage& img, double sigma, Rng& rng);

// v' = clamp(round(factor * (v - mu) + mu + 255 * delta)) with mu the mean of
// the nonzero pixels; pixels equal to 0 stay 0.
GrayImage adjust_brightness_contrast(const GrayImage& img, double delta, double factor);

// Combination `index` of the pairing rule: plan views get
// plan_angles[index % P], profiles get profile_angles[index % Q], and each
// view gets its own photometric jitter seeded by (seed, group id, index, view).
ExampleGroup augment_variant(const ExampleGroup& g, const AugmentSpec& spec, int index);

// All combinations, index 0 .. combinations() - 1.
std::vector<ExampleGroup> augment_group(const ExampleGroup& g, const AugmentSpec& spec);

}  // namespace foamqc
