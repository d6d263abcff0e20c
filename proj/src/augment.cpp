#include "foamqc/augment.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace foamqc {

void AugmentSpec::validate() const {
  if (profile_angles.empty() || plan_angles.empty()) throw ParameterError("augment: angle lists must be non-empty");
  if (noise_sigma < 0.0) throw ParameterError("augment: noise_sigma must be >= 0");
  if (brightness_delta < 0.0) throw ParameterError("augment: brightness_delta must be >= 0");
  if (!(contrast_lo > 0.0 && contrast_lo <= contrast_hi)) throw ParameterError("augment: contrast range must be positive");
}

int AugmentSpec::combinations() const {
  return std::lcm(static_cast<int>(plan_angles.size()), static_cast<int>(profile_angles.size()));
}

namespace {

int right_angle_quarters(double angle) {
  const double turns = angle / 90.0;
  const double nearest = std::round(turns);
  if (std::abs(turns - nearest) > 1e-12) return -1;
  return static_cast<int>(((static_cast<long long>(nearest) % 4) + 4) % 4);
}

}  // namespace

GrayImage rotate(const GrayImage& img, double angle_degrees) {
  const int h = img.height(), w = img.width();
  const int quarters = right_angle_quarters(angle_degrees);
  if (quarters == 0) return img;
  GrayImage out(h, w, img.view_kind, 0);
  out.pixel_pitch = img.pixel_pitch;
  if (quarters == 2) {
    out.pixels = img.pixels.reverse();
    return out;
  }
  if (quarters > 0 && h == w) {
    const int n = h;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        out(y, x) = quarters == 1 ? img(x, n - 1 - y) : img(n - 1 - x, y);
    return out;
  }

  // Inverse mapping: source = R(-theta) * (dst - centre) in y-down coordinates.
  const double theta = angle_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  auto at = [&](int y, int x) -> double {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : static_cast<double>(img(y, x));
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + dx * c - dy * s;
      const double sy = cy + dx * s + dy * c;
      if (sx < -1.0 || sx > w || sy < -1.0 || sy > h) continue;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                       fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      out(y, x) = round_u8(v);
    }
  return out;
}

GrayImage add_gaussian_noise(const GrayImage& img, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ParameterError("noise sigma must be >= 0");
  if (sigma == 0.0) return img;
  std::normal_distribution<double> noise(0.0, sigma);
  GrayImage out = img;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const std::uint8_t v = img(y, x);
      const double n = noise(rng);  // drawn for every pixel so the stream does not depend on content
      if (v != 0) out(y, x) = round_u8(v + n);
    }
  return out;
}

GrayImage adjust_brightness_contrast(const GrayImage& img, double delta, double factor) {
  if (!(factor > 0.0)) throw ParameterError("contrast factor must be > 0");
  double sum = 0.0;
  long long count = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (img(y, x) != 0) {
        sum += img(y, x);
        ++count;
      }
  if (count == 0) return img;
  const double mu = sum / static_cast<double>(count);
  GrayImage out = img;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (img(y, x) != 0) out(y, x) = round_u8(factor * (img(y, x) - mu) + mu + 255.0 * delta);
  return out;
}

ExampleGroup augment_variant(const ExampleGroup& g, const AugmentSpec& spec, int index) {
  spec.validate();
  ExampleGroup out;
  out.id = g.id;
  out.raw_label = g.raw_label;
  out.source_paths = g.source_paths;
  const auto p = static_cast<std::size_t>(index) % spec.plan_angles.size();
  const auto q = static_cast<std::size_t>(index) % spec.profile_angles.size();
  for (const auto& [view, img] : g.images) {
    const double angle = is_plan_view(view) ? spec.plan_angles[p] : spec.profile_angles[q];
    Rng rng(mix_seed(spec.seed, fnv1a(g.id), static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(view)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double delta = spec.brightness_delta * (2.0 * unit(rng) - 1.0);
    const double factor = spec.contrast_lo + (spec.contrast_hi - spec.contrast_lo) * unit(rng);
    GrayImage v = rotate(img, angle);
    if (delta != 0.0 || factor != 1.0) v = adjust_brightness_contrast(v, delta, factor);
    out.images[view] = add_gaussian_noise(v, spec.noise_sigma, rng);
  }
  return out;
}

std::vector<ExampleGroup> augment_group(const ExampleGroup& g, const AugmentSpec& spec) {
  spec.validate();
  std::vector<ExampleGroup> out;
  const int n = spec.combinations();
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(augment_variant(g, spec, i));
  return out;
}

}  // namespace foamqc
