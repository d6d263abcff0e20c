#include "foamqc/preprocess.hpp"

#include <cmath>
#include <vector>

namespace foamqc {

void CircleSearchParams::validate() const {
  if (!(radius_lo > 0.0 && radius_lo < radius_hi && radius_hi <= 0.5))
    throw ParameterError("circle search: need 0 < radius_lo < radius_hi <= 0.5");
  if (step < 1) throw ParameterError("circle search: step must be >= 1");
  if (center_window < 0.0) throw ParameterError("circle search: center_window must be >= 0");
  if (bright_threshold < 0 || bright_threshold > 256) throw ParameterError("circle search: bad bright_threshold");
}

GrayImage to_grayscale(const RgbImage& rgb, ViewKind kind) {
  const Eigen::MatrixXd luma =
      0.299 * rgb.r.cast<double>() + 0.587 * rgb.g.cast<double>() + 0.114 * rgb.b.cast<double>();
  // Snap to the nearest 1e-9 first so values like 29.9 + 88.05 + 5.7 = 123.65
  // are not perturbed across a rounding boundary by binary representation.
  GrayImage out(luma.unaryExpr([](double v) { return round_u8(std::round(v * 1e9) / 1e9); }), kind);
  return out;
}

std::uint8_t quantize_value(std::uint8_t v, int bins) {
  const int bin = std::min(v * bins / 256, bins - 1);
  return round_u8((bin + 0.5) * 256.0 / bins - 0.5);
}

GrayImage quantize(const GrayImage& img, int bins) {
  if (bins < 2) throw ParameterError("quantize: bins must be >= 2");
  std::array<std::uint8_t, 256> table{};
  for (int v = 0; v < 256; ++v) table[v] = quantize_value(static_cast<std::uint8_t>(v), bins);
  GrayImage out = img;
  out.pixels = img.pixels.unaryExpr([&](std::uint8_t v) { return table[v]; });
  return out;
}

CircleFit find_circle(const GrayImage& img, const CircleSearchParams& params) {
  params.validate();
  if (!is_plan_view(img.view_kind))
    throw ValidationError("find_circle applies to plan views, got " + std::string(to_string(img.view_kind)));
  const int h = img.height(), w = img.width();
  const int m = std::min(h, w);
  const int window = static_cast<int>(std::floor(params.center_window * m + 1e-9));
  const int r_lo = static_cast<int>(std::ceil(params.radius_lo * m - 1e-9));
  const int r_hi = static_cast<int>(std::floor(params.radius_hi * m + 1e-9));
  const int cx0 = w / 2, cy0 = h / 2;

  // prefix(y, x) = number of dark pixels in row y with column < x.
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> prefix(h, w + 1);
  for (int y = 0; y < h; ++y) {
    prefix(y, 0) = 0;
    for (int x = 0; x < w; ++x) prefix(y, x + 1) = prefix(y, x) + (img(y, x) < params.bright_threshold ? 1 : 0);
  }

  std::vector<int> offsets;
  for (int k = 0; k * params.step <= window; ++k) {
    offsets.push_back(k * params.step);
    if (k > 0) offsets.push_back(-k * params.step);
  }
  std::sort(offsets.begin(), offsets.end());

  std::optional<CircleFit> best;
  auto centre_dist2 = [&](const Circle& c) {
    return static_cast<long long>(c.cx - cx0) * (c.cx - cx0) + static_cast<long long>(c.cy - cy0) * (c.cy - cy0);
  };
  auto better = [&](const CircleFit& a, const CircleFit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.circle.r != b.circle.r) return a.circle.r > b.circle.r;
    if (centre_dist2(a.circle) != centre_dist2(b.circle)) return centre_dist2(a.circle) < centre_dist2(b.circle);
    if (a.circle.cy != b.circle.cy) return a.circle.cy < b.circle.cy;
    return a.circle.cx < b.circle.cx;
  };
  for (int r = r_lo; r <= r_hi; r += params.step) {
    std::vector<int> half(static_cast<std::size_t>(r) + 1);
    for (int dy = 0; dy <= r; ++dy) half[dy] = static_cast<int>(std::floor(std::sqrt(static_cast<double>(r) * r - static_cast<double>(dy) * dy) + 1e-9));
    for (int oy : offsets) {
      const int cy = cy0 + oy;
      if (cy - r < 0 || cy + r > h - 1) continue;
      for (int ox : offsets) {
        const int cx = cx0 + ox;
        if (cx - r < 0 || cx + r > w - 1) continue;
        long long dark = 0, total = 0;
        for (int dy = -r; dy <= r; ++dy) {
          const int hw = half[std::abs(dy)];
          const int y = cy + dy;
          dark += prefix(y, cx + hw + 1) - prefix(y, cx - hw);
          total += 2 * hw + 1;
        }
        CircleFit fit{Circle{cx, cy, r}, 2 * dark - total};
        if (!best || better(fit, *best)) best = fit;
      }
    }
  }
  if (!best) throw ParameterError("circle search grid is empty for a " + std::to_string(h) + "x" + std::to_string(w) + " image");
  return *best;
}

GrayImage mask_outside(const GrayImage& img, const Circle& c) {
  GrayImage out = img;
  const long long r2 = static_cast<long long>(c.r) * c.r;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const long long dx = x - c.cx, dy = y - c.cy;
      if (dx * dx + dy * dy > r2) out(y, x) = 0;
    }
  return out;
}

GrayImage bound_circle(const GrayImage& img, const Circle& c) {
  const int y0 = std::max(0, c.cy - c.r), y1 = std::min(img.height() - 1, c.cy + c.r);
  const int x0 = std::max(0, c.cx - c.r), x1 = std::min(img.width() - 1, c.cx + c.r);
  if (y1 < y0 || x1 < x0) throw ValidationError("bound_circle: circle lies outside the image");
  GrayImage out(img.pixels.block(y0, x0, y1 - y0 + 1, x1 - x0 + 1), img.view_kind);
  out.pixel_pitch = img.pixel_pitch;
  return out;
}

GrayImage center_profile(const GrayImage& img, Size2 target, std::uint8_t background_level) {
  int y0 = img.height(), y1 = -1, x0 = img.width(), x1 = -1;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (img(y, x) > background_level) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) throw ValidationError("center_profile: profile has no foreground");
  int bh = y1 - y0 + 1, bw = x1 - x0 + 1;
  if (bh > target.height) {
    y0 += (bh - target.height) / 2;
    bh = target.height;
  }
  if (bw > target.width) {
    x0 += (bw - target.width) / 2;
    bw = target.width;
  }
  GrayImage out(target.height, target.width, img.view_kind, 0);
  out.pixel_pitch = img.pixel_pitch;
  out.pixels.block((target.height - bh) / 2, (target.width - bw) / 2, bh, bw) = img.pixels.block(y0, x0, bh, bw);
  return out;
}

PlanResult preprocess_plan_view(const GrayImage& img, const CircleSearchParams& params, Size2 target, int bins) {
  const GrayImage q = quantize(img, bins);
  const Circle c = find_circle(q, params).circle;
  return {resize(bound_circle(mask_outside(q, c), c), target), c};
}

GrayImage preprocess_profile_view(const GrayImage& img, Size2 target, const std::optional<CropRect>& crop, int bins) {
  GrayImage src = img;
  if (crop) {
    if (crop->y < 0 || crop->x < 0 || crop->height < 1 || crop->width < 1 || crop->y + crop->height > img.height() ||
        crop->x + crop->width > img.width())
      throw ValidationError("manual crop lies outside the image");
    src.pixels = img.pixels.block(crop->y, crop->x, crop->height, crop->width);
  }
  // Quantization lifts pure black to the first bin's centre, so foreground
  // means "above the first bin".
  return center_profile(quantize(src, bins), target, quantize_value(0, bins));
}

PixelMatrix transform_plan_mask(const PixelMatrix& mask, const Circle& c, Size2 target) {
  GrayImage m(mask, ViewKind::top);
  return resize_nearest(bound_circle(mask_outside(m, c), c).pixels, target);
}

ExampleGroup preprocess_group(const ExampleGroup& g, const CircleSearchParams& params, Size2 target) {
  ExampleGroup out;
  out.id = g.id;
  out.raw_label = g.raw_label;
  out.source_paths = g.source_paths;
  for (auto v : kAllViews) {
    try {
      const GrayImage& img = g.view(v);
      if (is_plan_view(v)) {
        out.images[v] = preprocess_plan_view(img, params, target).image;
      } else {
        std::optional<CropRect> crop;
        if (auto it = g.manual_crops.find(v); it != g.manual_crops.end()) crop = it->second;
        out.images[v] = preprocess_profile_view(img, target, crop);
      }
      out.images[v].view_kind = v;
    } catch (const std::exception& e) {
      throw ValidationError("group " + g.id + ", view " + std::string(to_string(v)) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace foamqc
