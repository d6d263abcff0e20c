#pragma once

#include <random>

#include "foamqc/dataset.hpp"
#include "foamqc/image.hpp"

namespace foamqc::testing {

inline GrayImage random_image(int h, int w, ViewKind kind, std::mt19937_64& rng, int lo = 0, int hi = 255) {
  std::uniform_int_distribution<int> dist(lo, hi);
  GrayImage img(h, w, kind);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img(y, x) = static_cast<std::uint8_t>(dist(rng));
  return img;
}

inline ExampleGroup random_group(const std::string& id, int size, std::mt19937_64& rng,
                                 RawLabel label = RawLabel::normal) {
  ExampleGroup g;
  g.id = id;
  g.raw_label = label;
  for (auto v : kAllViews) g.images[v] = random_image(size, size, v, rng);
  return g;
}

// Dark disc on a bright background.
inline GrayImage disc_image(int size, int cx, int cy, int r, std::uint8_t inside = 20, std::uint8_t outside = 220,
                            ViewKind kind = ViewKind::top) {
  GrayImage img(size, size, kind, outside);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) img(y, x) = inside;
  return img;
}

}  // namespace foamqc::testing
