#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <Eigen/Core>

#include "foamqc/core.hpp"

namespace foamqc {

using PixelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Single-channel raster, row = y, col = x. 0 is dark, 255 is bright.
struct GrayImage {
  PixelMatrix pixels;
  ViewKind view_kind = ViewKind::top;
  std::optional<double> pixel_pitch;  // micrometers per pixel, when known

  GrayImage() = default;
  GrayImage(PixelMatrix p, ViewKind kind) : pixels(std::move(p)), view_kind(kind) {}
  GrayImage(int height, int width, ViewKind kind, std::uint8_t fill = 0)
      : pixels(PixelMatrix::Constant(height, width, fill)), view_kind(kind) {}

  int height() const { return static_cast<int>(pixels.rows()); }
  int width() const { return static_cast<int>(pixels.cols()); }
  std::uint8_t operator()(int y, int x) const { return pixels(y, x); }
  std::uint8_t& operator()(int y, int x) { return pixels(y, x); }

  friend bool operator==(const GrayImage& a, const GrayImage& b) {
    return a.view_kind == b.view_kind && a.pixels.rows() == b.pixels.rows() && a.pixels.cols() == b.pixels.cols() &&
           a.pixels == b.pixels;
  }
};

// Interleaved 8-bit RGB raster.
struct RgbImage {
  PixelMatrix r, g, b;

  RgbImage() = default;
  RgbImage(int height, int width) : r(height, width), g(height, width), b(height, width) {}
  int height() const { return static_cast<int>(r.rows()); }
  int width() const { return static_cast<int>(r.cols()); }
};

struct Size2 {
  int height = 224;
  int width = 224;
  friend bool operator==(const Size2&, const Size2&) = default;
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
}

// Round-half-away-from-zero then clamp to [0, 255].
inline std::uint8_t round_u8(double v) { return clamp_u8(std::round(v)); }

// Area averaging when shrinking in both axes, bilinear interpolation
// otherwise. A constant image resizes to the same constant.
GrayImage resize(const GrayImage& img, Size2 target);

// Nearest-neighbour resize, used for label/mask rasters.
PixelMatrix resize_nearest(const PixelMatrix& m, Size2 target);

RgbImage gray_to_rgb(const GrayImage& img);

// PNG I/O. read_png returns an RGB raster regardless of the file's colour
// type (grayscale is expanded); alpha is dropped.
RgbImage read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path, ViewKind kind);
void write_png(const std::filesystem::path& path, const PixelMatrix& gray);
void write_png(const std::filesystem::path& path, const RgbImage& rgb);

}  // namespace foamqc
