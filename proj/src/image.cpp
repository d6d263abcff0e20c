#include "foamqc/image.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

#include "foamqc/preprocess.hpp"

namespace foamqc {

namespace {

// Separable area-averaging weights: output sample o covers the source
// interval [o*scale, (o+1)*scale).
Eigen::MatrixXd area_weights(int src, int dst) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dst, src);
  const double scale = static_cast<double>(src) / dst;
  for (int o = 0; o < dst; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    for (int i = static_cast<int>(std::floor(lo)); i < src && i < hi; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0) w(o, i) = overlap / scale;
    }
  }
  return w;
}

// Bilinear weights with half-pixel centres, edge-clamped.
Eigen::MatrixXd bilinear_weights(int src, int dst) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dst, src);
  const double scale = static_cast<double>(src) / dst;
  for (int o = 0; o < dst; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, src - 1);
    const double f = s - i0;
    w(o, i0) += 1.0 - f;
    w(o, i1) += f;
  }
  return w;
}

}  // namespace

GrayImage resize(const GrayImage& img, Size2 target) {
  if (target.height < 1 || target.width < 1) throw ParameterError("resize: target must be at least 1x1");
  if (img.height() == target.height && img.width() == target.width) return img;
  const bool shrink = target.height <= img.height() && target.width <= img.width();
  const Eigen::MatrixXd wy =
      shrink ? area_weights(img.height(), target.height) : bilinear_weights(img.height(), target.height);
  const Eigen::MatrixXd wx =
      shrink ? area_weights(img.width(), target.width) : bilinear_weights(img.width(), target.width);
  const Eigen::MatrixXd out = wy * img.pixels.cast<double>() * wx.transpose();
  GrayImage result(target.height, target.width, img.view_kind);
  result.pixel_pitch = img.pixel_pitch;
  result.pixels = out.unaryExpr([](double v) { return round_u8(v); });
  return result;
}

PixelMatrix resize_nearest(const PixelMatrix& m, Size2 target) {
  PixelMatrix out(target.height, target.width);
  for (int y = 0; y < target.height; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * m.rows() / target.height), static_cast<int>(m.rows()) - 1);
    for (int x = 0; x < target.width; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * m.cols() / target.width), static_cast<int>(m.cols()) - 1);
      out(y, x) = m(sy, sx);
    }
  }
  return out;
}

RgbImage gray_to_rgb(const GrayImage& img) {
  RgbImage rgb;
  rgb.r = rgb.g = rgb.b = img.pixels;
  return rgb;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ValidationError("cannot open image file: " + path.string());
  return f;
}

void png_error_fn(png_structp, png_const_charp msg) { throw ValidationError(std::string("libpng: ") + msg); }
void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

RgbImage read_png_rgb(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ValidationError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const auto rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * 3) throw ValidationError("unsupported PNG layout: " + path.string());

  std::vector<unsigned char> buffer(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());

  RgbImage out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const unsigned char* p = rows[y] + 3 * x;
      out.r(y, x) = p[0];
      out.g(y, x) = p[1];
      out.b(y, x) = p[2];
    }
  return out;
}

GrayImage read_png_gray(const std::filesystem::path& path, ViewKind kind) {
  GrayImage img = to_grayscale(read_png_rgb(path));
  img.view_kind = kind;
  return img;
}

namespace {

void write_png_rows(const std::filesystem::path& path, int width, int height, int color_type,
                    const std::vector<unsigned char>& buffer, int channels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot write image file: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(buffer.data() + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
}

}  // namespace

void write_png(const std::filesystem::path& path, const PixelMatrix& gray) {
  std::vector<unsigned char> buffer(gray.data(), gray.data() + gray.size());
  write_png_rows(path, static_cast<int>(gray.cols()), static_cast<int>(gray.rows()), PNG_COLOR_TYPE_GRAY, buffer, 1);
}

void write_png(const std::filesystem::path& path, const RgbImage& rgb) {
  const int h = rgb.height(), w = rgb.width();
  std::vector<unsigned char> buffer(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      unsigned char* p = buffer.data() + (static_cast<std::size_t>(y) * w + x) * 3;
      p[0] = rgb.r(y, x);
      p[1] = rgb.g(y, x);
      p[2] = rgb.b(y, x);
    }
  write_png_rows(path, w, h, PNG_COLOR_TYPE_RGB, buffer, 3);
}

}  // namespace foamqc
