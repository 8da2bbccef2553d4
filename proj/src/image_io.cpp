#include "nca/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include <png.h>

#include "nca/weights_io.hpp"

namespace nca::io {

uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<uint8_t>(std::floor(c * 255.0f + 0.5f));
}

std::vector<uint8_t> to_rgb8(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw std::invalid_argument("image must be [3,H,W] or [1,H,W], got " + shape_str(image.dims()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<uint8_t> out(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        out[(static_cast<size_t>(y) * w + x) * 3 + k] = quantize(image.at(c == 1 ? 0 : k, y, x));
  return out;
}

namespace {

struct PngReadResult {
  int width = 0, height = 0, channels = 0;
  std::vector<uint8_t> pixels;
};

PngReadResult read_png(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    throw FormatError("unsupported image format (not a PNG): " + path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
  // Reject 16-bit sources instead of silently truncating them.
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw FormatError("unsupported image format (16-bit PNG): " + path.string());
  }
  const bool gray = !(img.format & PNG_FORMAT_FLAG_COLOR);
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  PngReadResult out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = gray ? 1 : 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

}  // namespace

Tensor load_image(const std::filesystem::path& path) {
  PngReadResult png = read_png(path);
  if (png.width < 1 || png.height < 1) throw FormatError("empty image: " + path.string());
  Tensor t({3, png.height, png.width});
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x)
      for (int k = 0; k < 3; ++k) {
        const int src = png.channels == 1 ? 0 : k;
        t.at(k, y, x) = png.pixels[(static_cast<size_t>(y) * png.width + x) * png.channels + src] / 255.0f;
      }
  return t;
}

GrayImage load_gray(const std::filesystem::path& path) {
  PngReadResult png = read_png(path);
  GrayImage g{png.width, png.height, {}};
  g.pixels.resize(static_cast<size_t>(png.width) * png.height);
  for (size_t i = 0; i < g.pixels.size(); ++i) {
    if (png.channels == 1) {
      g.pixels[i] = png.pixels[i];
    } else {
      const uint8_t r = png.pixels[i * 3], gg = png.pixels[i * 3 + 1], b = png.pixels[i * 3 + 2];
      if (r != gg || gg != b) throw FormatError("layout mask must be grayscale: " + path.string());
      g.pixels[i] = r;
    }
  }
  return g;
}

std::vector<uint8_t> encode_png(const Tensor& image) {
  std::vector<uint8_t> rgb = to_rgb8(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(2));
  img.height = static_cast<png_uint_32>(image.dim(1));
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr))
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr))
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

void save_image(const Tensor& image, const std::filesystem::path& path) { write_file(path, encode_png(image)); }

}  // namespace nca::io
