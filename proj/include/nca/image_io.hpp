#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "nca/tensor.hpp"

namespace nca::io {

// 8-bit PNG -> [3,H,W] with values v/255. Gray and RGBA inputs are expanded/stripped;
// 16-bit or non-PNG input is rejected.
Tensor load_image(const std::filesystem::path& path);
// Clamps to [0,1] then quantizes with round-half-up. Accepts [3,H,W] or [1,H,W].
void save_image(const Tensor& image, const std::filesystem::path& path);

// Single-channel 8-bit values, row-major, for layout masks.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;
};
GrayImage load_gray(const std::filesystem::path& path);

uint8_t quantize(float v);
std::vector<uint8_t> encode_png(const Tensor& image);
std::vector<uint8_t> to_rgb8(const Tensor& image);  // interleaved RGB bytes, row-major

}  // namespace nca::io
