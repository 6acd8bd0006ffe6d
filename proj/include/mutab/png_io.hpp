#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mutab {

// Row-major grayscale raster with values in [0, 1].
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
};

// 8-bit grayscale PNG, no ancillary chunks, so identical pixels give
// identical files.
void write_png_gray(const std::string& path, const GrayImage& img);

// Reads any PNG, converting color/alpha/palette to 8-bit grayscale.
GrayImage read_png_gray(const std::string& path);

}  // namespace mutab
