#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace emotts {

// 8-bit raster, interleaved channels, row-major pixels.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  bool empty() const { return width == 0 || height == 0; }
  double mean_value() const;
  // (H*W) x 1 luminance in [0, 1], pixel row index y*W + x.
  Eigen::MatrixXd luminance() const;
  friend bool operator==(const Raster&, const Raster&) = default;
};

void write_png(const std::filesystem::path& path, const Raster& image);
// Accepts 8-bit gray, gray+alpha, RGB and RGBA; alpha is dropped.
Raster read_png(const std::filesystem::path& path);

}  // namespace emotts
