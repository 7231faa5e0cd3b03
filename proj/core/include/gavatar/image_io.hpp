#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gavatar {

/// [H, W, C] image with values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> data;

  static Image zeros(int width, int height, int channels);
  double& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// 8-bit PNG (gray for 1 channel, RGB for 3, RGBA for 4); values are clamped and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// float32 NPY array of shape [H, W, C] (or [H, W] for one channel).
void write_npy(const std::filesystem::path& path, const Image& image);
Image read_npy(const std::filesystem::path& path);

}  // namespace gavatar
