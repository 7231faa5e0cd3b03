#pragma once

#include <span>

namespace gavatar {

/// Images are [H, W, C] row-major with values in [0, 1].
struct ImageView {
  std::span<const double> data;
  int width = 0;
  int height = 0;
  int channels = 3;
};

double mse(const ImageView& a, const ImageView& b);
/// 10 log10(1 / MSE); +infinity for identical images.
double psnr(const ImageView& a, const ImageView& b);
/// Mean SSIM over channels and valid 11x11 windows (Gaussian sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
double ssim(const ImageView& a, const ImageView& b);
/// Mean absolute difference.
double mean_l1(const ImageView& a, const ImageView& b);

}  // namespace gavatar
